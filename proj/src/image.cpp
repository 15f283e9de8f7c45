#include "mmgen/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mmgen {

RasterImage make_image(int width, int height, double r, double g, double b) {
    if (width < 1 || height < 1) {
        throw std::invalid_argument("make_image: dimensions must be >= 1");
    }
    RasterImage img;
    img.width = width;
    img.height = height;
    img.pixels.resize(3 * static_cast<size_t>(width) * height);
    for (size_t i = 0; i < img.pixels.size(); i += 3) {
        img.pixels[i] = r;
        img.pixels[i + 1] = g;
        img.pixels[i + 2] = b;
    }
    return img;
}

void save_ppm(const RasterImage& image, const std::string& path) {
    if (image.width < 1 || image.height < 1 ||
        image.pixels.size() != 3 * static_cast<size_t>(image.width) * image.height) {
        throw std::invalid_argument("save_ppm: malformed image");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write image file: " + path);
    }
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    for (size_t i = 0; i < image.pixels.size(); ++i) {
        const double v = std::clamp(image.pixels[i], 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

int read_ppm_int(std::istream& in) {
    // skips whitespace and '#' comment lines between header fields
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') {
                c = in.get();
            }
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF || !std::isdigit(c)) {
        throw std::runtime_error("load_ppm: malformed header");
    }
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}

}  // namespace

RasterImage load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read image file: " + path);
    }
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (magic[0] != 'P' || magic[1] != '6') {
        throw std::runtime_error("load_ppm: not a P6 file: " + path);
    }
    const int width = read_ppm_int(in);
    const int height = read_ppm_int(in);
    const int maxval = read_ppm_int(in);
    if (width < 1 || height < 1 || maxval != 255) {
        throw std::runtime_error("load_ppm: unsupported header in " + path);
    }
    std::vector<unsigned char> bytes(3 * static_cast<size_t>(width) * height);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw std::runtime_error("load_ppm: truncated pixel data in " + path);
    }
    RasterImage img;
    img.width = width;
    img.height = height;
    img.pixels.resize(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) {
        img.pixels[i] = bytes[i] / 255.0;
    }
    return img;
}

bool parse_color(const std::string& name, double rgb[3]) {
    struct Named {
        const char* name;
        double r, g, b;
    };
    static const Named table[] = {
        {"red", 1, 0, 0},    {"green", 0, 1, 0},   {"blue", 0, 0, 1},
        {"yellow", 1, 1, 0}, {"cyan", 0, 1, 1},    {"magenta", 1, 0, 1},
        {"white", 1, 1, 1},  {"black", 0, 0, 0},   {"gray", 0.5, 0.5, 0.5},
    };
    for (const auto& n : table) {
        if (name == n.name) {
            rgb[0] = n.r;
            rgb[1] = n.g;
            rgb[2] = n.b;
            return true;
        }
    }
    double r, g, b;
    char comma1, comma2;
    std::istringstream ss(name);
    if ((ss >> r >> comma1 >> g >> comma2 >> b) && comma1 == ',' && comma2 == ',') {
        rgb[0] = r;
        rgb[1] = g;
        rgb[2] = b;
        return true;
    }
    return false;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

void parse_dims(const std::string& s, int& w, int& h) {
    const size_t x = s.find('x');
    if (x == std::string::npos) {
        throw std::runtime_error("synth image: bad dimensions '" + s + "'");
    }
    w = std::stoi(s.substr(0, x));
    h = std::stoi(s.substr(x + 1));
    if (w < 1 || h < 1) {
        throw std::runtime_error("synth image: dimensions must be >= 1");
    }
}

double must_color(const std::string& name, double rgb[3]) {
    if (!parse_color(name, rgb)) {
        throw std::runtime_error("synth image: unknown color '" + name + "'");
    }
    return 0;
}

RasterImage synthesize(const std::string& spec) {
    const auto parts = split(spec, ':');
    if (parts.size() < 2 || parts[0] != "synth") {
        throw std::runtime_error("bad synth spec: " + spec);
    }
    const std::string& kind = parts[1];
    if (kind == "solid") {
        if (parts.size() != 4) {
            throw std::runtime_error("synth:solid:<color>:<WxH> expected, got " + spec);
        }
        double rgb[3];
        must_color(parts[2], rgb);
        int w, h;
        parse_dims(parts[3], w, h);
        return make_image(w, h, rgb[0], rgb[1], rgb[2]);
    }
    if (kind == "stripes" || kind == "hstripes") {
        if (parts.size() != 6) {
            throw std::runtime_error("synth:" + kind + ":<a>:<b>:<period>:<WxH> expected, got " +
                                     spec);
        }
        double a[3], b[3];
        must_color(parts[2], a);
        must_color(parts[3], b);
        const int period = std::stoi(parts[4]);
        if (period < 1) {
            throw std::runtime_error("synth stripes: period must be >= 1");
        }
        int w, h;
        parse_dims(parts[5], w, h);
        RasterImage img = make_image(w, h);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const int band = (kind == "stripes" ? x : y) / period;
                const double* c = (band % 2 == 0) ? a : b;
                double* p = img.at(x, y);
                p[0] = c[0];
                p[1] = c[1];
                p[2] = c[2];
            }
        }
        return img;
    }
    throw std::runtime_error("unknown synth kind in " + spec);
}

}  // namespace

RasterImage load_image(const std::string& ref) {
    if (ref.rfind("synth:", 0) == 0) {
        return synthesize(ref);
    }
    return load_ppm(ref);
}

}  // namespace mmgen
