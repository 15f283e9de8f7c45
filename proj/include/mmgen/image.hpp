#pragma once

#include <string>
#include <vector>

namespace mmgen {

// Row-major RGB raster, each channel in [0, 1].
struct RasterImage {
    int width = 0;   // pixels
    int height = 0;  // pixels
    std::vector<double> pixels;  // 3 * width * height values

    double* at(int x, int y) { return pixels.data() + 3 * (static_cast<size_t>(y) * width + x); }
    const double* at(int x, int y) const {
        return pixels.data() + 3 * (static_cast<size_t>(y) * width + x);
    }

    bool operator==(const RasterImage&) const = default;
};

RasterImage make_image(int width, int height, double r = 0.0, double g = 0.0, double b = 0.0);

// Binary PPM (P6), maxval 255. Channels quantize by round(v * 255).
void save_ppm(const RasterImage& image, const std::string& path);
RasterImage load_ppm(const std::string& path);

// Resolves an image reference: a "synth:" URI is generated in memory,
// anything else is read as a PPM file. Supported URIs:
//   synth:solid:<color>:<W>x<H>
//   synth:stripes:<colorA>:<colorB>:<period_px>:<W>x<H>   (vertical stripes)
//   synth:hstripes:<colorA>:<colorB>:<period_px>:<W>x<H>  (horizontal stripes)
// <color> is a named color (red, green, blue, yellow, cyan, magenta, white,
// black, gray) or "r,g,b" with channels in [0, 1].
RasterImage load_image(const std::string& ref);

bool parse_color(const std::string& name, double rgb[3]);

}  // namespace mmgen
