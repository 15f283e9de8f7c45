#include "mmgen/training.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mmgen {

std::vector<TokenId> encode_text(const VocabManifest& manifest, const std::string& text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        if (c >= manifest.text_size) {
            throw std::invalid_argument("encode_text: byte " + std::to_string(int(c)) +
                                        " outside text vocabulary of size " +
                                        std::to_string(manifest.text_size));
        }
        out.push_back(manifest.text_token(c));
    }
    return out;
}

std::vector<TokenId> make_query_tokens(const VocabManifest& manifest, const std::string& text) {
    std::vector<TokenId> out{kBos, kUserMark};
    const auto bytes = encode_text(manifest, text);
    out.insert(out.end(), bytes.begin(), bytes.end());
    out.push_back(kEndOfTurn);
    out.push_back(kAssistantMark);
    return out;
}

namespace {

void check_record(const DialogRecord& record) {
    if (record.turns.empty()) {
        throw std::invalid_argument("dialog record has no turns");
    }
    bool has_assistant = false;
    for (size_t i = 0; i < record.turns.size(); ++i) {
        const TurnRole expect = (i % 2 == 0) ? TurnRole::User : TurnRole::Assistant;
        if (record.turns[i].role != expect) {
            throw std::invalid_argument("dialog roles must alternate starting with user");
        }
        has_assistant = has_assistant || record.turns[i].role == TurnRole::Assistant;
    }
    if (!has_assistant) {
        throw std::invalid_argument("dialog record has no assistant turn");
    }
}

// bucket matched for the image ref, used by both GenPrompt and Image parts
ResolutionBucket matched_bucket(const std::string& ref,
                                const std::vector<ResolutionBucket>& buckets) {
    const RasterImage img = load_image(ref);
    return match_bucket(img.width, img.height, buckets);
}

// first Image part at or after (turn_idx, part_idx) in record order
const ContentPart* next_image_part(const DialogRecord& record, size_t turn_idx, size_t part_idx) {
    for (size_t t = turn_idx; t < record.turns.size(); ++t) {
        const auto& parts = record.turns[t].parts;
        for (size_t p = (t == turn_idx) ? part_idx : 0; p < parts.size(); ++p) {
            if (parts[p].kind == PartKind::Image) {
                return &parts[p];
            }
        }
    }
    return nullptr;
}

void push_text(MultimodalSequence& seq, const VocabManifest& manifest, const std::string& text,
               bool mask) {
    for (TokenId id : encode_text(manifest, text)) {
        seq.push(id, mask, Segment::Text);
    }
}

void push_image(MultimodalSequence& seq, const VocabManifest& manifest, const Codebook& codebook,
                const std::vector<ResolutionBucket>& buckets, const std::string& ref, bool mask) {
    const RasterImage raw = load_image(ref);
    const ResolutionBucket bucket = match_bucket(raw.width, raw.height, buckets);
    const RasterImage fitted = fit_image(raw, bucket);
    const ImageTokenGrid grid = encode_image(fitted, codebook, manifest.max_side);
    for (TokenId id : encode_grid(manifest, grid)) {
        const bool is_code = classify(manifest, id).kind == RoleKind::ImageCode;
        seq.push(id, mask, is_code ? Segment::ImageCode : Segment::Structural);
    }
}

}  // namespace

MultimodalSequence format_dialog(const VocabManifest& manifest, const DialogRecord& record,
                                 const Codebook& codebook,
                                 const std::vector<ResolutionBucket>& buckets) {
    check_record(record);

    MultimodalSequence seq;
    seq.push(kBos, false, Segment::Structural);
    for (size_t t = 0; t < record.turns.size(); ++t) {
        const DialogTurn& turn = record.turns[t];
        const bool assistant = turn.role == TurnRole::Assistant;
        seq.push(assistant ? kAssistantMark : kUserMark, false, Segment::Structural);
        for (size_t p = 0; p < turn.parts.size(); ++p) {
            const ContentPart& part = turn.parts[p];
            switch (part.kind) {
                case PartKind::Text:
                    push_text(seq, manifest, part.text, assistant);
                    break;
                case PartKind::GenPrompt: {
                    const ContentPart* target = next_image_part(record, t, p + 1);
                    if (!target) {
                        throw std::invalid_argument(
                            "generation prompt has no later image part to size against");
                    }
                    const ResolutionBucket bucket = matched_bucket(target->image_ref, buckets);
                    push_text(seq, manifest,
                              build_t2i_prompt(bucket.width_px, bucket.height_px, part.text,
                                               manifest.patch_px),
                              assistant);
                    break;
                }
                case PartKind::Image:
                    push_image(seq, manifest, codebook, buckets, part.image_ref, assistant);
                    break;
            }
        }
        seq.push(kEndOfTurn, assistant, Segment::Structural);
    }
    return seq;
}

DialogRecord task_to_dialog(const TaskRecord& record) {
    const auto text_part = [](const std::string& s) {
        return ContentPart{PartKind::Text, s, {}};
    };
    const auto gen_part = [](const std::string& s) {
        return ContentPart{PartKind::GenPrompt, s, {}};
    };
    const auto image_part = [](const std::string& ref) {
        return ContentPart{PartKind::Image, {}, ref};
    };
    const auto require = [&](const std::string& field, bool ok) {
        if (!ok) {
            throw std::invalid_argument("task record is missing " + field);
        }
    };

    DialogRecord dialog;
    switch (record.kind) {
        case TaskKind::TextToImage:
            require("text", !record.text.empty());
            require("target_image", !record.target_image.empty());
            dialog.turns.push_back({TurnRole::User, {gen_part(record.text)}});
            dialog.turns.push_back({TurnRole::Assistant, {image_part(record.target_image)}});
            break;
        case TaskKind::Captioning:
            require("input_image", !record.input_image.empty());
            require("caption", !record.caption.empty());
            dialog.turns.push_back(
                {TurnRole::User, {image_part(record.input_image), text_part(record.text)}});
            dialog.turns.push_back({TurnRole::Assistant, {text_part(record.caption)}});
            break;
        case TaskKind::Editing:
        case TaskKind::DensePrediction:
            require("input_image", !record.input_image.empty());
            require("target_image", !record.target_image.empty());
            dialog.turns.push_back(
                {TurnRole::User, {image_part(record.input_image), text_part(record.text)}});
            dialog.turns.push_back({TurnRole::Assistant, {image_part(record.target_image)}});
            break;
        case TaskKind::SpatialConditional:
            require("input_image", !record.input_image.empty());
            require("target_image", !record.target_image.empty());
            require("text", !record.text.empty());
            dialog.turns.push_back(
                {TurnRole::User, {image_part(record.input_image), gen_part(record.text)}});
            dialog.turns.push_back({TurnRole::Assistant, {image_part(record.target_image)}});
            break;
        case TaskKind::Multiview: {
            require("text", !record.text.empty());
            if (record.view_images.size() < 2) {
                throw std::invalid_argument("multiview task needs k >= 2 views");
            }
            dialog.turns.push_back({TurnRole::User, {gen_part(record.text)}});
            DialogTurn answer{TurnRole::Assistant, {}};
            for (const auto& view : record.view_images) {
                answer.parts.push_back(image_part(view));
            }
            dialog.turns.push_back(std::move(answer));
            break;
        }
    }
    return dialog;
}

MultimodalSequence format_task(const VocabManifest& manifest, const TaskRecord& record,
                               const Codebook& codebook,
                               const std::vector<ResolutionBucket>& buckets) {
    return format_dialog(manifest, task_to_dialog(record), codebook, buckets);
}

MultimodalSequence apply_context_drop(const MultimodalSequence& seq, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) {
        throw std::invalid_argument("apply_context_drop: p must lie in [0, 1]");
    }
    size_t soi = seq.tokens.size();
    for (size_t i = 0; i < seq.tokens.size(); ++i) {
        if (seq.tokens[i] == kSoi) {
            soi = i;
            break;
        }
    }
    if (soi == seq.tokens.size()) {
        return seq;  // no image span, nothing to drop
    }
    if (rng.next_unit() >= p) {
        return seq;
    }
    if (soi <= 1) {
        return seq;  // nothing strictly between BOS and SOI
    }
    MultimodalSequence out;
    out.push(seq.tokens[0], seq.loss_mask[0] != 0, seq.segments[0]);
    for (size_t i = soi; i < seq.tokens.size(); ++i) {
        out.push(seq.tokens[i], seq.loss_mask[i] != 0, seq.segments[i]);
    }
    return out;
}

std::vector<PackedBatch> cluster_batches(const std::vector<MultimodalSequence>& seqs,
                                         size_t batch_size) {
    if (seqs.empty()) {
        throw std::invalid_argument("cluster_batches: no sequences");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("cluster_batches: batch_size must be >= 1");
    }
    std::vector<size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return seqs[a].size() < seqs[b].size(); });

    std::vector<PackedBatch> batches;
    for (size_t start = 0; start < order.size(); start += batch_size) {
        PackedBatch batch;
        const size_t end = std::min(order.size(), start + batch_size);
        batch.ids.assign(order.begin() + start, order.begin() + end);
        batch.min_tokens = seqs[batch.ids.front()].size();
        batch.max_tokens = seqs[batch.ids.back()].size();
        batches.push_back(std::move(batch));
    }
    return batches;
}

std::vector<BatchItem> materialize_batch(const PackedBatch& batch,
                                         const std::vector<MultimodalSequence>& seqs) {
    std::vector<BatchItem> items;
    items.reserve(batch.ids.size());
    for (size_t id : batch.ids) {
        const MultimodalSequence& seq = seqs.at(id);
        if (seq.size() < 2) {
            throw std::invalid_argument("cannot train on a sequence shorter than 2 tokens");
        }
        BatchItem item;
        const size_t n = batch.max_tokens - 1;  // next-token view of the padded length
        item.tokens.assign(n, kPad);
        item.targets.assign(n, kPad);
        item.mask.assign(n, 0);
        for (size_t t = 0; t + 1 < seq.size(); ++t) {
            item.tokens[t] = seq.tokens[t];
            item.targets[t] = seq.tokens[t + 1];
            item.mask[t] = seq.loss_mask[t + 1];
        }
        items.push_back(std::move(item));
    }
    return items;
}

std::vector<StepMetrics> run_stage(ModelParams& params, OptState& opt,
                                   const std::vector<DialogRecord>& records,
                                   const VocabManifest& manifest, const Codebook& codebook,
                                   const Stage& stage, const TrainHyper& hyper, int stage_index) {
    if (records.empty()) {
        throw std::invalid_argument("run_stage: empty dataset");
    }
    if (hyper.steps < 0 || hyper.batch_size < 1) {
        throw std::invalid_argument("run_stage: invalid steps or batch size");
    }

    const std::string tag = "stage" + std::to_string(stage_index);
    Rng drop_rng(derive_seed(hyper.seed, "drop-" + tag));
    Rng dropout_rng(derive_seed(hyper.seed, "dropout-" + tag));
    const AdamWParams adamw{hyper.lr, hyper.weight_decay, hyper.beta1, hyper.beta2, 1e-8};

    std::vector<StepMetrics> metrics;
    int step = 0;
    while (step < hyper.steps) {
        std::vector<MultimodalSequence> seqs;
        seqs.reserve(records.size());
        for (const auto& record : records) {
            MultimodalSequence seq = format_dialog(manifest, record, codebook, stage.buckets);
            seqs.push_back(apply_context_drop(seq, hyper.context_drop_p, drop_rng));
        }
        const auto batches = cluster_batches(seqs, static_cast<size_t>(hyper.batch_size));
        for (const auto& batch : batches) {
            if (step >= hyper.steps) {
                break;
            }
            const auto items = materialize_batch(batch, seqs);
            const GradResult result = grad(params, items, hyper.z_weight, &dropout_rng);
            adamw_step(params, result.grads, opt, adamw);
            metrics.push_back(StepMetrics{stage_index, step, result.loss.ce, result.loss.zloss,
                                          result.loss.mean_abs_logz, result.loss.max_abs_logit,
                                          batch.ids.size()});
            ++step;
        }
    }
    return metrics;
}

std::vector<StepMetrics> run_plan(
    ModelParams& params, const std::vector<DialogRecord>& records, const VocabManifest& manifest,
    const Codebook& codebook, const StagePlan& plan, const TrainHyper& hyper,
    const std::function<void(int, const ModelParams&, const OptState&)>& on_stage_done) {
    std::vector<StepMetrics> all;
    for (size_t s = 0; s < plan.stages.size(); ++s) {
        OptState opt = make_opt_state(params.config);
        const auto metrics = run_stage(params, opt, records, manifest, codebook, plan.stages[s],
                                       hyper, static_cast<int>(s));
        all.insert(all.end(), metrics.begin(), metrics.end());
        if (on_stage_done) {
            on_stage_done(static_cast<int>(s), params, opt);
        }
    }
    return all;
}

std::vector<DialogRecord> make_color_dataset(const std::vector<std::string>& colors, int base_px) {
    std::vector<DialogRecord> out;
    out.reserve(colors.size());
    for (const auto& color : colors) {
        TaskRecord task;
        task.kind = TaskKind::TextToImage;
        task.text = color;
        task.target_image = "synth:solid:" + color + ":" + std::to_string(base_px) + "x" +
                            std::to_string(base_px);
        out.push_back(task_to_dialog(task));
    }
    return out;
}

std::vector<DialogRecord> make_stripe_dataset(
    const std::vector<std::pair<std::string, std::string>>& pairs, int period_px, int base_px) {
    std::vector<DialogRecord> out;
    out.reserve(pairs.size());
    for (const auto& [a, b] : pairs) {
        TaskRecord task;
        task.kind = TaskKind::TextToImage;
        task.text = a + " and " + b + " stripes";
        task.target_image = "synth:stripes:" + a + ":" + b + ":" + std::to_string(period_px) +
                            ":" + std::to_string(base_px) + "x" + std::to_string(base_px);
        out.push_back(task_to_dialog(task));
    }
    return out;
}

std::vector<DialogRecord> make_caption_dataset(
    const std::vector<std::pair<std::string, std::string>>& qa) {
    std::vector<DialogRecord> out;
    out.reserve(qa.size());
    for (const auto& [q, a] : qa) {
        DialogRecord record;
        record.turns.push_back({TurnRole::User, {ContentPart{PartKind::Text, q, {}}}});
        record.turns.push_back({TurnRole::Assistant, {ContentPart{PartKind::Text, a, {}}}});
        out.push_back(std::move(record));
    }
    return out;
}

namespace {

using nlohmann::json;

ContentPart part_from_json(const json& j) {
    if (j.contains("text")) {
        return ContentPart{PartKind::Text, j.at("text").get<std::string>(), {}};
    }
    if (j.contains("gen_prompt")) {
        return ContentPart{PartKind::GenPrompt, j.at("gen_prompt").get<std::string>(), {}};
    }
    if (j.contains("image")) {
        return ContentPart{PartKind::Image, {}, j.at("image").get<std::string>()};
    }
    throw std::runtime_error("dialog part needs one of: text, gen_prompt, image");
}

json part_to_json(const ContentPart& part) {
    switch (part.kind) {
        case PartKind::Text: return json{{"text", part.text}};
        case PartKind::GenPrompt: return json{{"gen_prompt", part.text}};
        case PartKind::Image: return json{{"image", part.image_ref}};
    }
    throw std::logic_error("bad part kind");
}

DialogRecord dialog_from_json(const json& j) {
    DialogRecord record;
    for (const auto& jt : j.at("turns")) {
        DialogTurn turn;
        const std::string role = jt.at("role").get<std::string>();
        if (role == "user") {
            turn.role = TurnRole::User;
        } else if (role == "assistant") {
            turn.role = TurnRole::Assistant;
        } else {
            throw std::runtime_error("unknown dialog role: " + role);
        }
        for (const auto& jp : jt.at("parts")) {
            turn.parts.push_back(part_from_json(jp));
        }
        record.turns.push_back(std::move(turn));
    }
    return record;
}

DialogRecord record_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "dialog") {
        return dialog_from_json(j);
    }
    TaskRecord task;
    if (kind == "text-to-image") {
        task.kind = TaskKind::TextToImage;
        task.text = j.at("text").get<std::string>();
        task.target_image = j.at("image").get<std::string>();
    } else if (kind == "captioning") {
        task.kind = TaskKind::Captioning;
        task.input_image = j.at("image").get<std::string>();
        task.text = j.value("instruction", std::string("Describe this image."));
        task.caption = j.at("caption").get<std::string>();
    } else if (kind == "editing" || kind == "dense-prediction") {
        task.kind = (kind == "editing") ? TaskKind::Editing : TaskKind::DensePrediction;
        task.input_image = j.at("image").get<std::string>();
        task.text = j.at("instruction").get<std::string>();
        task.target_image = j.at("target").get<std::string>();
    } else if (kind == "spatial-conditional") {
        task.kind = TaskKind::SpatialConditional;
        task.input_image = j.at("condition").get<std::string>();
        task.text = j.at("text").get<std::string>();
        task.target_image = j.at("target").get<std::string>();
    } else if (kind == "multiview") {
        task.kind = TaskKind::Multiview;
        task.text = j.at("text").get<std::string>();
        task.view_images = j.at("views").get<std::vector<std::string>>();
    } else {
        throw std::runtime_error("unknown record kind: " + kind);
    }
    return task_to_dialog(task);
}

}  // namespace

std::vector<DialogRecord> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read dataset file: " + path);
    }
    std::vector<DialogRecord> records;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            records.push_back(record_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

void save_dataset(const std::vector<DialogRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write dataset file: " + path);
    }
    for (const auto& record : records) {
        json j;
        j["kind"] = "dialog";
        json turns = json::array();
        for (const auto& turn : record.turns) {
            json jt;
            jt["role"] = turn.role == TurnRole::User ? "user" : "assistant";
            json parts = json::array();
            for (const auto& part : turn.parts) {
                parts.push_back(part_to_json(part));
            }
            jt["parts"] = parts;
            turns.push_back(jt);
        }
        j["turns"] = turns;
        out << j.dump() << "\n";
    }
}

std::vector<std::string> dataset_image_refs(const std::vector<DialogRecord>& records) {
    std::vector<std::string> refs;
    for (const auto& record : records) {
        for (const auto& turn : record.turns) {
            for (const auto& part : turn.parts) {
                if (part.kind == PartKind::Image) {
                    refs.push_back(part.image_ref);
                }
            }
        }
    }
    return refs;
}

}  // namespace mmgen
