#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmgen/codec.hpp"
#include "mmgen/model.hpp"
#include "mmgen/resolution.hpp"
#include "mmgen/rng.hpp"
#include "mmgen/sequence.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

enum class PartKind : uint8_t {
    Text,       // literal text, byte-tokenized
    Image,      // image reference, fitted to the active stage and encoded
    GenPrompt,  // pixel-size-templated prompt around `text`, sized by the bucket
                // matched for the next image part in the record
};

struct ContentPart {
    PartKind kind = PartKind::Text;
    std::string text;       // Text / GenPrompt payload
    std::string image_ref;  // Image payload (path or synth: URI)
};

enum class TurnRole : uint8_t { User, Assistant };

struct DialogTurn {
    TurnRole role = TurnRole::User;
    std::vector<ContentPart> parts;
};

// Roles must alternate starting with user, with at least one assistant turn.
struct DialogRecord {
    std::vector<DialogTurn> turns;
};

enum class TaskKind : uint8_t {
    TextToImage,
    Captioning,
    Editing,
    DensePrediction,
    SpatialConditional,
    Multiview,
};

struct TaskRecord {
    TaskKind kind = TaskKind::TextToImage;
    std::string text;          // description / instruction, task dependent
    std::string caption;       // captioning target text
    std::string input_image;   // source or condition image
    std::string target_image;  // target image
    std::vector<std::string> view_images;  // multiview targets, k >= 2
};

struct PackedBatch {
    std::vector<size_t> ids;  // indices into the sequence list
    size_t max_tokens = 0;
    size_t min_tokens = 0;
};

// Byte-level text tokens (one token per byte); requires text_size >= 256 for
// arbitrary input.
std::vector<TokenId> encode_text(const VocabManifest& manifest, const std::string& text);

// [BOS, UserMark, text bytes, EndOfTurn, AssistantMark] — the prompt prefix a
// generation request feeds the model, mirroring the training dialog template.
std::vector<TokenId> make_query_tokens(const VocabManifest& manifest, const std::string& text);

// Dialog -> masked multimodal sequence:
//   BOS, then per turn: role marker, content tokens, EndOfTurn.
// The loss mask is true exactly on assistant-turn content tokens plus their
// EndOfTurn. Images are matched to a stage bucket, fitted, and serialized
// with shape indicators and row markers; GenPrompt parts expand to the
// size-templated prompt for the matched bucket of the record's next image part.
MultimodalSequence format_dialog(const VocabManifest& manifest, const DialogRecord& record,
                                 const Codebook& codebook,
                                 const std::vector<ResolutionBucket>& buckets);

// Deterministic dialog template per task kind (see README for the exact
// shapes); masking as in format_dialog.
DialogRecord task_to_dialog(const TaskRecord& record);
MultimodalSequence format_task(const VocabManifest& manifest, const TaskRecord& record,
                               const Codebook& codebook,
                               const std::vector<ResolutionBucket>& buckets);

// With probability p (one draw per image-bearing sequence) removes every
// token strictly between BOS and the first SOI. Sequences without an image
// span pass through untouched and consume no randomness.
MultimodalSequence apply_context_drop(const MultimodalSequence& seq, double p, Rng& rng);

// Sorts by token count (stable in input order) and chunks consecutively;
// the last batch may be short.
std::vector<PackedBatch> cluster_batches(const std::vector<MultimodalSequence>& seqs,
                                         size_t batch_size);

// Next-token training view of one batch: inputs seq[0..n-2], targets
// seq[1..n-1], mask from the sequence's loss mask, padded to the batch max
// with Pad tokens carrying mask 0.
std::vector<BatchItem> materialize_batch(const PackedBatch& batch,
                                         const std::vector<MultimodalSequence>& seqs);

struct TrainHyper {
    double lr = 2e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double z_weight = 1e-5;
    double context_drop_p = 0.1;
    int batch_size = 8;
    int steps = 0;
    uint64_t seed = 0;
};

struct StepMetrics {
    int stage = 0;
    int step = 0;  // step index within the stage
    double ce = 0.0;
    double zloss = 0.0;          // mean (log Z)^2
    double mean_abs_logz = 0.0;  // mean |log Z|
    double max_abs_logit = 0.0;
    size_t batch_sequences = 0;
};

// One progressive-finetuning stage: per epoch the records are formatted against the stage's
// buckets, context-dropped, clustered by length, and stepped with AdamW until
// hyper.steps is reached. Aborts if the loss turns non-finite.
std::vector<StepMetrics> run_stage(ModelParams& params, OptState& opt,
                                   const std::vector<DialogRecord>& records,
                                   const VocabManifest& manifest, const Codebook& codebook,
                                   const Stage& stage, const TrainHyper& hyper, int stage_index);

// Runs every stage in order on the same parameters (stage i+1 starts from
// stage i's weights, with a fresh optimizer), tagging metrics with the stage
// index. on_stage_done, when set, observes the parameters after each stage.
std::vector<StepMetrics> run_plan(
    ModelParams& params, const std::vector<DialogRecord>& records, const VocabManifest& manifest,
    const Codebook& codebook, const StagePlan& plan, const TrainHyper& hyper,
    const std::function<void(int, const ModelParams&, const OptState&)>& on_stage_done = {});

// --- desk-scale synthetic datasets -----------------------------------------

// One text-to-image dialog per color name: user GenPrompt(color), assistant
// solid-color image of base_px x base_px.
std::vector<DialogRecord> make_color_dataset(const std::vector<std::string>& colors, int base_px);

// Striped-pattern text-to-image dialogs ("<a> and <b> stripes").
std::vector<DialogRecord> make_stripe_dataset(
    const std::vector<std::pair<std::string, std::string>>& pairs, int period_px, int base_px);

// Plain text dialogs (user question, assistant answer).
std::vector<DialogRecord> make_caption_dataset(
    const std::vector<std::pair<std::string, std::string>>& qa);

// --- dataset manifest file (JSON lines) -------------------------------------

std::vector<DialogRecord> load_dataset(const std::string& path);
void save_dataset(const std::vector<DialogRecord>& records, const std::string& path);

// Every image reference appearing in the records, in order of appearance.
std::vector<std::string> dataset_image_refs(const std::vector<DialogRecord>& records);

}  // namespace mmgen
