#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mmdit/flow.hpp"
#include "mmdit/refiner.hpp"

namespace mmdit {

// ---- deterministic encoder stubs ---------------------------------------------

// Fixed patchify projection standing in for the video VAE. encode(zeros)
// equals the bias row, which is the black-latent constant.
struct VaeStub {
    int64_t patch = 2;
    int64_t channels = 4;
    Tensor weight;  // [patch*patch*3, C]
    Tensor bias;    // [C]

    VaeStub(int64_t latent_channels, int64_t patch_size = 2, uint64_t seed = 0x7aebull);

    Tensor encode_frame(const Tensor& pixels) const;  // [h,w,3] -> [h/p, w/p, C]
    Tensor encode_video(const Tensor& pixels) const;  // [T,h,w,3] -> [T,H,W,C]
    Tensor black_latent() const { return bias; }
};

// Structured caption mirroring the special-token fields.
struct CaptionRecord {
    std::string text, sfx, dialogue, singing, bgm;

    std::string flatten() const;  // "<text>..</text> <sfx>..</sfx> ..." token stream
};

// Deterministic hash-of-token embeddings, unit-norm rows. Tokens shaped like
// @image_N / @video_N / @audio_N map to reserved slot embeddings in order of
// first appearance. An empty caption yields the single start token.
Tensor embed_prompt_stub(const CaptionRecord& caption, int64_t dim, int64_t max_len = 0);

// ---- synthetic data -------------------------------------------------------------

struct SyntheticDims {
    int64_t frames = 4, height = 4, width = 4;  // latent grid
    int64_t audio_tokens = 16;
};

struct SyntheticSample {
    uint64_t seed = 0;
    TaskSpec task;
    Tensor pixel_video;  // [T, h_px, w_px, 3] procedural moving pattern
    Tensor audio_raw;    // [L, C_a] tone-envelope tokens
    CaptionRecord caption;
    int64_t event_frame = 0;      // flash frame of the video pattern
    int64_t audio_peak_index = 0; // envelope argmax, locked to the event frame
};

struct BatchItem {
    SyntheticSample sample;
    LatentVideo z_v0;
    LatentAudio z_a0;
    ConditionBundle cond;
};

SyntheticSample gen_synthetic_sample(uint64_t seed, TaskKind kind, const SyntheticDims& dims, const VaeStub& vae,
                                     int64_t audio_channels);

// task = nullopt rotates through all five kinds
std::vector<BatchItem> gen_synthetic_batch(uint64_t seed, std::optional<TaskKind> task, int64_t count,
                                           const SyntheticDims& dims, const VaeStub& vae, const ModelConfig& model_cfg,
                                           int64_t num_video_refs = 0, int64_t num_audio_refs = 0);

// ---- tensor archive (checkpoints and latent outputs) ------------------------------

// magic "MMDT", u32 version, length-prefixed UTF-8 header text, u64 step,
// u64 rng seed/counter, then (name, rank, extents, f64 payload) records,
// all little-endian
struct TensorArchive {
    uint32_t version = 1;
    std::string header_text;
    int64_t step = 0;
    uint64_t rng_seed = 0;
    uint64_t rng_counter = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

void save_archive(const std::string& path, const TensorArchive& archive);
TensorArchive load_archive(const std::string& path);

void save_checkpoint(const std::string& path, const GenerationModel& model, const AdamState& adam, int64_t step,
                     uint64_t rng_seed);
struct CheckpointData {
    int64_t step = 0;
    uint64_t rng_seed = 0;
    GenerationModel model;
    AdamState adam;  // empty when the checkpoint carries no optimizer state
};
CheckpointData load_checkpoint(const std::string& path);

// ---- configuration ------------------------------------------------------------------

// flat key=value text with [model] / [data] / [train] / [sample] sections
struct HarnessConfig {
    ModelConfig model;
    SyntheticDims dims;
    int64_t steps = 200;
    double lr = 1e-2;  // Adam moves at most lr per coordinate per step; the
                       // 200-step overfit regression needs ~0.2 of travel
    int64_t batch = 1;
    uint64_t seed = 42;
    TaskKind task = TaskKind::i2v;
    bool overfit = true;
    int64_t num_video_refs = 0;
    int64_t num_audio_refs = 0;
    int64_t sample_steps = 8;

    static HarnessConfig parse_text(const std::string& text);
    static HarnessConfig parse_file(const std::string& path);
    std::string serialize() const;
};

// ---- command drivers -----------------------------------------------------------------

struct TrainOverrides {
    std::optional<uint64_t> seed;
    std::optional<int64_t> steps;
    std::optional<std::string> task;
};

// writes step,loss CSV to metrics_path; resumes from checkpoint_path when the
// file exists; saves the checkpoint there at the end
int cmd_train(const HarnessConfig& cfg, const std::string& metrics_path, const std::string& checkpoint_path,
              const TrainOverrides& overrides, std::ostream& log);

int cmd_sample(const HarnessConfig& cfg, const std::string& checkpoint_path, const std::string& out_path,
               const TrainOverrides& overrides, std::ostream& log);

int cmd_verify(const std::string& inject_fault, std::ostream& out);

int cmd_bench(const std::string& out_path, std::ostream& log);

}  // namespace mmdit
