#pragma once

#include <string>
#include <vector>

#include "mmdit/latent.hpp"
#include "mmdit/rope.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

enum class TaskKind { t2v, i2v, extension, start_end, edit };

const char* task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
    TaskKind kind = TaskKind::t2v;
    int64_t frames = 0, height = 0, width = 0, channels = 0;  // target dims
    int64_t extend_frames = 0;  // Extension(k): first k frames conditioned
    Tensor edit_mask;           // [T,H,W,1] binary volume for edit

    void validate() const;
};

// Binary mask [T,H,W,1]; 1 = condition, 0 = generate.
Tensor build_task_mask(const TaskSpec& spec);

// Loss weights [T,H,W,1] = 1 - task mask: conditioned regions are pass-through.
Tensor build_loss_mask(const TaskSpec& spec);

// The channel-concatenated video-branch input: Z = (V | I | M) along channels.
struct ChannelInput {
    Tensor noisy;    // V: [T,H,W,C]
    Tensor cond;     // I: [T,H,W,C], black latent wherever M = 0
    Tensor mask;     // M: [T,H,W,1]
    Tensor z_input;  // [T,H,W,2C+1]
};

// cond_frames content outside the mask is overwritten with the black-latent
// row (the stub encoding of an all-zeros frame, one value per channel).
ChannelInput assemble_channel_input(Tape& tape, const LatentVideo& v_noisy, const LatentVideo& cond_frames,
                                    const Tensor& mask, const Tensor& black_latent);

// inverse of the channel concatenation
struct ChannelSplit {
    Tensor noisy, cond, mask;
};
ChannelSplit split_channel_input(Tape& tape, const Tensor& z_input, int64_t latent_channels);

enum class ReferenceSource { image, clip, audio };

struct Reference {
    Tensor latent;  // [frames, H', W', C]
    ReferenceSource source = ReferenceSource::image;
};

struct ReferenceSet {
    std::vector<Reference> refs;

    int64_t total_frames() const;
    std::vector<int64_t> frame_counts() const;
};

// Center-pad every reference to the video spatial grid, filling with the
// black-latent row. References larger than the grid are rejected.
ReferenceSet pad_references(const ReferenceSet& refs, int64_t height, int64_t width, const Tensor& black_latent);

// Z_attn = [Z_cond ; Z_video] along the temporal axis, plus the offset rope
// plan: condition frames get t = -N_cond + i, generated frames 0..T-1.
struct PrependResult {
    Tensor z_attn;        // [(N_cond + T), H, W, C']
    RopePlan rope;
    int64_t cond_frames = 0;
};
PrependResult prepend_references(Tape& tape, const ReferenceSet& refs, const LatentVideo& z_video, int64_t head_dim);

// Audio references enter the audio branch the same way: prepended tokens with
// negative temporal indices on the scaled timeline.
struct AudioPrependResult {
    Tensor tokens;  // [(N_ref + L), C]
    RopePlan rope;
    int64_t cond_tokens = 0;
};
AudioPrependResult prepend_audio_references(Tape& tape, const std::vector<Tensor>& refs, const LatentAudio& z_audio,
                                            int64_t head_dim, double temporal_scale);

}  // namespace mmdit
