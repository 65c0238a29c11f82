#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mmdit/tensor.hpp"

namespace mmdit {

// Integer (t, h, w) grid position of one token. Audio tokens use (t, 0, 0).
struct TokenIndex {
    int64_t t = 0;
    int64_t h = 0;
    int64_t w = 0;
};

// Per-axis rotary frequency layout over a (t, h, w) token grid. head_dim is
// split into three even blocks; the temporal block's angles are additionally
// multiplied by temporal_scale so modalities with different temporal
// resolutions share one angular timeline.
struct RopePlan {
    int64_t head_dim = 0;
    std::array<int64_t, 3> axis_split = {0, 0, 0};  // dims for t / h / w, each even
    double base = 10000.0;
    double temporal_scale = 1.0;
    std::vector<TokenIndex> indices;  // one per token

    void validate() const;
    int64_t tokens() const { return static_cast<int64_t>(indices.size()); }

    // cos/sin per (token, pair); pairs are consecutive within each axis block
    void angles(int64_t token, std::vector<double>& cos_out, std::vector<double>& sin_out) const;
};

// head_dim/4 (rounded down to even) per spatial axis, remainder to time
std::array<int64_t, 3> default_axis_split(int64_t head_dim);

// video_latent_frames / audio_latent_tokens, e.g. 21/218 ~ 0.09633
double audio_scale_factor(int64_t video_latent_frames, int64_t audio_latent_tokens);

// Temporal indices for condition frames: the i-th of N_cond total gets
// t = -N_cond + i, so the last condition frame sits at -1.
std::vector<int64_t> condition_offset_indices(const std::vector<int64_t>& ref_frame_counts);

// Builders. Video plans lay tokens out frame-major over (t, h, w); condition
// frames (negative t, spatial grid preserved) come first when present.
RopePlan make_video_plan(int64_t head_dim, int64_t frames, int64_t height, int64_t width,
                         const std::vector<int64_t>& ref_frame_counts = {}, double base = 10000.0);
RopePlan make_audio_plan(int64_t head_dim, int64_t tokens, double temporal_scale, int64_t ref_token_count = 0,
                         double base = 10000.0);
RopePlan make_identity_plan(int64_t head_dim, int64_t tokens);

// Append b's tokens after a's. Both must agree on head_dim/base/split; a
// token from b keeps its own angles only if the scales agree or its indices
// are zero (identity), which covers the joint [modality; text] layouts.
RopePlan concat_plans(const RopePlan& a, const RopePlan& b);

// Rotate each axis block of q or k ([tokens, heads, head_dim]) by its token's
// angles. Recorded on the tape; the backward pass rotates by the negated
// angles.
Tensor apply_rope(Tape& tape, const Tensor& q_or_k, const RopePlan& plan);

}  // namespace mmdit
