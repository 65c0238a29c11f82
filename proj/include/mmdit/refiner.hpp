#pragma once

#include <vector>

#include "mmdit/blocks.hpp"
#include "mmdit/latent.hpp"

namespace mmdit {

// Trilinear (t,h,w) interpolation with corner alignment; channels pass
// through independently. Target dims must not shrink any axis.
LatentVideo upsample_latent(const LatentVideo& low, int64_t frames, int64_t height, int64_t width);

struct Keyframe {
    int64_t position = 0;
    Tensor frame;  // [H, W, C]
};

// Overwrite the interpolated frames at keyframe positions, exactly.
LatentVideo splice_keyframes(const LatentVideo& interp, const std::vector<Keyframe>& keyframes);

// out = mask * source_hi + (1 - mask) * assembled, selected exactly per cell.
// mask: binary, [T,H,W,1] or [1,H,W,1] (broadcast over frames).
LatentVideo splice_inpaint(const LatentVideo& assembled, const LatentVideo& source_hi, const Tensor& spatial_mask);

// Channel order (noisy | assembled | mask-if-present).
Tensor refiner_channel_input(Tape& tape, const LatentVideo& assembled, const LatentVideo& noisy_hi,
                             const Tensor* spatial_mask = nullptr);

// every `stride`-th frame plus the last one
std::vector<int64_t> default_keyframe_positions(int64_t frames, int64_t stride = 4);

// Everything the refiner conditions on, assembled per the splice rules.
struct RefinerInput {
    LatentVideo low_res;
    std::vector<Keyframe> keyframes;
    LatentVideo source_hi;  // optional (inpainting); undefined tensor when absent
    Tensor spatial_mask;    // optional
    LatentVideo assembled;  // upsample -> keyframe splice -> inpaint splice
    LatentVideo noisy_hi;
    Tensor z_input;         // channel concatenation
};

RefinerInput assemble_refiner_input(Tape& tape, const LatentVideo& low_res, const std::vector<Keyframe>& keyframes,
                                    const LatentVideo& noisy_hi, const LatentVideo* source_hi = nullptr,
                                    const Tensor* spatial_mask = nullptr);

// The refiner transformer: the base backbone's weights behind block-sparse
// video self-attention. The conditioning channel width (noisy | assembled |
// mask) matches the base model's (V | I | M), so weights transfer one-to-one.
struct RefinerModel {
    TwinBackbone backbone;
    std::array<int64_t, 3> cube = {4, 4, 4};
    int64_t top_k = 8;

    static RefinerModel from_base(const TwinBackbone& base, std::array<int64_t, 3> cube, int64_t top_k);

    struct Velocities {
        Tensor video;  // [T,H,W,C]
        Tensor audio;  // [L,C_a]
    };
    // sparse=false runs the same weights with dense attention (the oracle)
    Velocities forward(Tape& tape, const Tensor& z_input, const Tensor& z_audio, const Tensor& text_tokens, double t,
                       bool sparse = true) const;
};

}  // namespace mmdit
