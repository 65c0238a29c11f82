#pragma once

#include "mmdit/tensor.hpp"

namespace mmdit {

// [T, H, W, C] latent volume
struct LatentVideo {
    Tensor data;

    LatentVideo() = default;
    explicit LatentVideo(Tensor t) : data(std::move(t)) { validate(); }

    int64_t frames() const { return data.dim(0); }
    int64_t height() const { return data.dim(1); }
    int64_t width() const { return data.dim(2); }
    int64_t channels() const { return data.dim(3); }
    int64_t tokens() const { return frames() * height() * width(); }

    void validate() const {
        if (!data.defined() || data.rank() != 4)
            throw ShapeError("video latent must be [T,H,W,C], got " +
                             (data.defined() ? shape_str(data.shape()) : std::string("undefined")));
    }
};

// [L, C] latent token sequence
struct LatentAudio {
    Tensor data;

    LatentAudio() = default;
    explicit LatentAudio(Tensor t) : data(std::move(t)) { validate(); }

    int64_t tokens() const { return data.dim(0); }
    int64_t channels() const { return data.dim(1); }

    void validate() const {
        if (!data.defined() || data.rank() != 2)
            throw ShapeError("audio latent must be [L,C], got " +
                             (data.defined() ? shape_str(data.shape()) : std::string("undefined")));
    }
};

}  // namespace mmdit
