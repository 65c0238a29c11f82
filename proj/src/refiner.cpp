#include "mmdit/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mmdit {

namespace {

struct AxisTap {
    int64_t lo = 0, hi = 0;
    double frac = 0.0;  // weight of hi
};

// corner-aligned source position for output index j
AxisTap axis_tap(int64_t j, int64_t in, int64_t out) {
    AxisTap tap;
    if (in == 1 || out == 1) return tap;  // single source/target: copy index 0
    double src = static_cast<double>(j * (in - 1)) / static_cast<double>(out - 1);
    int64_t lo = std::min<int64_t>(static_cast<int64_t>(src), in - 2);
    tap.lo = lo;
    tap.hi = lo + 1;
    tap.frac = src - static_cast<double>(lo);
    return tap;
}

}  // namespace

LatentVideo upsample_latent(const LatentVideo& low, int64_t frames, int64_t height, int64_t width) {
    low.validate();
    if (frames < low.frames() || height < low.height() || width < low.width())
        throw ParamError("upsample target " + std::to_string(frames) + "x" + std::to_string(height) + "x" +
                         std::to_string(width) + " shrinks the source " + shape_str(low.data.shape()));
    if (frames == low.frames() && height == low.height() && width == low.width())
        return LatentVideo(low.data.clone());

    const int64_t c = low.channels();
    const int64_t ih = low.height(), iw = low.width();
    Tensor out = Tensor::zeros({frames, height, width, c});
    std::vector<AxisTap> t_taps(static_cast<size_t>(frames)), h_taps(static_cast<size_t>(height)),
        w_taps(static_cast<size_t>(width));
    for (int64_t j = 0; j < frames; ++j) t_taps[static_cast<size_t>(j)] = axis_tap(j, low.frames(), frames);
    for (int64_t j = 0; j < height; ++j) h_taps[static_cast<size_t>(j)] = axis_tap(j, ih, height);
    for (int64_t j = 0; j < width; ++j) w_taps[static_cast<size_t>(j)] = axis_tap(j, iw, width);

    auto src_at = [&](int64_t t, int64_t h, int64_t w, int64_t ch) {
        return low.data.data()[((t * ih + h) * iw + w) * c + ch];
    };
    for (int64_t t = 0; t < frames; ++t) {
        const AxisTap& tt = t_taps[static_cast<size_t>(t)];
        for (int64_t h = 0; h < height; ++h) {
            const AxisTap& th = h_taps[static_cast<size_t>(h)];
            for (int64_t w = 0; w < width; ++w) {
                const AxisTap& tw = w_taps[static_cast<size_t>(w)];
                double* dst = out.data() + ((t * height + h) * width + w) * c;
                for (int64_t ch = 0; ch < c; ++ch) {
                    double v00 = (1.0 - th.frac) * src_at(tt.lo, th.lo, tw.lo, ch) + th.frac * src_at(tt.lo, th.hi, tw.lo, ch);
                    double v01 = (1.0 - th.frac) * src_at(tt.lo, th.lo, tw.hi, ch) + th.frac * src_at(tt.lo, th.hi, tw.hi, ch);
                    double v10 = (1.0 - th.frac) * src_at(tt.hi, th.lo, tw.lo, ch) + th.frac * src_at(tt.hi, th.hi, tw.lo, ch);
                    double v11 = (1.0 - th.frac) * src_at(tt.hi, th.lo, tw.hi, ch) + th.frac * src_at(tt.hi, th.hi, tw.hi, ch);
                    double v0 = (1.0 - tw.frac) * v00 + tw.frac * v01;
                    double v1 = (1.0 - tw.frac) * v10 + tw.frac * v11;
                    dst[ch] = (1.0 - tt.frac) * v0 + tt.frac * v1;
                }
            }
        }
    }
    return LatentVideo(out);
}

LatentVideo splice_keyframes(const LatentVideo& interp, const std::vector<Keyframe>& keyframes) {
    interp.validate();
    const int64_t frame_elems = interp.height() * interp.width() * interp.channels();
    int64_t prev = -1;
    Tensor out = interp.data.clone();
    for (const Keyframe& kf : keyframes) {
        if (kf.position <= prev)
            throw ParamError("keyframe positions must be strictly increasing, got " + std::to_string(kf.position) +
                             " after " + std::to_string(prev));
        prev = kf.position;
        if (kf.position < 0 || kf.position >= interp.frames())
            throw ParamError("keyframe position " + std::to_string(kf.position) + " outside [0, " +
                             std::to_string(interp.frames()) + ")");
        if (kf.frame.shape() != Shape{interp.height(), interp.width(), interp.channels()})
            throw ShapeError("keyframe " + shape_str(kf.frame.shape()) + " does not match the frame grid " +
                             shape_str(interp.data.shape()));
        std::memcpy(out.data() + kf.position * frame_elems, kf.frame.data(),
                    sizeof(double) * static_cast<size_t>(frame_elems));
    }
    return LatentVideo(out);
}

static void check_spatial_mask(const Tensor& mask, const LatentVideo& video) {
    bool framewise = mask.shape() == Shape{video.frames(), video.height(), video.width(), 1};
    bool shared = mask.shape() == Shape{1, video.height(), video.width(), 1};
    if (!framewise && !shared)
        throw ShapeError("spatial mask " + shape_str(mask.shape()) + " does not broadcast over " +
                         shape_str(video.data.shape()));
    for (int64_t i = 0; i < mask.numel(); ++i)
        if (mask.data()[i] != 0.0 && mask.data()[i] != 1.0) throw DomainError("spatial mask must be binary");
}

LatentVideo splice_inpaint(const LatentVideo& assembled, const LatentVideo& source_hi, const Tensor& spatial_mask) {
    assembled.validate();
    source_hi.validate();
    if (assembled.data.shape() != source_hi.data.shape())
        throw ShapeError("assembled " + shape_str(assembled.data.shape()) + " and source " +
                         shape_str(source_hi.data.shape()) + " disagree");
    check_spatial_mask(spatial_mask, assembled);
    const int64_t c = assembled.channels();
    const int64_t per_frame = assembled.height() * assembled.width();
    const bool shared = spatial_mask.dim(0) == 1 && assembled.frames() != 1;

    Tensor out = assembled.data.clone();
    for (int64_t t = 0; t < assembled.frames(); ++t)
        for (int64_t cell = 0; cell < per_frame; ++cell) {
            int64_t mi = (shared ? 0 : t) * per_frame + cell;
            if (spatial_mask.data()[mi] == 1.0) {
                int64_t off = (t * per_frame + cell) * c;
                std::memcpy(out.data() + off, source_hi.data.data() + off, sizeof(double) * static_cast<size_t>(c));
            }
        }
    return LatentVideo(out);
}

Tensor refiner_channel_input(Tape& tape, const LatentVideo& assembled, const LatentVideo& noisy_hi,
                             const Tensor* spatial_mask) {
    assembled.validate();
    noisy_hi.validate();
    if (assembled.data.shape() != noisy_hi.data.shape())
        throw ShapeError("assembled " + shape_str(assembled.data.shape()) + " and noisy " +
                         shape_str(noisy_hi.data.shape()) + " disagree");
    std::vector<Tensor> parts = {noisy_hi.data, assembled.data};
    if (spatial_mask) {
        check_spatial_mask(*spatial_mask, assembled);
        Tensor mask = *spatial_mask;
        if (mask.dim(0) == 1 && assembled.frames() != 1) {
            Tensor tiled = Tensor::zeros({assembled.frames(), assembled.height(), assembled.width(), 1});
            for (int64_t t = 0; t < assembled.frames(); ++t)
                std::memcpy(tiled.data() + t * mask.numel(), mask.data(),
                            sizeof(double) * static_cast<size_t>(mask.numel()));
            mask = tiled;
        }
        parts.push_back(mask);
    }
    return concat(tape, parts, 3);
}

std::vector<int64_t> default_keyframe_positions(int64_t frames, int64_t stride) {
    if (frames < 1 || stride < 1) throw ParamError("keyframe schedule needs frames >= 1 and stride >= 1");
    std::vector<int64_t> out;
    for (int64_t t = 0; t < frames; t += stride) out.push_back(t);
    if (out.back() != frames - 1) out.push_back(frames - 1);
    return out;
}

RefinerInput assemble_refiner_input(Tape& tape, const LatentVideo& low_res, const std::vector<Keyframe>& keyframes,
                                    const LatentVideo& noisy_hi, const LatentVideo* source_hi,
                                    const Tensor* spatial_mask) {
    RefinerInput out;
    out.low_res = low_res;
    out.keyframes = keyframes;
    out.noisy_hi = noisy_hi;
    LatentVideo up = upsample_latent(low_res, noisy_hi.frames(), noisy_hi.height(), noisy_hi.width());
    LatentVideo spliced = splice_keyframes(up, keyframes);
    if (source_hi && spatial_mask) {
        out.source_hi = *source_hi;
        out.spatial_mask = *spatial_mask;
        spliced = splice_inpaint(spliced, *source_hi, *spatial_mask);
    } else if (source_hi || spatial_mask) {
        throw UsageError("inpainting needs both the hi-res source and the spatial mask");
    }
    out.assembled = spliced;
    out.z_input = refiner_channel_input(tape, spliced, noisy_hi, spatial_mask);
    return out;
}

RefinerModel RefinerModel::from_base(const TwinBackbone& base, std::array<int64_t, 3> cube, int64_t top_k) {
    RefinerModel model{base.clone_weights(), cube, top_k};
    return model;
}

RefinerModel::Velocities RefinerModel::forward(Tape& tape, const Tensor& z_input, const Tensor& z_audio,
                                               const Tensor& text_tokens, double t, bool sparse) const {
    const ModelConfig& cfg = backbone.cfg;
    if (z_input.rank() != 4 || z_input.dim(3) != cfg.video_input_channels())
        throw ShapeError("refiner input must be [T,H,W," + std::to_string(cfg.video_input_channels()) + "], got " +
                         shape_str(z_input.shape()));
    int64_t T = z_input.dim(0), H = z_input.dim(1), W = z_input.dim(2);
    Tensor flat = reshape(tape, z_input, {T * H * W, cfg.video_input_channels()});
    RopePlan vplan = make_video_plan(cfg.head_dim, T, H, W);
    RopePlan aplan = make_audio_plan(cfg.head_dim, z_audio.dim(0), 1.0);

    VsaSpec vsa;
    vsa.grid = {T, H, W};
    vsa.cube = cube;
    vsa.top_k = top_k;

    BranchInputs in;
    in.video_tokens = backbone.project_video_input(tape, flat);
    in.audio_tokens = backbone.project_audio_input(tape, z_audio);
    in.text_tokens = text_tokens;
    in.t = t;
    in.video_rope = &vplan;
    in.audio_rope = &aplan;
    in.video_vsa = sparse ? &vsa : nullptr;
    BranchOutputs out = backbone.branch_forward(tape, in);

    Velocities v;
    v.video = reshape(tape, out.video_velocity, {T, H, W, cfg.video_channels});
    v.audio = out.audio_velocity;
    return v;
}

}  // namespace mmdit
