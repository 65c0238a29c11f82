#include "mmdit/conditioning.hpp"

#include <cstring>

namespace mmdit {

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::t2v: return "t2v";
        case TaskKind::i2v: return "i2v";
        case TaskKind::extension: return "extend";
        case TaskKind::start_end: return "startend";
        case TaskKind::edit: return "edit";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string& name) {
    if (name == "t2v") return TaskKind::t2v;
    if (name == "i2v") return TaskKind::i2v;
    if (name == "extend") return TaskKind::extension;
    if (name == "startend") return TaskKind::start_end;
    if (name == "edit") return TaskKind::edit;
    throw ParamError("unknown task kind: " + name);
}

static void check_binary(const Tensor& mask, const char* what) {
    for (int64_t i = 0; i < mask.numel(); ++i) {
        double v = mask.data()[i];
        if (v != 0.0 && v != 1.0) throw DomainError(std::string(what) + " must be binary (0/1 values)");
    }
}

void TaskSpec::validate() const {
    if (frames < 1 || height < 1 || width < 1 || channels < 1)
        throw ParamError("task target dims must be positive");
    if (kind == TaskKind::extension && (extend_frames < 1 || extend_frames >= frames))
        throw ParamError("extension frame count must lie in [1, T)");
    if (kind == TaskKind::start_end && frames < 2)
        throw ParamError("start/end interpolation needs at least 2 frames");
    if (kind == TaskKind::edit) {
        if (!edit_mask.defined() || edit_mask.shape() != Shape{frames, height, width, 1})
            throw ShapeError("edit mask must be [T,H,W,1] = [" + std::to_string(frames) + "," +
                             std::to_string(height) + "," + std::to_string(width) + ",1], got " +
                             (edit_mask.defined() ? shape_str(edit_mask.shape()) : std::string("undefined")));
        check_binary(edit_mask, "edit mask");
    }
}

Tensor build_task_mask(const TaskSpec& spec) {
    spec.validate();
    const int64_t per_frame = spec.height * spec.width;
    Tensor mask = Tensor::zeros({spec.frames, spec.height, spec.width, 1});
    auto set_frame = [&](int64_t t) {
        for (int64_t i = 0; i < per_frame; ++i) mask.data()[t * per_frame + i] = 1.0;
    };
    switch (spec.kind) {
        case TaskKind::t2v: break;  // all frames generated
        case TaskKind::i2v: set_frame(0); break;
        case TaskKind::extension:
            for (int64_t t = 0; t < spec.extend_frames; ++t) set_frame(t);
            break;
        case TaskKind::start_end:
            set_frame(0);
            set_frame(spec.frames - 1);
            break;
        case TaskKind::edit: mask.vec() = spec.edit_mask.vec(); break;
    }
    return mask;
}

Tensor build_loss_mask(const TaskSpec& spec) {
    Tensor mask = build_task_mask(spec);
    for (double& v : mask.vec()) v = 1.0 - v;
    return mask;
}

static void check_black_row(const Tensor& black_latent, int64_t channels) {
    if (black_latent.numel() != channels)
        throw ShapeError("black latent row must carry " + std::to_string(channels) + " channels, got " +
                         shape_str(black_latent.shape()));
}

ChannelInput assemble_channel_input(Tape& tape, const LatentVideo& v_noisy, const LatentVideo& cond_frames,
                                    const Tensor& mask, const Tensor& black_latent) {
    v_noisy.validate();
    cond_frames.validate();
    if (v_noisy.data.shape() != cond_frames.data.shape())
        throw ShapeError("noisy and condition latents disagree: " + shape_str(v_noisy.data.shape()) + " vs " +
                         shape_str(cond_frames.data.shape()));
    Shape mask_shape{v_noisy.frames(), v_noisy.height(), v_noisy.width(), 1};
    if (mask.shape() != mask_shape)
        throw ShapeError("mask must be " + shape_str(mask_shape) + ", got " + shape_str(mask.shape()));
    check_binary(mask, "task mask");
    const int64_t c = v_noisy.channels();
    check_black_row(black_latent, c);

    // black-latent fill wherever the mask does not mark a condition
    Tensor cond = cond_frames.data.clone();
    const int64_t cells = v_noisy.tokens();
    for (int64_t i = 0; i < cells; ++i) {
        if (mask.data()[i] == 0.0) {
            double* row = cond.data() + i * c;
            for (int64_t ch = 0; ch < c; ++ch) row[ch] = black_latent.data()[ch];
        }
    }

    ChannelInput out;
    out.noisy = v_noisy.data;
    out.cond = cond;
    out.mask = mask;
    out.z_input = concat(tape, {v_noisy.data, cond, mask}, 3);
    return out;
}

ChannelSplit split_channel_input(Tape& tape, const Tensor& z_input, int64_t latent_channels) {
    if (z_input.rank() != 4 || z_input.dim(3) != 2 * latent_channels + 1)
        throw ShapeError("channel input must be [T,H,W," + std::to_string(2 * latent_channels + 1) + "], got " +
                         shape_str(z_input.shape()));
    auto parts = split(tape, z_input, 3, {latent_channels, latent_channels, 1});
    return {parts[0], parts[1], parts[2]};
}

int64_t ReferenceSet::total_frames() const {
    int64_t total = 0;
    for (const Reference& r : refs) total += r.latent.dim(0);
    return total;
}

std::vector<int64_t> ReferenceSet::frame_counts() const {
    std::vector<int64_t> counts;
    for (const Reference& r : refs) counts.push_back(r.latent.dim(0));
    return counts;
}

ReferenceSet pad_references(const ReferenceSet& refs, int64_t height, int64_t width, const Tensor& black_latent) {
    ReferenceSet out;
    for (const Reference& r : refs.refs) {
        if (r.latent.rank() != 4) throw ShapeError("reference latent must be [f,H,W,C]");
        int64_t f = r.latent.dim(0), h = r.latent.dim(1), w = r.latent.dim(2), c = r.latent.dim(3);
        check_black_row(black_latent, c);
        if (h > height || w > width)
            throw ShapeError("reference " + shape_str(r.latent.shape()) + " exceeds the video grid " +
                             std::to_string(height) + "x" + std::to_string(width));
        if (h == height && w == width) {
            out.refs.push_back(r);
            continue;
        }
        Tensor padded = Tensor::zeros({f, height, width, c});
        for (int64_t i = 0; i < f * height * width; ++i)
            for (int64_t ch = 0; ch < c; ++ch) padded.data()[i * c + ch] = black_latent.data()[ch];
        int64_t top = (height - h) / 2, left = (width - w) / 2;
        for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t hi = 0; hi < h; ++hi) {
                const double* src = r.latent.data() + ((fi * h + hi) * w) * c;
                double* dst = padded.data() + ((fi * height + top + hi) * width + left) * c;
                std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(w * c));
            }
        out.refs.push_back({padded, r.source});
    }
    return out;
}

PrependResult prepend_references(Tape& tape, const ReferenceSet& refs, const LatentVideo& z_video, int64_t head_dim) {
    z_video.validate();
    PrependResult out;
    if (refs.refs.empty()) {
        out.z_attn = z_video.data;  // identity on tokens
        out.rope = make_video_plan(head_dim, z_video.frames(), z_video.height(), z_video.width());
        out.cond_frames = 0;
        return out;
    }
    std::vector<Tensor> parts;
    for (const Reference& r : refs.refs) {
        if (r.latent.dim(1) != z_video.height() || r.latent.dim(2) != z_video.width())
            throw ShapeError("reference spatial dims " + shape_str(r.latent.shape()) + " do not match the video grid " +
                             shape_str(z_video.data.shape()) + " after padding");
        if (r.latent.dim(3) != z_video.channels())
            throw ShapeError("reference channels " + shape_str(r.latent.shape()) + " do not match the video latent " +
                             shape_str(z_video.data.shape()));
        parts.push_back(r.latent);
    }
    parts.push_back(z_video.data);
    out.z_attn = concat(tape, parts, 0);
    out.rope = make_video_plan(head_dim, z_video.frames(), z_video.height(), z_video.width(), refs.frame_counts());
    out.cond_frames = refs.total_frames();
    return out;
}

AudioPrependResult prepend_audio_references(Tape& tape, const std::vector<Tensor>& refs, const LatentAudio& z_audio,
                                            int64_t head_dim, double temporal_scale) {
    z_audio.validate();
    AudioPrependResult out;
    int64_t total = 0;
    for (const Tensor& r : refs) {
        if (r.rank() != 2 || r.dim(1) != z_audio.channels())
            throw ShapeError("audio reference must be [L," + std::to_string(z_audio.channels()) + "], got " +
                             shape_str(r.shape()));
        total += r.dim(0);
    }
    if (refs.empty()) {
        out.tokens = z_audio.data;
        out.rope = make_audio_plan(head_dim, z_audio.tokens(), temporal_scale);
        out.cond_tokens = 0;
        return out;
    }
    std::vector<Tensor> parts(refs.begin(), refs.end());
    parts.push_back(z_audio.data);
    out.tokens = concat(tape, parts, 0);
    out.rope = make_audio_plan(head_dim, z_audio.tokens(), temporal_scale, total);
    out.cond_tokens = total;
    return out;
}

}  // namespace mmdit
