#include "mmdit/rope.hpp"

#include <cmath>
#include <string>

namespace mmdit {

void RopePlan::validate() const {
    if (head_dim <= 0 || head_dim % 2 != 0)
        throw ParamError("rope head_dim must be positive and even, got " + std::to_string(head_dim));
    int64_t sum = 0;
    for (int64_t a : axis_split) {
        if (a < 0 || a % 2 != 0) throw ParamError("rope axis_split entries must be even and nonnegative");
        sum += a;
    }
    if (sum != head_dim) throw ParamError("rope axis_split must sum to head_dim");
    if (!(temporal_scale > 0.0)) throw ParamError("rope temporal_scale must be positive");
}

void RopePlan::angles(int64_t token, std::vector<double>& cos_out, std::vector<double>& sin_out) const {
    int64_t pairs = head_dim / 2;
    cos_out.resize(static_cast<size_t>(pairs));
    sin_out.resize(static_cast<size_t>(pairs));
    const TokenIndex& ix = indices[static_cast<size_t>(token)];
    const double pos[3] = {static_cast<double>(ix.t) * temporal_scale, static_cast<double>(ix.h),
                           static_cast<double>(ix.w)};
    int64_t p = 0;
    for (int axis = 0; axis < 3; ++axis) {
        int64_t ad = axis_split[static_cast<size_t>(axis)];
        for (int64_t k = 0; k < ad / 2; ++k, ++p) {
            double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(ad));
            double theta = pos[axis] * freq;
            cos_out[static_cast<size_t>(p)] = std::cos(theta);
            sin_out[static_cast<size_t>(p)] = std::sin(theta);
        }
    }
}

std::array<int64_t, 3> default_axis_split(int64_t head_dim) {
    if (head_dim <= 0 || head_dim % 2 != 0)
        throw ParamError("head_dim must be positive and even, got " + std::to_string(head_dim));
    int64_t spatial = (head_dim / 4) & ~int64_t{1};
    return {head_dim - 2 * spatial, spatial, spatial};
}

double audio_scale_factor(int64_t video_latent_frames, int64_t audio_latent_tokens) {
    if (video_latent_frames < 1 || audio_latent_tokens < 1)
        throw ParamError("audio_scale_factor counts must be >= 1, got " + std::to_string(video_latent_frames) + "/" +
                         std::to_string(audio_latent_tokens));
    return static_cast<double>(video_latent_frames) / static_cast<double>(audio_latent_tokens);
}

std::vector<int64_t> condition_offset_indices(const std::vector<int64_t>& ref_frame_counts) {
    int64_t total = 0;
    for (int64_t c : ref_frame_counts) {
        if (c < 1) throw ParamError("reference frame counts must be >= 1");
        total += c;
    }
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) out.push_back(-total + i);
    return out;
}

RopePlan make_video_plan(int64_t head_dim, int64_t frames, int64_t height, int64_t width,
                         const std::vector<int64_t>& ref_frame_counts, double base) {
    RopePlan plan;
    plan.head_dim = head_dim;
    plan.axis_split = default_axis_split(head_dim);
    plan.base = base;
    plan.temporal_scale = 1.0;
    std::vector<int64_t> cond_t = condition_offset_indices(ref_frame_counts);
    plan.indices.reserve(static_cast<size_t>((static_cast<int64_t>(cond_t.size()) + frames) * height * width));
    // condition frames share the generated frames' spatial grid, indexed from (0,0)
    for (int64_t ct : cond_t)
        for (int64_t h = 0; h < height; ++h)
            for (int64_t w = 0; w < width; ++w) plan.indices.push_back({ct, h, w});
    for (int64_t t = 0; t < frames; ++t)
        for (int64_t h = 0; h < height; ++h)
            for (int64_t w = 0; w < width; ++w) plan.indices.push_back({t, h, w});
    plan.validate();
    return plan;
}

RopePlan make_audio_plan(int64_t head_dim, int64_t tokens, double temporal_scale, int64_t ref_token_count,
                         double base) {
    RopePlan plan;
    plan.head_dim = head_dim;
    plan.axis_split = default_axis_split(head_dim);
    plan.base = base;
    plan.temporal_scale = temporal_scale;
    plan.indices.reserve(static_cast<size_t>(tokens + ref_token_count));
    for (int64_t j = 0; j < ref_token_count; ++j) plan.indices.push_back({-ref_token_count + j, 0, 0});
    for (int64_t j = 0; j < tokens; ++j) plan.indices.push_back({j, 0, 0});
    plan.validate();
    return plan;
}

RopePlan make_identity_plan(int64_t head_dim, int64_t tokens) {
    RopePlan plan;
    plan.head_dim = head_dim;
    plan.axis_split = default_axis_split(head_dim);
    plan.indices.assign(static_cast<size_t>(tokens), TokenIndex{0, 0, 0});
    plan.validate();
    return plan;
}

static bool all_temporal_zero(const RopePlan& p) {
    for (const TokenIndex& ix : p.indices)
        if (ix.t != 0) return false;
    return true;
}

RopePlan concat_plans(const RopePlan& a, const RopePlan& b) {
    if (a.head_dim != b.head_dim || a.axis_split != b.axis_split || a.base != b.base)
        throw ParamError("concat_plans requires matching head_dim/axis_split/base");
    RopePlan out = a;
    if (a.temporal_scale != b.temporal_scale) {
        // differing scales only combine when one side never uses the temporal axis
        if (all_temporal_zero(b)) {
            // keep a's scale
        } else if (all_temporal_zero(a)) {
            out.temporal_scale = b.temporal_scale;
        } else {
            throw ParamError("concat_plans: temporal scales differ on plans with live temporal indices");
        }
    }
    out.indices.insert(out.indices.end(), b.indices.begin(), b.indices.end());
    return out;
}

Tensor apply_rope(Tape& tape, const Tensor& q_or_k, const RopePlan& plan) {
    plan.validate();
    if (q_or_k.rank() != 3)
        throw ShapeError("apply_rope expects [tokens, heads, head_dim], got " + shape_str(q_or_k.shape()));
    int64_t tokens = q_or_k.dim(0), heads = q_or_k.dim(1), hd = q_or_k.dim(2);
    if (hd != plan.head_dim)
        throw ShapeError("apply_rope head_dim " + std::to_string(hd) + " does not match plan " +
                         std::to_string(plan.head_dim));
    if (tokens != plan.tokens())
        throw ShapeError("apply_rope token count " + std::to_string(tokens) + " does not match plan " +
                         std::to_string(plan.tokens()));

    int64_t pairs = hd / 2;
    // one cos/sin row per token, shared across heads
    std::vector<double> cs(static_cast<size_t>(tokens * pairs)), sn(static_cast<size_t>(tokens * pairs));
    {
        std::vector<double> c, s;
        for (int64_t tk = 0; tk < tokens; ++tk) {
            plan.angles(tk, c, s);
            std::copy(c.begin(), c.end(), cs.begin() + tk * pairs);
            std::copy(s.begin(), s.end(), sn.begin() + tk * pairs);
        }
    }

    auto rotate = [tokens, heads, pairs](const double* src, double* dst, const std::vector<double>& c,
                                         const std::vector<double>& s, bool inverse) {
        for (int64_t tk = 0; tk < tokens; ++tk) {
            const double* crow = c.data() + tk * pairs;
            const double* srow = s.data() + tk * pairs;
            for (int64_t h = 0; h < heads; ++h) {
                const double* in = src + (tk * heads + h) * pairs * 2;
                double* out = dst + (tk * heads + h) * pairs * 2;
                for (int64_t p = 0; p < pairs; ++p) {
                    double x0 = in[2 * p], x1 = in[2 * p + 1];
                    double cv = crow[p], sv = inverse ? -srow[p] : srow[p];
                    out[2 * p] = x0 * cv - x1 * sv;
                    out[2 * p + 1] = x0 * sv + x1 * cv;
                }
            }
        }
    };

    Tensor out = Tensor::zeros(q_or_k.shape());
    rotate(q_or_k.data(), out.data(), cs, sn, /*inverse=*/false);

    if (tape.should_record({&q_or_k})) {
        out.set_requires_grad(true);
        Tensor xin = q_or_k;
        tape.record("apply_rope", {q_or_k}, out, [=]() mutable {
            // gradient of a rotation is the inverse rotation of the out-grad
            std::vector<double> tmp(static_cast<size_t>(xin.numel()));
            rotate(out.grad(), tmp.data(), cs, sn, /*inverse=*/true);
            double* g = xin.grad();
            for (int64_t i = 0; i < xin.numel(); ++i) g[i] += tmp[static_cast<size_t>(i)];
        });
    }
    return out;
}

}  // namespace mmdit
