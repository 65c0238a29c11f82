#include "mmdit/flow.hpp"

#include <cmath>

namespace mmdit {

FlowSample make_flow_sample(const LatentVideo& z_v0, const LatentAudio& z_a0, double t, CounterRng& rng) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow timestep must lie in [0,1], got " + std::to_string(t));
    Tensor eps_v = Tensor::randn(z_v0.data.shape(), rng);
    Tensor eps_a = Tensor::randn(z_a0.data.shape(), rng);
    return make_flow_sample_with(z_v0, z_a0, t, std::move(eps_v), std::move(eps_a));
}

FlowSample make_flow_sample_with(const LatentVideo& z_v0, const LatentAudio& z_a0, double t, Tensor eps_v,
                                 Tensor eps_a) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow timestep must lie in [0,1], got " + std::to_string(t));
    z_v0.validate();
    z_a0.validate();
    if (eps_v.shape() != z_v0.data.shape() || eps_a.shape() != z_a0.data.shape())
        throw ShapeError("noise shapes do not match the latents");
    FlowSample s;
    s.t = t;
    s.eps_v = std::move(eps_v);
    s.eps_a = std::move(eps_a);
    auto interpolate = [t](const Tensor& z0, const Tensor& eps) {
        Tensor out = Tensor::zeros(z0.shape());
        for (int64_t i = 0; i < z0.numel(); ++i) out.data()[i] = t * z0.data()[i] + (1.0 - t) * eps.data()[i];
        return out;
    };
    auto target = [](const Tensor& z0, const Tensor& eps) {
        Tensor out = Tensor::zeros(z0.shape());
        for (int64_t i = 0; i < z0.numel(); ++i) out.data()[i] = z0.data()[i] - eps.data()[i];
        return out;
    };
    s.z_v_t = interpolate(z_v0.data, s.eps_v);
    s.z_a_t = interpolate(z_a0.data, s.eps_a);
    s.target_v = target(z_v0.data, s.eps_v);
    s.target_a = target(z_a0.data, s.eps_a);
    return s;
}

static Tensor branch_loss(Tape& tape, const Tensor& pred, const Tensor& target, const Tensor& weights,
                          const char* branch) {
    if (pred.shape() != target.shape())
        throw ShapeError(std::string(branch) + " prediction " + shape_str(pred.shape()) + " does not match target " +
                         shape_str(target.shape()));
    if (weights.dim(-1) != 1 || weights.numel() != pred.numel() / pred.dim(-1))
        throw ShapeError(std::string(branch) + " loss weights " + shape_str(weights.shape()) +
                         " do not cover the prediction cells " + shape_str(pred.shape()));
    double weight_sum = 0.0;
    for (int64_t i = 0; i < weights.numel(); ++i) weight_sum += weights.data()[i];
    if (weight_sum == 0.0)
        throw DegenerateTaskError(std::string(branch) + " loss has all-zero weights (nothing to generate)");
    int64_t channels = pred.dim(-1);
    Tensor w_full = expand_last(weights, channels);
    w_full = reshape(tape, w_full, pred.shape());
    Tensor diff = sub(tape, pred, target);
    Tensor weighted = mul(tape, mul(tape, diff, diff), w_full);
    return scale(tape, sum_all(tape, weighted), 1.0 / (weight_sum * static_cast<double>(channels)));
}

Tensor joint_loss(Tape& tape, const Tensor& pred_v, const Tensor& pred_a, const FlowSample& sample,
                  const Tensor& weights_v, const Tensor& weights_a) {
    Tensor lv = branch_loss(tape, pred_v, sample.target_v, weights_v, "video");
    Tensor la = branch_loss(tape, pred_a, sample.target_a, weights_a, "audio");
    return add(tape, lv, la);
}

// plain-number weighted mean squared error, for the metrics stream
static double branch_mse(const Tensor& pred, const Tensor& target, const Tensor& weights) {
    int64_t c = pred.dim(-1);
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < weights.numel(); ++i) {
        double w = weights.data()[i];
        den += w * static_cast<double>(c);
        if (w == 0.0) continue;
        for (int64_t ch = 0; ch < c; ++ch) {
            double e = pred.data()[i * c + ch] - target.data()[i * c + ch];
            num += w * e * e;
        }
    }
    return num / den;
}

// ---- model wrapper ----------------------------------------------------------

GenerationModel::GenerationModel(const ModelConfig& cfg, CounterRng init_rng, InitMode mode, Tensor black_row)
    : backbone(cfg, init_rng, mode), black_latent(std::move(black_row)) {
    if (black_latent.numel() != cfg.video_channels)
        throw ShapeError("black latent row must have " + std::to_string(cfg.video_channels) + " channels");
}

// reference latents enter the channel layout as (V=ref, I=ref, M=1)
static Tensor reference_channel_frames(Tape& tape, const Tensor& ref) {
    Tensor ones = Tensor::full({ref.dim(0), ref.dim(1), ref.dim(2), 1}, 1.0);
    return concat(tape, {ref, ref, ones}, 3);
}

GenerationModel::Velocities GenerationModel::predict_velocity(Tape& tape, const Tensor& z_v_t, const Tensor& z_a_t,
                                                              const ConditionBundle& cond, double t,
                                                              const VsaSpec* video_vsa) const {
    const ModelConfig& cfg = backbone.cfg;
    LatentVideo noisy(z_v_t);
    LatentAudio audio(z_a_t);
    if (noisy.channels() != cfg.video_channels)
        throw ShapeError("video latent channels " + std::to_string(noisy.channels()) + " do not match the model (" +
                         std::to_string(cfg.video_channels) + ")");
    if (audio.channels() != cfg.audio_channels)
        throw ShapeError("audio latent channels do not match the model");

    // Eq.-style channel concatenation on the generation target
    ChannelInput ci = assemble_channel_input(tape, noisy, cond.cond_frames, cond.task_mask, black_latent);

    // in-context references, widened to the same channel layout
    ReferenceSet wide;
    for (const Reference& r : cond.video_refs.refs)
        wide.refs.push_back({reference_channel_frames(tape, r.latent), r.source});
    PrependResult pre = prepend_references(tape, wide, LatentVideo(ci.z_input), cfg.head_dim);

    int64_t video_tokens = pre.z_attn.dim(0) * pre.z_attn.dim(1) * pre.z_attn.dim(2);
    Tensor video_flat = reshape(tape, pre.z_attn, {video_tokens, cfg.video_input_channels()});

    AudioPrependResult apre =
        prepend_audio_references(tape, cond.audio_refs, audio, cfg.head_dim, cond.audio_temporal_scale);

    BranchInputs in;
    in.video_tokens = backbone.project_video_input(tape, video_flat);
    in.audio_tokens = backbone.project_audio_input(tape, apre.tokens);
    in.text_tokens = cond.text_tokens;
    in.t = t;
    in.video_rope = &pre.rope;
    in.audio_rope = &apre.rope;
    in.video_vsa = video_vsa;
    BranchOutputs out = backbone.branch_forward(tape, in);

    // keep only the generated region's velocities
    Tensor vel_v = out.video_velocity;
    int64_t gen_tokens = noisy.tokens();
    if (pre.cond_frames > 0)
        vel_v = split(tape, vel_v, 0, {video_tokens - gen_tokens, gen_tokens})[1];
    Tensor vel_a = out.audio_velocity;
    if (apre.cond_tokens > 0)
        vel_a = split(tape, vel_a, 0, {apre.cond_tokens, audio.tokens()})[1];

    Velocities v;
    v.video = reshape(tape, vel_v, noisy.data.shape());
    v.audio = vel_a;
    return v;
}

// ---- optimizer -----------------------------------------------------------------

void AdamState::init(const ParamStore& params) {
    m.clear();
    v.clear();
    for (const auto& [name, tensor] : params.items()) {
        m.emplace_back(static_cast<size_t>(tensor.numel()), 0.0);
        v.emplace_back(static_cast<size_t>(tensor.numel()), 0.0);
    }
}

void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
    if (!state.initialized()) state.init(params);
    state.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    auto& items = params.items_mut();
    for (size_t p = 0; p < items.size(); ++p) {
        Tensor& t = items[p].second;
        const double* g = t.grad();
        double* m = state.m[p].data();
        double* v = state.v[p].data();
        double* w = t.data();
        for (int64_t i = 0; i < t.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

TrainLosses train_step(GenerationModel& model, const std::vector<TrainItem>& batch, AdamState& state,
                       const AdamConfig& cfg) {
    if (batch.empty()) throw UsageError("train_step needs a non-empty batch");
    Tape tape;
    Tensor total;
    double video_acc = 0.0, audio_acc = 0.0;
    for (const TrainItem& item : batch) {
        auto vel = model.predict_velocity(tape, item.sample.z_v_t, item.sample.z_a_t, item.cond, item.sample.t);
        Tensor weights_v = build_loss_mask(item.cond.task);
        Tensor weights_a = Tensor::full({item.sample.z_a_t.dim(0), 1}, 1.0);
        Tensor lv = joint_loss(tape, vel.video, vel.audio, item.sample, weights_v, weights_a);
        video_acc += branch_mse(vel.video, item.sample.target_v, weights_v);
        audio_acc += branch_mse(vel.audio, item.sample.target_a, weights_a);
        total = total.defined() ? add(tape, total, lv) : lv;
    }
    total = scale(tape, total, 1.0 / static_cast<double>(batch.size()));
    double loss_value = total.item();
    if (!std::isfinite(loss_value))
        throw TrainingError("non-finite loss at optimizer step " + std::to_string(state.step + 1));

    model.backbone.params.zero_grads();
    tape.backward(total);
    adam_step(model.backbone.params, state, cfg);

    TrainLosses out;
    out.total = loss_value;
    out.video = video_acc / static_cast<double>(batch.size());
    out.audio = audio_acc / static_cast<double>(batch.size());
    return out;
}

// ---- sampler ----------------------------------------------------------------------

void euler_integrate(Tensor& z_v, Tensor& z_a, const VelocityField& field, int64_t steps, const EulerClamp& clamp) {
    if (steps < 1) throw ParamError("euler sampling needs steps >= 1");
    auto apply_clamp = [&]() {
        if (!clamp.mask || !clamp.values) return;
        int64_t c = z_v.dim(-1);
        for (int64_t i = 0; i < clamp.mask->numel(); ++i) {
            if (clamp.mask->data()[i] == 1.0)
                for (int64_t ch = 0; ch < c; ++ch) z_v.data()[i * c + ch] = clamp.values->data()[i * c + ch];
        }
    };
    apply_clamp();
    double dt = 1.0 / static_cast<double>(steps);
    Tensor vel_v = Tensor::zeros(z_v.shape());
    Tensor vel_a = Tensor::zeros(z_a.shape());
    for (int64_t k = 0; k < steps; ++k) {
        double t = static_cast<double>(k) * dt;
        field(z_v, z_a, t, vel_v, vel_a);
        if (!vel_v.all_finite() || !vel_a.all_finite())
            throw NumericalError("sampling produced a non-finite velocity at t = " + std::to_string(t));
        for (int64_t i = 0; i < z_v.numel(); ++i) z_v.data()[i] += dt * vel_v.data()[i];
        for (int64_t i = 0; i < z_a.numel(); ++i) z_a.data()[i] += dt * vel_a.data()[i];
        apply_clamp();
    }
}

SampleResult euler_sample(const GenerationModel& model, const ConditionBundle& cond, int64_t audio_tokens,
                          int64_t steps, CounterRng& rng, double guidance_scale, const ConditionBundle* uncond) {
    if (guidance_scale != 1.0 && uncond == nullptr)
        throw ParamError("guidance_scale != 1 needs an unconditional bundle");
    const ModelConfig& cfg = model.backbone.cfg;
    const TaskSpec& task = cond.task;
    Tensor z_v = Tensor::randn({task.frames, task.height, task.width, cfg.video_channels}, rng);
    Tensor z_a = Tensor::randn({audio_tokens, cfg.audio_channels}, rng);

    VelocityField field = [&](const Tensor& zv, const Tensor& za, double t, Tensor& out_v, Tensor& out_a) {
        Tape tape;
        tape.set_recording(false);
        auto vel = model.predict_velocity(tape, zv, za, cond, t);
        if (guidance_scale != 1.0) {
            auto base = model.predict_velocity(tape, zv, za, *uncond, t);
            for (int64_t i = 0; i < vel.video.numel(); ++i)
                vel.video.data()[i] = base.video.data()[i] + guidance_scale * (vel.video.data()[i] - base.video.data()[i]);
            for (int64_t i = 0; i < vel.audio.numel(); ++i)
                vel.audio.data()[i] = base.audio.data()[i] + guidance_scale * (vel.audio.data()[i] - base.audio.data()[i]);
        }
        out_v = vel.video;
        out_a = vel.audio;
    };
    EulerClamp clamp{&cond.task_mask, &cond.cond_frames.data};
    euler_integrate(z_v, z_a, field, steps, clamp);
    return {LatentVideo(z_v), LatentAudio(z_a)};
}

}  // namespace mmdit
