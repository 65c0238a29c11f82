#pragma once

#include <functional>
#include <vector>

#include "mmdit/blocks.hpp"
#include "mmdit/conditioning.hpp"
#include "mmdit/latent.hpp"

namespace mmdit {

// One draw of the linear-interpolation noising path: z_t = t*z0 + (1-t)*eps,
// with the velocity target z0 - eps for both branches.
struct FlowSample {
    double t = 0.0;
    Tensor eps_v, eps_a;
    Tensor z_v_t, z_a_t;
    Tensor target_v, target_a;
};

FlowSample make_flow_sample(const LatentVideo& z_v0, const LatentAudio& z_a0, double t, CounterRng& rng);

// same construction with caller-supplied noise (pinned overfit samples)
FlowSample make_flow_sample_with(const LatentVideo& z_v0, const LatentAudio& z_a0, double t, Tensor eps_v,
                                 Tensor eps_a);

// Everything the model conditions on besides the noisy latents.
struct ConditionBundle {
    Tensor text_tokens;       // [nt, model_dim]
    TaskSpec task;
    LatentVideo cond_frames;  // I content; non-conditional cells become black on assembly
    Tensor task_mask;         // [T,H,W,1]
    ReferenceSet video_refs;  // spatially padded, latent channel width
    std::vector<Tensor> audio_refs;
    double audio_temporal_scale = 1.0;
    double t = 0.0;  // set by the training step / sampler
};

// Weighted per-element mean of squared error, video term + audio term.
// weights_v: [T,H,W,1] from build_loss_mask; weights_a: [L,1].
Tensor joint_loss(Tape& tape, const Tensor& pred_v, const Tensor& pred_a, const FlowSample& sample,
                  const Tensor& weights_v, const Tensor& weights_a);

// ---- model wrapper ---------------------------------------------------------

// Twin backbone plus the input assembly: channel concatenation, in-context
// reference prepending, token projection, and velocity un-flattening.
struct GenerationModel {
    TwinBackbone backbone;
    Tensor black_latent;  // [C], the stub encoding of an all-zeros frame

    GenerationModel(const ModelConfig& cfg, CounterRng init_rng, InitMode mode, Tensor black_row);

    struct Velocities {
        Tensor video;  // [T,H,W,C]
        Tensor audio;  // [L,C_a]
    };
    Velocities predict_velocity(Tape& tape, const Tensor& z_v_t, const Tensor& z_a_t, const ConditionBundle& cond,
                                double t, const VsaSpec* video_vsa = nullptr) const;
};

// ---- optimizer ----------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    int64_t step = 0;
    std::vector<std::vector<double>> m, v;  // aligned with ParamStore order

    void init(const ParamStore& params);
    bool initialized() const { return !m.empty(); }
};

void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg);

struct TrainItem {
    FlowSample sample;
    ConditionBundle cond;
};

// One optimization step over the batch; returns (total, video, audio) loss.
struct TrainLosses {
    double total = 0.0, video = 0.0, audio = 0.0;
};
TrainLosses train_step(GenerationModel& model, const std::vector<TrainItem>& batch, AdamState& state,
                       const AdamConfig& cfg);

// ---- sampler -------------------------------------------------------------------

// z <- z + dt * field(z, t) on a uniform grid from t=0 (noise) to t=1, with
// conditioned cells overwritten from the clamp values after every update.
using VelocityField =
    std::function<void(const Tensor& z_v, const Tensor& z_a, double t, Tensor& out_v, Tensor& out_a)>;

struct EulerClamp {
    const Tensor* mask = nullptr;    // [T,H,W,1]
    const Tensor* values = nullptr;  // [T,H,W,C]
};

void euler_integrate(Tensor& z_v, Tensor& z_a, const VelocityField& field, int64_t steps, const EulerClamp& clamp);

struct SampleResult {
    LatentVideo video;
    LatentAudio audio;
};

// guidance_scale != 1 blends a second pass on uncond (classifier-free style);
// it defaults to 1 and uncond may then be omitted.
SampleResult euler_sample(const GenerationModel& model, const ConditionBundle& cond, int64_t audio_tokens,
                          int64_t steps, CounterRng& rng, double guidance_scale = 1.0,
                          const ConditionBundle* uncond = nullptr);

}  // namespace mmdit
