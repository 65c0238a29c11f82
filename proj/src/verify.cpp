#include "mmdit/verify.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "mmdit/harness.hpp"

namespace mmdit {

namespace {

std::string ok() { return ""; }

std::string expect(bool cond, const std::string& detail) { return cond ? ok() : detail; }

ModelConfig verify_cfg() {
    ModelConfig cfg;
    cfg.m_dual = 1;
    cfg.n_single = 1;
    cfg.model_dim = 16;
    cfg.head_count = 2;
    cfg.head_dim = 8;
    cfg.mlp_ratio = 2;
    cfg.timestep_embed_dim = 8;
    cfg.video_channels = 2;
    cfg.audio_channels = 2;
    return cfg;
}

Tensor dense_attention_ref(const Tensor& q, const Tensor& k, const Tensor& v) {
    int64_t n = q.dim(0), heads = q.dim(1), hd = q.dim(2);
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor out = Tensor::zeros(q.shape());
    std::vector<double> logits(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t h = 0; h < heads; ++h) {
            const double* qr = q.data() + (i * heads + h) * hd;
            double mx = -1e300;
            for (int64_t j = 0; j < n; ++j) {
                const double* kr = k.data() + (j * heads + h) * hd;
                double dot = 0;
                for (int64_t d = 0; d < hd; ++d) dot += qr[d] * kr[d];
                logits[static_cast<size_t>(j)] = dot * scale;
                mx = std::max(mx, logits[static_cast<size_t>(j)]);
            }
            double denom = 0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                denom += l;
            }
            double* orow = out.data() + (i * heads + h) * hd;
            for (int64_t j = 0; j < n; ++j) {
                double p = logits[static_cast<size_t>(j)] / denom;
                const double* vr = v.data() + (j * heads + h) * hd;
                for (int64_t d = 0; d < hd; ++d) orow[d] += p * vr[d];
            }
        }
    return out;
}

std::string temp_path(const char* stem) {
    return (std::filesystem::temp_directory_path() / (std::string("mmdit_verify_") + stem)).string();
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

// ---- tensor-autodiff -------------------------------------------------------

std::string check_primitive_gradients() {
    CounterRng aux(999);
    Tensor aux23 = Tensor::randn({2, 3}, aux);
    Tensor aux34 = Tensor::randn({3, 4}, aux);
    Tensor gain = Tensor::randn({4}, aux);
    Tensor bias = Tensor::randn({4}, aux);
    struct Probe {
        const char* name;
        std::function<Tensor(Tape&, const Tensor&)> f;
        Shape shape;
    };
    std::vector<Probe> probes = {
        {"matmul", [&](Tape& t, const Tensor& x) { return sum_all(t, matmul(t, x, aux34)); }, {2, 3}},
        {"add", [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, add(t, x, aux23), x)); }, {2, 3}},
        {"sub", [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, sub(t, x, aux23), x)); }, {2, 3}},
        {"mul", [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, x, x)); }, {2, 3}},
        {"silu", [&](Tape& t, const Tensor& x) { return sum_all(t, silu(t, x)); }, {2, 3}},
        {"gelu", [&](Tape& t, const Tensor& x) { return sum_all(t, gelu(t, x)); }, {2, 3}},
        {"softmax", [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, softmax_lastdim(t, x), aux23)); }, {2, 3}},
        {"layer_norm", [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, layer_norm(t, x, gain, bias, 1e-5), x)); }, {2, 4}},
        {"permute", [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, permute(t, x, {1, 0}), permute(t, x, {1, 0}))); }, {2, 3}},
        {"concat", [&](Tape& t, const Tensor& x) { Tensor c = concat(t, {x, aux23}, 0); return sum_all(t, mul(t, c, c)); }, {2, 3}},
        {"split", [&](Tape& t, const Tensor& x) { auto p = split(t, x, 1, {1, 2}); return sum_all(t, mul(t, p[1], p[1])); }, {2, 3}},
        {"rope", [&](Tape& t, const Tensor& x) {
             RopePlan plan = make_video_plan(8, 2, 1, 1);
             Tensor r = apply_rope(t, reshape(t, x, {2, 1, 8}), plan);
             return sum_all(t, mul(t, r, r));
         }, {2, 8}},
    };
    for (const auto& p : probes)
        for (uint64_t seed = 0; seed < 20; ++seed) {
            CounterRng rng(4000 + seed);
            double err = grad_check(p.f, Tensor::randn(p.shape, rng), 1e-5);
            if (err >= 1e-4) return std::string(p.name) + " seed " + std::to_string(seed) + " err " + std::to_string(err);
        }
    return ok();
}

std::string check_matmul_oracle() {
    CounterRng rng(7);
    Tape tape;
    for (int rep = 0; rep < 5; ++rep) {
        Tensor a = Tensor::randn({8, 8}, rng);
        Tensor b = Tensor::randn({8, 8}, rng);
        Tensor got = matmul(tape, a, b);
        for (int64_t i = 0; i < 8; ++i)
            for (int64_t j = 0; j < 8; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < 8; ++k) acc += a.data()[i * 8 + k] * b.data()[k * 8 + j];
                if (std::abs(acc - got.data()[i * 8 + j]) >= 1e-12) return "triple-loop mismatch";
            }
    }
    return ok();
}

std::string check_tape_determinism() {
    auto run = [] {
        CounterRng rng(77);
        Tape t;
        Tensor w = Tensor::randn({4, 4}, rng, 0.5, true);
        Tensor x = Tensor::randn({3, 4}, rng);
        Tensor loss = mean_all(t, mul(t, gelu(t, matmul(t, x, w)), x));
        backward(t, loss);
        std::vector<double> bits(w.grad(), w.grad() + 16);
        bits.push_back(loss.item());
        return bits;
    };
    return expect(run() == run(), "two identically seeded runs disagree");
}

// ---- rope3d -------------------------------------------------------------------

std::string check_rope_norms() {
    CounterRng rng(3);
    Tape tape;
    Tensor x = Tensor::randn({6, 2, 16}, rng);
    Tensor y = apply_rope(tape, x, make_video_plan(16, 6, 1, 1));
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t p = 0; p < 8; ++p) {
                const double* a = x.data() + (i * 2 + h) * 16 + 2 * p;
                const double* b = y.data() + (i * 2 + h) * 16 + 2 * p;
                if (std::abs(std::hypot(a[0], a[1]) - std::hypot(b[0], b[1])) >= 1e-12) return "norm drift";
            }
    return ok();
}

std::string check_rope_relative_shift() {
    CounterRng rng(4);
    Tape tape;
    Tensor q = Tensor::randn({1, 1, 8}, rng);
    Tensor k = Tensor::randn({1, 1, 8}, rng);
    auto plan_at = [&](int64_t t) {
        RopePlan p;
        p.head_dim = 8;
        p.axis_split = default_axis_split(8);
        p.indices = {{t, 0, 0}};
        return p;
    };
    auto dot = [&](int64_t a, int64_t b) {
        Tensor qa = apply_rope(tape, q, plan_at(a));
        Tensor kb = apply_rope(tape, k, plan_at(b));
        double acc = 0;
        for (int64_t i = 0; i < 8; ++i) acc += qa.data()[i] * kb.data()[i];
        return acc;
    };
    for (int64_t a = 0; a < 5; ++a)
        for (int64_t b = 0; b < 5; ++b)
            for (int64_t s : {-2, 1, 3})
                if (std::abs(dot(a, b) - dot(a + s, b + s)) >= 1e-10) return "shift variance";
    return ok();
}

std::string check_rope_scaling_alignment() {
    double s = audio_scale_factor(21, 218);
    if (std::abs(s - 0.09633) >= 5e-5) return "21/218 factor off";
    CounterRng rng(5);
    Tape tape;
    Tensor x = Tensor::randn({1, 1, 8}, rng);
    RopePlan audio;
    audio.head_dim = 8;
    audio.axis_split = default_axis_split(8);
    audio.temporal_scale = s;
    audio.indices = {{218, 0, 0}};
    RopePlan video;
    video.head_dim = 8;
    video.axis_split = default_axis_split(8);
    video.indices = {{21, 0, 0}};
    Tensor a = apply_rope(tape, x, audio);
    Tensor b = apply_rope(tape, x, video);
    return expect(max_abs_diff(a, b) < 1e-10, "scaled audio angle != video angle");
}

std::string check_rope_offset_disambiguation() {
    for (int64_t ncond = 1; ncond <= 8; ++ncond)
        for (int64_t T : {8, 32})
            for (int64_t c = -ncond; c < 0; ++c)
                for (int64_t t = 0; t < T; ++t)
                    if (std::abs(std::remainder(static_cast<double>(c - t), 6.283185307179586)) <= 1e-6)
                        return "condition angle collides with a generated frame";
    return ok();
}

// ---- mmdit-blocks ------------------------------------------------------------

std::string check_identity_at_init() {
    ModelConfig cfg;  // default desk config
    CounterRng rng(1);
    TwinBackbone model(cfg, rng, InitMode::standard);
    CounterRng data(2);
    Tape tape;
    BranchInputs in;
    in.video_tokens = Tensor::randn({8, cfg.model_dim}, data);
    in.audio_tokens = Tensor::randn({4, cfg.model_dim}, data);
    in.text_tokens = Tensor::randn({3, cfg.model_dim}, data);
    in.t = 0.37;
    BranchOutputs out = model.branch_forward(tape, in);
    return expect(tensors_equal(out.video_hidden, in.video_tokens) && tensors_equal(out.audio_hidden, in.audio_tokens),
                  "residual path is not the identity at init");
}

std::string check_dual_single_equivalence() {
    ModelConfig cfg = verify_cfg();
    for (uint64_t seed = 0; seed < 10; ++seed) {
        CounterRng rng(300 + seed);
        TwinBackbone scratch(cfg, rng, InitMode::random_all);
        StreamParams shared = scratch.video_layers[0].modality;
        BranchLayer tied;
        tied.dual = true;
        tied.modality = shared;
        tied.text = shared;
        tied.has_text_cross = false;
        Tensor temb = Tensor::randn({1, cfg.model_dim}, rng, 0.3);
        Tensor xv = Tensor::randn({5, cfg.model_dim}, rng);
        Tensor xt = Tensor::randn({3, cfg.model_dim}, rng);
        RopePlan vplan = make_video_plan(cfg.head_dim, 5, 1, 1);
        RopePlan mixed = concat_plans(vplan, make_identity_plan(cfg.head_dim, 3));
        Tape tape;
        auto [yv, yt] =
            dual_stream_block(tape, tied, {xv, Modality::video, &vplan}, {xt, Modality::text, nullptr}, temb, cfg);
        Tensor ym = single_stream_block(tape, shared, {concat(tape, {xv, xt}, 0), Modality::mixed, &mixed}, temb, cfg).tokens;
        auto parts = split(tape, ym, 0, {5, 3});
        if (max_abs_diff(yv, parts[0]) >= 1e-10 || max_abs_diff(yt, parts[1]) >= 1e-10)
            return "tied dual differs from single at seed " + std::to_string(seed);
    }
    return ok();
}

std::string check_row_stochastic_attention() {
    CounterRng rng(6);
    Tape tape;
    Tensor scores = Tensor::randn({5, 7}, rng, 3.0);
    Tensor probs = softmax_lastdim(tape, scores);
    for (int64_t r = 0; r < 5; ++r) {
        double sum = 0;
        for (int64_t j = 0; j < 7; ++j) sum += probs.data()[r * 7 + j];
        if (std::abs(sum - 1.0) >= 1e-12) return "row sum " + std::to_string(sum);
    }
    return ok();
}

std::string check_block_gradient_flow() {
    ModelConfig cfg = verify_cfg();  // 1 dual + 1 single = 2-layer stack
    CounterRng rng(14);
    TwinBackbone model(cfg, rng, InitMode::random_all);
    CounterRng data(15);
    Tensor audio = Tensor::randn({2, cfg.model_dim}, data);
    Tensor text = Tensor::randn({2, cfg.model_dim}, data);
    auto f = [&](Tape& tape, const Tensor& probe) {
        BranchInputs in;
        in.video_tokens = probe;
        in.audio_tokens = audio;
        in.text_tokens = text;
        in.t = 0.4;
        BranchOutputs out = model.branch_forward(tape, in);
        return mean_all(tape, mul(tape, out.video_velocity, out.video_velocity));
    };
    double err = grad_check(f, Tensor::randn({4, cfg.model_dim}, data), 1e-5);
    return expect(err < 1e-4, "grad error " + std::to_string(err));
}

std::string check_cross_modal_reach() {
    ModelConfig cfg = verify_cfg();
    CounterRng rng(8);
    TwinBackbone model(cfg, rng, InitMode::random_all);
    for (auto& pair : model.av_cross)
        for (AttentionParams* p : {&pair.audio_from_video, &pair.video_from_audio}) {
            std::fill(p->wo.vec().begin(), p->wo.vec().end(), 0.0);
            std::fill(p->bo.vec().begin(), p->bo.vec().end(), 0.0);
        }
    CounterRng data(9);
    BranchInputs in;
    in.video_tokens = Tensor::randn({4, cfg.model_dim}, data);
    in.audio_tokens = Tensor::randn({3, cfg.model_dim}, data);
    in.text_tokens = Tensor::randn({2, cfg.model_dim}, data);
    in.t = 0.5;
    Tape tape;
    Tensor a = model.branch_forward(tape, in).video_velocity;
    in.audio_tokens = Tensor::randn({3, cfg.model_dim}, data);
    Tensor b = model.branch_forward(tape, in).video_velocity;
    return expect(tensors_equal(a, b), "video output depends on audio with AV projections zeroed");
}

std::string check_text_cross_residual_form() {
    // the fault-injection target: output must equal x + Attn(x, text)
    ModelConfig cfg = verify_cfg();
    CounterRng rng(16);
    TwinBackbone scratch(cfg, rng, InitMode::random_all);
    const AttentionParams& p = scratch.video_layers[0].text_cross;
    CounterRng data(17);
    Tensor xv = Tensor::randn({4, cfg.model_dim}, data);
    Tensor xt = Tensor::randn({3, cfg.model_dim}, data);
    Tape tape;
    Tensor out = text_cross_attention(tape, p, xv, xt, cfg);
    Tensor attn = attention(tape, p, xv, xt, cfg);
    Tensor expect_out = add(tape, xv, attn);
    return expect(max_abs_diff(out, expect_out) < 1e-12, "residual is not x + Attn(x, text)");
}

// ---- task-conditioning -----------------------------------------------------------

std::string check_task_matrix() {
    for (int64_t T : {2, 3, 4, 8}) {
        TaskSpec spec;
        spec.height = 2;
        spec.width = 2;
        spec.channels = 2;
        spec.frames = T;
        auto flags = [&](const Tensor& mask) {
            std::vector<int> out;
            int64_t per = 4;
            for (int64_t t = 0; t < T; ++t) out.push_back(static_cast<int>(mask.data()[t * per]));
            return out;
        };
        spec.kind = TaskKind::t2v;
        for (int f : flags(build_task_mask(spec)))
            if (f != 0) return "t2v flag != 0";
        spec.kind = TaskKind::i2v;
        {
            auto fl = flags(build_task_mask(spec));
            for (int64_t t = 0; t < T; ++t)
                if (fl[static_cast<size_t>(t)] != (t == 0 ? 1 : 0)) return "i2v flags wrong";
        }
        spec.kind = TaskKind::extension;
        for (int64_t k = 1; k < T; ++k) {
            spec.extend_frames = k;
            auto fl = flags(build_task_mask(spec));
            for (int64_t t = 0; t < T; ++t)
                if (fl[static_cast<size_t>(t)] != (t < k ? 1 : 0)) return "extension flags wrong";
        }
        spec.kind = TaskKind::start_end;
        {
            auto fl = flags(build_task_mask(spec));
            for (int64_t t = 0; t < T; ++t)
                if (fl[static_cast<size_t>(t)] != ((t == 0 || t == T - 1) ? 1 : 0)) return "start/end flags wrong";
        }
        spec.kind = TaskKind::edit;
        Tensor volume = Tensor::zeros({T, 2, 2, 1});
        for (int64_t i = 0; i < volume.numel(); i += 3) volume.data()[i] = 1.0;
        spec.edit_mask = volume;
        if (!tensors_equal(build_task_mask(spec), volume)) return "edit mask not verbatim";
    }
    return ok();
}

std::string check_mask_complement() {
    TaskSpec spec;
    spec.frames = 4;
    spec.height = 2;
    spec.width = 2;
    spec.channels = 2;
    for (TaskKind kind : {TaskKind::t2v, TaskKind::i2v, TaskKind::extension, TaskKind::start_end, TaskKind::edit}) {
        spec.kind = kind;
        spec.extend_frames = 2;
        if (kind == TaskKind::edit) {
            Tensor volume = Tensor::zeros({4, 2, 2, 1});
            volume.data()[5] = 1.0;
            spec.edit_mask = volume;
        }
        Tensor m = build_task_mask(spec), w = build_loss_mask(spec);
        for (int64_t i = 0; i < m.numel(); ++i)
            if (m.data()[i] + w.data()[i] != 1.0) return "mask + weight != 1";
    }
    return ok();
}

std::string check_reference_noop() {
    Tape tape;
    CounterRng rng(18);
    LatentVideo video(Tensor::randn({2, 2, 2, 2}, rng));
    PrependResult r = prepend_references(tape, {}, video, 16);
    return expect(r.z_attn.same_storage(video.data) && r.cond_frames == 0 && r.rope.tokens() == 8,
                  "empty reference set is not a no-op");
}

// ---- flow-matching -------------------------------------------------------------

std::string check_interpolation_identity() {
    CounterRng rng(19);
    LatentVideo z_v(Tensor::randn({2, 2, 2, 2}, rng));
    LatentAudio z_a(Tensor::randn({4, 2}, rng));
    for (double t : {0.0, 0.3, 0.75, 1.0}) {
        FlowSample s = make_flow_sample(z_v, z_a, t, rng);
        for (int64_t i = 0; i < s.z_v_t.numel(); ++i)
            if (s.z_v_t.data()[i] - (t * z_v.data.data()[i] + (1.0 - t) * s.eps_v.data()[i]) != 0.0)
                return "interpolation identity broken";
    }
    return ok();
}

std::string check_loss_symmetry() {
    CounterRng rng(20);
    LatentVideo z_v(Tensor::randn({2, 2, 2, 2}, rng));
    LatentAudio z_a(Tensor::randn({4, 2}, rng));
    FlowSample s = make_flow_sample(z_v, z_a, 0.5, rng);
    Tensor w_v = Tensor::full({2, 2, 2, 1}, 1.0);
    Tensor w_a = Tensor::full({4, 1}, 1.0);
    Tensor pv = Tensor::randn({2, 2, 2, 2}, rng);
    Tensor pa = Tensor::randn({4, 2}, rng);
    Tape tape;
    double a = joint_loss(tape, pv, pa, s, w_v, w_a).item();
    FlowSample swapped = s;
    swapped.target_v = pv;
    swapped.target_a = pa;
    double b = joint_loss(tape, s.target_v, s.target_a, swapped, w_v, w_a).item();
    return expect(std::abs(a - b) < 1e-12, "loss not symmetric under swap");
}

std::string check_model_gradients() {
    ModelConfig cfg = verify_cfg();
    CounterRng rng(21);
    GenerationModel model(cfg, rng, InitMode::random_all, Tensor::full({2}, 0.125));
    CounterRng data(22);
    ConditionBundle cond;
    cond.task.kind = TaskKind::i2v;
    cond.task.frames = 2;
    cond.task.height = 2;
    cond.task.width = 2;
    cond.task.channels = 2;
    cond.cond_frames = LatentVideo(Tensor::randn({2, 2, 2, 2}, data));
    cond.task_mask = build_task_mask(cond.task);
    cond.text_tokens = Tensor::randn({3, cfg.model_dim}, data);
    cond.audio_temporal_scale = 0.5;
    LatentVideo z_v(Tensor::randn({2, 2, 2, 2}, data));
    LatentAudio z_a(Tensor::randn({4, 2}, data));
    FlowSample s = make_flow_sample(z_v, z_a, 0.45, data);
    Tensor w_v = build_loss_mask(cond.task);
    Tensor w_a = Tensor::full({4, 1}, 1.0);
    auto f = [&](Tape& tape, const Tensor& probe) {
        auto vel = model.predict_velocity(tape, probe, s.z_a_t, cond, s.t);
        return joint_loss(tape, vel.video, vel.audio, s, w_v, w_a);
    };
    double err = grad_check(f, s.z_v_t, 1e-5);
    return expect(err < 1e-4, "grad error " + std::to_string(err));
}

std::string check_sampler_consistency() {
    CounterRng rng(23);
    Tensor z0_v = Tensor::randn({2, 2, 2, 2}, rng);
    Tensor z0_a = Tensor::randn({4, 2}, rng);
    Tensor eps_v = Tensor::randn({2, 2, 2, 2}, rng);
    Tensor eps_a = Tensor::randn({4, 2}, rng);
    Tensor fv = Tensor::zeros(z0_v.shape()), fa = Tensor::zeros(z0_a.shape());
    for (int64_t i = 0; i < fv.numel(); ++i) fv.data()[i] = z0_v.data()[i] - eps_v.data()[i];
    for (int64_t i = 0; i < fa.numel(); ++i) fa.data()[i] = z0_a.data()[i] - eps_a.data()[i];
    VelocityField field = [&](const Tensor&, const Tensor&, double, Tensor& ov, Tensor& oa) {
        ov = fv;
        oa = fa;
    };
    for (int64_t steps : {1, 2, 4, 8, 5}) {
        Tensor zv = eps_v.clone(), za = eps_a.clone();
        euler_integrate(zv, za, field, steps, {});
        if (max_abs_diff(zv, z0_v) >= 1e-12 || max_abs_diff(za, z0_a) >= 1e-12)
            return "constant field not recovered at steps=" + std::to_string(steps);
    }
    return ok();
}

// ---- sparse-attention-vsa ----------------------------------------------------------

std::string check_vsa_full_k() {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        CounterRng rng(500 + seed);
        Tensor q = Tensor::randn({27, 2, 8}, rng);
        Tensor k = Tensor::randn({27, 2, 8}, rng);
        Tensor v = Tensor::randn({27, 2, 8}, rng);
        SparsePlan plan = partition_cubes({3, 3, 3}, {2, 2, 2});
        coarse_select(q, k, plan, plan.cube_count);
        Tape tape;
        Tensor sparse = sparse_attention(tape, q, k, v, plan);
        if (max_abs_diff(sparse, dense_attention_ref(q, k, v)) >= 1e-12)
            return "full-K differs from dense at seed " + std::to_string(seed);
    }
    return ok();
}

std::string check_vsa_coverage_and_determinism() {
    CounterRng rng(31);
    Tensor q = Tensor::randn({27, 1, 4}, rng);
    Tensor k = Tensor::randn({27, 1, 4}, rng);
    SparsePlan plan = partition_cubes({3, 3, 3}, {2, 2, 2});
    coarse_select(q, k, plan, 3);
    auto first = plan.selection;
    for (int64_t a = 0; a < plan.cube_count; ++a)
        if (std::find(first[static_cast<size_t>(a)].begin(), first[static_cast<size_t>(a)].end(), a) ==
            first[static_cast<size_t>(a)].end())
            return "self cube missing from selection";
    for (int rep = 0; rep < 3; ++rep) {
        coarse_select(q, k, plan, 3);
        if (plan.selection != first) return "selection not deterministic";
    }
    return ok();
}

std::string check_vsa_monotone_fidelity() {
    CounterRng rng(32);
    Tensor q = Tensor::randn({64, 2, 8}, rng);
    Tensor k = Tensor::randn({64, 2, 8}, rng);
    Tensor v = Tensor::randn({64, 2, 8}, rng);
    SparsePlan plan = partition_cubes({4, 4, 4}, {2, 2, 2});
    Tensor dense = dense_attention_ref(q, k, v);
    Tape tape;
    double prev = 1e300;
    for (int64_t K = 1; K <= plan.cube_count; ++K) {
        coarse_select(q, k, plan, K);
        Tensor sparse = sparse_attention(tape, q, k, v, plan);
        double mse = 0;
        for (int64_t i = 0; i < sparse.numel(); ++i) {
            double d = sparse.data()[i] - dense.data()[i];
            mse += d * d;
        }
        mse /= static_cast<double>(sparse.numel());
        if (mse > prev + 1e-15) return "fidelity not monotone at K=" + std::to_string(K);
        prev = mse;
    }
    return ok();
}

std::string check_vsa_flop_exactness() {
    CounterRng rng(33);
    Tensor q = Tensor::randn({27, 2, 8}, rng);
    Tensor k = Tensor::randn({27, 2, 8}, rng);
    SparsePlan plan = partition_cubes({3, 3, 3}, {2, 2, 2});
    coarse_select(q, k, plan, 3);
    FlopLedger ledger = flop_report(plan, 2, 8);
    double area = 0;
    for (int64_t a = 0; a < plan.cube_count; ++a)
        for (int64_t b : plan.selection[static_cast<size_t>(a)])
            area += static_cast<double>(plan.cube_tokens[static_cast<size_t>(a)].size() *
                                        plan.cube_tokens[static_cast<size_t>(b)].size());
    return expect(ledger.fine_flops == 4.0 * 16.0 * area, "fine flop count mismatch");
}

// ---- refiner --------------------------------------------------------------------

std::string check_refiner_exactness() {
    Tape tape;
    CounterRng rng(34);
    LatentVideo low(Tensor::randn({2, 2, 2, 2}, rng));
    LatentVideo noisy(Tensor::randn({4, 4, 4, 2}, rng));
    Keyframe kf{2, Tensor::randn({4, 4, 2}, rng)};
    LatentVideo source(Tensor::randn({4, 4, 4, 2}, rng));
    Tensor mask = Tensor::zeros({4, 4, 4, 1});
    for (int64_t i = 0; i < 16; ++i) mask.data()[i] = 1.0;  // preserve frame 0
    RefinerInput in = assemble_refiner_input(tape, low, {kf}, noisy, &source, &mask);
    for (int64_t i = 0; i < 32; ++i)
        if (in.assembled.data.data()[i] != source.data.data()[i]) return "mask-preserved region not bitwise";
    for (int64_t i = 0; i < 32; ++i)
        if (in.assembled.data.data()[2 * 32 + i] != kf.frame.data()[i]) return "keyframe not bitwise";
    return ok();
}

std::string check_upsample_linearity() {
    CounterRng rng(35);
    Tensor x = Tensor::randn({2, 2, 2, 2}, rng);
    Tensor y = Tensor::randn({2, 2, 2, 2}, rng);
    Tensor mix = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < 16; ++i) mix.data()[i] = 2.5 * x.data()[i] - 0.75 * y.data()[i];
    Tensor a = upsample_latent(LatentVideo(mix), 3, 3, 4).data;
    Tensor bx = upsample_latent(LatentVideo(x), 3, 3, 4).data;
    Tensor by = upsample_latent(LatentVideo(y), 3, 3, 4).data;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (std::abs(a.data()[i] - (2.5 * bx.data()[i] - 0.75 * by.data()[i])) >= 1e-12) return "upsample not linear";
    return ok();
}

std::string check_refiner_full_k_equivalence() {
    ModelConfig cfg = verify_cfg();
    CounterRng rng(36);
    TwinBackbone base(cfg, rng, InitMode::random_all);
    RefinerModel refiner = RefinerModel::from_base(base, {1, 2, 2}, 2);
    CounterRng data(37);
    Tensor z = Tensor::randn({2, 2, 2, cfg.video_input_channels()}, data);
    Tensor za = Tensor::randn({2, cfg.audio_channels}, data);
    Tensor text = Tensor::randn({2, cfg.model_dim}, data);
    Tape tape;
    auto sparse = refiner.forward(tape, z, za, text, 0.3, true);
    auto dense = refiner.forward(tape, z, za, text, 0.3, false);
    return expect(max_abs_diff(sparse.video, dense.video) < 1e-10, "refiner sparse/full-K differs from dense");
}

// ---- harness ---------------------------------------------------------------------

HarnessConfig tiny_train_config() {
    HarnessConfig cfg;
    cfg.model = verify_cfg();
    cfg.dims = {2, 2, 2, 4};
    cfg.steps = 5;
    cfg.lr = 1e-3;
    cfg.batch = 1;
    cfg.seed = 11;
    cfg.task = TaskKind::i2v;
    cfg.overfit = true;
    return cfg;
}

std::string check_train_determinism() {
    HarnessConfig cfg = tiny_train_config();
    std::string m1 = temp_path("m1.csv"), m2 = temp_path("m2.csv");
    std::ostringstream sink;
    if (cmd_train(cfg, m1, "", {}, sink) != 0) return "train run 1 failed";
    if (cmd_train(cfg, m2, "", {}, sink) != 0) return "train run 2 failed";
    std::string a = read_file(m1), b = read_file(m2);
    std::filesystem::remove(m1);
    std::filesystem::remove(m2);
    return expect(!a.empty() && a == b, "metrics CSVs differ between identically seeded runs");
}

std::string check_checkpoint_roundtrip() {
    ModelConfig cfg = verify_cfg();
    CounterRng rng(38);
    GenerationModel model(cfg, rng, InitMode::random_all, Tensor::full({2}, 0.125));
    AdamState adam;
    adam.init(model.backbone.params);
    adam.step = 3;
    for (auto& v : adam.m)
        for (size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i % 7);
    std::string path = temp_path("ckpt.mmdt");
    save_checkpoint(path, model, adam, 3, 99);
    CheckpointData back = load_checkpoint(path);
    std::filesystem::remove(path);
    const auto& a = model.backbone.params.items();
    const auto& b = back.model.backbone.params.items();
    if (a.size() != b.size()) return "parameter count changed";
    for (size_t i = 0; i < a.size(); ++i)
        if (!tensors_equal(a[i].second, b[i].second)) return "parameter " + a[i].first + " not bitwise equal";
    if (back.adam.m != adam.m || back.adam.v != adam.v) return "optimizer state not bitwise equal";
    return expect(back.step == 3 && back.rng_seed == 99, "step/rng metadata lost");
}

std::string check_task_coverage() {
    ModelConfig cfg = verify_cfg();
    VaeStub vae(cfg.video_channels);
    auto batch = gen_synthetic_batch(123, std::nullopt, 5, {2, 2, 2, 4}, vae, cfg);
    std::vector<bool> seen(5, false);
    for (const auto& item : batch) seen[static_cast<size_t>(item.cond.task.kind)] = true;
    for (bool s : seen)
        if (!s) return "a task kind is missing from the mixed rotation";
    return ok();
}

std::string check_embed_stub() {
    CaptionRecord a{"hello world", "", "", "", ""};
    Tensor ea1 = embed_prompt_stub(a, 16);
    Tensor ea2 = embed_prompt_stub(a, 16);
    if (!tensors_equal(ea1, ea2)) return "embedding not deterministic";
    CaptionRecord b{"hello there", "", "", "", ""};
    Tensor eb = embed_prompt_stub(b, 16);
    int64_t diff_rows = 0;
    for (int64_t r = 0; r < ea1.dim(0); ++r) {
        bool same = true;
        for (int64_t c = 0; c < 16; ++c)
            if (ea1.data()[r * 16 + c] != eb.data()[r * 16 + c]) same = false;
        if (!same) ++diff_rows;
    }
    if (diff_rows != 1) return "one-token change flipped " + std::to_string(diff_rows) + " rows";
    for (int64_t r = 0; r < ea1.dim(0); ++r) {
        double norm = 0;
        for (int64_t c = 0; c < 16; ++c) norm += ea1.data()[r * 16 + c] * ea1.data()[r * 16 + c];
        if (std::abs(std::sqrt(norm) - 1.0) >= 1e-12) return "row norm drift";
    }
    return ok();
}

std::string check_av_sync_lock() {
    ModelConfig cfg = verify_cfg();
    VaeStub vae(cfg.video_channels);
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        SyntheticSample s = gen_synthetic_sample(seed, TaskKind::t2v, {4, 2, 2, 16}, vae, cfg.audio_channels);
        int64_t argmax = 0;
        double best = -1.0;
        for (int64_t l = 0; l < 16; ++l) {
            double v = std::abs(s.audio_raw.data()[l * cfg.audio_channels]);
            if (v > best) {
                best = v;
                argmax = l;
            }
        }
        if (argmax != s.audio_peak_index) return "envelope argmax is not the declared peak";
        int64_t mapped = std::llround(static_cast<double>(s.audio_peak_index) * 4.0 / 16.0);
        if (mapped != s.event_frame) return "audio peak does not map back to the event frame";
    }
    return ok();
}

}  // namespace

std::vector<PropertyCheck> all_property_checks() {
    return {
        {"tensor-autodiff/primitive-gradients-20-seeds", check_primitive_gradients},
        {"tensor-autodiff/matmul-triple-loop-oracle", check_matmul_oracle},
        {"tensor-autodiff/tape-replay-determinism", check_tape_determinism},
        {"rope3d/norm-preservation", check_rope_norms},
        {"rope3d/relative-position-shift-invariance", check_rope_relative_shift},
        {"rope3d/audio-scaling-consistency", check_rope_scaling_alignment},
        {"rope3d/offset-disambiguation", check_rope_offset_disambiguation},
        {"mmdit-blocks/identity-at-init", check_identity_at_init},
        {"mmdit-blocks/dual-single-equivalence", check_dual_single_equivalence},
        {"mmdit-blocks/row-stochastic-attention", check_row_stochastic_attention},
        {"mmdit-blocks/gradient-flow", check_block_gradient_flow},
        {"mmdit-blocks/cross-modal-reach", check_cross_modal_reach},
        {"mmdit-blocks/text-cross-residual-form", check_text_cross_residual_form},
        {"task-conditioning/mask-weight-complementarity", check_mask_complement},
        {"task-conditioning/task-matrix-fidelity", check_task_matrix},
        {"task-conditioning/reference-no-op", check_reference_noop},
        {"flow-matching/interpolation-identity", check_interpolation_identity},
        {"flow-matching/loss-symmetry", check_loss_symmetry},
        {"flow-matching/gradient-correctness", check_model_gradients},
        {"flow-matching/sampler-consistency", check_sampler_consistency},
        {"sparse-attention-vsa/full-k-equivalence", check_vsa_full_k},
        {"sparse-attention-vsa/coverage-and-determinism", check_vsa_coverage_and_determinism},
        {"sparse-attention-vsa/monotone-fidelity", check_vsa_monotone_fidelity},
        {"sparse-attention-vsa/flop-ledger-exactness", check_vsa_flop_exactness},
        {"refiner/splice-exactness", check_refiner_exactness},
        {"refiner/upsample-linearity", check_upsample_linearity},
        {"refiner/full-k-equivalence", check_refiner_full_k_equivalence},
        {"harness-cli/train-determinism", check_train_determinism},
        {"harness-cli/checkpoint-roundtrip", check_checkpoint_roundtrip},
        {"harness-cli/task-coverage", check_task_coverage},
        {"harness-cli/embed-stub", check_embed_stub},
        {"harness-cli/av-sync-lock", check_av_sync_lock},
    };
}

int run_verify(std::ostream& out) {
    int failures = 0;
    for (const PropertyCheck& check : all_property_checks()) {
        std::string detail;
        try {
            detail = check.run();
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        if (detail.empty()) {
            out << "PASS  " << check.name << "\n";
        } else {
            out << "FAIL  " << check.name << "  (" << detail << ")\n";
            ++failures;
        }
    }
    out << (failures == 0 ? "all properties hold" : std::to_string(failures) + " properties failed") << "\n";
    return failures;
}

}  // namespace mmdit
