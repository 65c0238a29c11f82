#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmdit/harness.hpp"

namespace py = pybind11;
using namespace mmdit;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& arr) {
    Shape shape(static_cast<size_t>(arr.ndim()));
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
    std::vector<double> data(arr.data(), arr.data() + arr.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
    return out;
}

TaskSpec make_task(const std::string& kind, int64_t frames, int64_t height, int64_t width, int64_t channels,
                   int64_t extend_frames, const std::optional<DoubleArray>& edit_mask) {
    TaskSpec spec;
    spec.kind = parse_task_kind(kind);
    spec.frames = frames;
    spec.height = height;
    spec.width = width;
    spec.channels = channels;
    spec.extend_frames = extend_frames;
    if (edit_mask) spec.edit_mask = to_tensor(*edit_mask);
    return spec;
}

// desk model with the stub encoders attached, driven from numpy
struct PyModel {
    ModelConfig cfg;
    VaeStub vae;
    GenerationModel model;
    uint64_t seed;

    PyModel(int64_t model_dim, int64_t head_count, int64_t m_dual, int64_t n_single, int64_t video_channels,
            int64_t audio_channels, uint64_t seed_in)
        : cfg(make_cfg(model_dim, head_count, m_dual, n_single, video_channels, audio_channels)),
          vae(video_channels),
          model(cfg, CounterRng(seed_in).derive("init"), InitMode::standard, vae.black_latent()),
          seed(seed_in) {}

    static ModelConfig make_cfg(int64_t model_dim, int64_t head_count, int64_t m_dual, int64_t n_single,
                                int64_t video_channels, int64_t audio_channels) {
        ModelConfig cfg;
        cfg.model_dim = model_dim;
        cfg.head_count = head_count;
        cfg.head_dim = model_dim / head_count;
        cfg.m_dual = m_dual;
        cfg.n_single = n_single;
        cfg.video_channels = video_channels;
        cfg.audio_channels = audio_channels;
        cfg.timestep_embed_dim = 64;
        cfg.validate();
        return cfg;
    }

    ConditionBundle bundle_for(const TaskSpec& task, const std::string& caption, const Tensor& cond_frames) {
        ConditionBundle cond;
        cond.task = task;
        cond.cond_frames = LatentVideo(cond_frames);
        cond.task_mask = build_task_mask(task);
        CaptionRecord record;
        record.text = caption;
        cond.text_tokens = embed_prompt_stub(record, cfg.model_dim);
        return cond;
    }

    py::dict velocity(const DoubleArray& z_v, const DoubleArray& z_a, const std::string& caption, double t,
                      const std::string& task_kind) {
        Tensor zv = to_tensor(z_v);
        Tensor za = to_tensor(z_a);
        TaskSpec task = make_task(task_kind, zv.dim(0), zv.dim(1), zv.dim(2), zv.dim(3), 1, std::nullopt);
        ConditionBundle cond = bundle_for(task, caption, Tensor::zeros(zv.shape()));
        cond.audio_temporal_scale = audio_scale_factor(zv.dim(0), za.dim(0));
        Tape tape;
        tape.set_recording(false);
        auto vel = model.predict_velocity(tape, zv, za, cond, t);
        py::dict out;
        out["video"] = to_array(vel.video);
        out["audio"] = to_array(vel.audio);
        return out;
    }

    std::vector<double> train_overfit(int64_t steps, int64_t frames, int64_t height, int64_t width,
                                      int64_t audio_tokens) {
        HarnessConfig hc;
        hc.model = cfg;
        hc.dims = {frames, height, width, audio_tokens};
        hc.steps = steps;
        hc.seed = seed;
        hc.overfit = true;
        hc.task = TaskKind::i2v;
        // run in-process against this model instance
        VaeStub local_vae(cfg.video_channels);
        auto batch = gen_synthetic_batch(CounterRng(seed).derive("data").next_u64(), hc.task, 1, hc.dims, local_vae,
                                         cfg);
        CounterRng noise = CounterRng(seed).derive("overfit-noise");
        Tensor eps_v = Tensor::randn(batch[0].z_v0.data.shape(), noise);
        Tensor eps_a = Tensor::randn(batch[0].z_a0.data.shape(), noise);
        AdamState adam;
        AdamConfig acfg;
        std::vector<double> losses;
        const double times[4] = {0.125, 0.375, 0.625, 0.875};
        for (int64_t s = 1; s <= steps; ++s) {
            TrainItem item;
            item.cond = batch[0].cond;
            item.sample =
                make_flow_sample_with(batch[0].z_v0, batch[0].z_a0, times[(s - 1) % 4], eps_v.clone(), eps_a.clone());
            losses.push_back(train_step(model, {item}, adam, acfg).total);
        }
        return losses;
    }

    py::dict sample(const std::string& task_kind, int64_t frames, int64_t height, int64_t width, int64_t audio_tokens,
                    int64_t steps, uint64_t sample_seed) {
        SyntheticDims dims{frames, height, width, audio_tokens};
        auto items = gen_synthetic_batch(CounterRng(sample_seed).derive("sample-data").next_u64(),
                                         parse_task_kind(task_kind), 1, dims, vae, cfg);
        CounterRng rng = CounterRng(sample_seed).derive("sample-noise");
        SampleResult result = euler_sample(model, items[0].cond, audio_tokens, steps, rng);
        py::dict out;
        out["video"] = to_array(result.video.data);
        out["audio"] = to_array(result.audio.data);
        return out;
    }

    int64_t param_count() const { return model.backbone.params.total_elements(); }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "desk-scale joint audio-video diffusion transformer core";

    py::register_exception<Error>(m, "MmditError");

    m.def("audio_scale_factor", &audio_scale_factor, py::arg("video_latent_frames"), py::arg("audio_latent_tokens"));

    m.def("condition_offset_indices", &condition_offset_indices, py::arg("ref_frame_counts"));

    m.def(
        "apply_rope",
        [](const DoubleArray& x, const py::array_t<int64_t>& indices, double temporal_scale, double base) {
            Tensor t = to_tensor(x);
            if (indices.ndim() != 2 || indices.shape(1) != 3) throw ShapeError("indices must be [tokens, 3]");
            RopePlan plan;
            plan.head_dim = t.dim(2);
            plan.axis_split = default_axis_split(plan.head_dim);
            plan.base = base;
            plan.temporal_scale = temporal_scale;
            auto idx = indices.unchecked<2>();
            for (py::ssize_t i = 0; i < indices.shape(0); ++i)
                plan.indices.push_back({idx(i, 0), idx(i, 1), idx(i, 2)});
            Tape tape;
            tape.set_recording(false);
            return to_array(apply_rope(tape, t, plan));
        },
        py::arg("x"), py::arg("indices"), py::arg("temporal_scale") = 1.0, py::arg("base") = 10000.0,
        "rotate [tokens, heads, head_dim] by per-token (t,h,w) grid indices");

    m.def(
        "build_task_mask",
        [](const std::string& kind, int64_t frames, int64_t height, int64_t width, int64_t extend_frames,
           const std::optional<DoubleArray>& edit_mask) {
            return to_array(build_task_mask(make_task(kind, frames, height, width, 1, extend_frames, edit_mask)));
        },
        py::arg("kind"), py::arg("frames"), py::arg("height"), py::arg("width"), py::arg("extend_frames") = 1,
        py::arg("edit_mask") = std::nullopt);

    m.def(
        "build_loss_mask",
        [](const std::string& kind, int64_t frames, int64_t height, int64_t width, int64_t extend_frames,
           const std::optional<DoubleArray>& edit_mask) {
            return to_array(build_loss_mask(make_task(kind, frames, height, width, 1, extend_frames, edit_mask)));
        },
        py::arg("kind"), py::arg("frames"), py::arg("height"), py::arg("width"), py::arg("extend_frames") = 1,
        py::arg("edit_mask") = std::nullopt);

    m.def(
        "assemble_channel_input",
        [](const DoubleArray& noisy, const DoubleArray& cond, const DoubleArray& mask, const DoubleArray& black) {
            Tape tape;
            tape.set_recording(false);
            ChannelInput ci =
                assemble_channel_input(tape, LatentVideo(to_tensor(noisy)), LatentVideo(to_tensor(cond)),
                                       to_tensor(mask), to_tensor(black));
            return to_array(ci.z_input);
        },
        py::arg("noisy"), py::arg("cond_frames"), py::arg("mask"), py::arg("black_latent"));

    m.def(
        "flow_interpolate",
        [](const DoubleArray& z0, const DoubleArray& eps, double t) {
            Tensor a = to_tensor(z0), b = to_tensor(eps);
            if (a.shape() != b.shape()) throw ShapeError("z0 and eps must share a shape");
            if (!(t >= 0.0 && t <= 1.0)) throw DomainError("t must lie in [0,1]");
            Tensor out = Tensor::zeros(a.shape());
            for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = t * a.data()[i] + (1.0 - t) * b.data()[i];
            return to_array(out);
        },
        py::arg("z0"), py::arg("eps"), py::arg("t"));

    m.def(
        "vsa_attention",
        [](const DoubleArray& q, const DoubleArray& k, const DoubleArray& v, std::array<int64_t, 3> grid,
           std::array<int64_t, 3> cube, int64_t top_k) {
            Tensor tq = to_tensor(q), tk = to_tensor(k), tv = to_tensor(v);
            SparsePlan plan = partition_cubes(grid, cube);
            coarse_select(tq, tk, plan, top_k);
            Tape tape;
            tape.set_recording(false);
            Tensor out = sparse_attention(tape, tq, tk, tv, plan);
            FlopLedger ledger = flop_report(plan, tq.dim(1), tq.dim(2));
            py::dict result;
            result["output"] = to_array(out);
            result["coarse_flops"] = ledger.coarse_flops;
            result["fine_flops"] = ledger.fine_flops;
            result["dense_flops"] = ledger.dense_flops;
            result["reduction"] = ledger.reduction();
            result["cube_count"] = plan.cube_count;
            return result;
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("grid"), py::arg("cube"), py::arg("top_k"));

    m.def(
        "upsample_latent",
        [](const DoubleArray& low, int64_t frames, int64_t height, int64_t width) {
            return to_array(upsample_latent(LatentVideo(to_tensor(low)), frames, height, width).data);
        },
        py::arg("low"), py::arg("frames"), py::arg("height"), py::arg("width"));

    m.def(
        "splice_keyframes",
        [](const DoubleArray& interp, const std::vector<std::pair<int64_t, DoubleArray>>& keyframes) {
            std::vector<Keyframe> kfs;
            for (const auto& [pos, frame] : keyframes) kfs.push_back({pos, to_tensor(frame)});
            return to_array(splice_keyframes(LatentVideo(to_tensor(interp)), kfs).data);
        },
        py::arg("interp"), py::arg("keyframes"));

    m.def(
        "splice_inpaint",
        [](const DoubleArray& assembled, const DoubleArray& source_hi, const DoubleArray& mask) {
            return to_array(
                splice_inpaint(LatentVideo(to_tensor(assembled)), LatentVideo(to_tensor(source_hi)), to_tensor(mask))
                    .data);
        },
        py::arg("assembled"), py::arg("source_hi"), py::arg("spatial_mask"));

    m.def(
        "embed_prompt",
        [](const std::string& text, int64_t dim) {
            CaptionRecord record;
            record.text = text;
            return to_array(embed_prompt_stub(record, dim));
        },
        py::arg("text"), py::arg("dim"));

    m.def("default_keyframe_positions", &default_keyframe_positions, py::arg("frames"), py::arg("stride") = 4);

    py::class_<PyModel>(m, "Model")
        .def(py::init<int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, uint64_t>(), py::arg("model_dim") = 64,
             py::arg("head_count") = 4, py::arg("m_dual") = 2, py::arg("n_single") = 2, py::arg("video_channels") = 4,
             py::arg("audio_channels") = 4, py::arg("seed") = 0)
        .def("velocity", &PyModel::velocity, py::arg("z_video"), py::arg("z_audio"), py::arg("caption"), py::arg("t"),
             py::arg("task") = "t2v")
        .def("train_overfit", &PyModel::train_overfit, py::arg("steps"), py::arg("frames") = 2, py::arg("height") = 4,
             py::arg("width") = 4, py::arg("audio_tokens") = 8)
        .def("sample", &PyModel::sample, py::arg("task"), py::arg("frames"), py::arg("height"), py::arg("width"),
             py::arg("audio_tokens"), py::arg("steps"), py::arg("seed") = 1)
        .def_property_readonly("param_count", &PyModel::param_count);
}
