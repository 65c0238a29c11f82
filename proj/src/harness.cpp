#include "mmdit/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "mmdit/verify.hpp"

namespace mmdit {

// ---- vae stub --------------------------------------------------------------

VaeStub::VaeStub(int64_t latent_channels, int64_t patch_size, uint64_t seed) : patch(patch_size), channels(latent_channels) {
    CounterRng rng(seed);
    weight = Tensor::randn({patch * patch * 3, channels}, rng, 0.3);
    bias = Tensor::randn({channels}, rng, 0.2);
}

Tensor VaeStub::encode_frame(const Tensor& pixels) const {
    if (pixels.rank() != 3 || pixels.dim(2) != 3)
        throw ShapeError("frame must be [h,w,3], got " + shape_str(pixels.shape()));
    int64_t hp = pixels.dim(0), wp = pixels.dim(1);
    if (hp % patch != 0 || wp % patch != 0)
        throw ShapeError("frame dims must be multiples of the patch size " + std::to_string(patch));
    int64_t H = hp / patch, W = wp / patch;
    Tensor out = Tensor::zeros({H, W, channels});
    int64_t in_dim = patch * patch * 3;
    std::vector<double> flat(static_cast<size_t>(in_dim));
    for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
            int64_t k = 0;
            for (int64_t py = 0; py < patch; ++py)
                for (int64_t px = 0; px < patch; ++px)
                    for (int64_t c = 0; c < 3; ++c)
                        flat[static_cast<size_t>(k++)] = pixels.data()[((h * patch + py) * wp + (w * patch + px)) * 3 + c];
            double* dst = out.data() + (h * W + w) * channels;
            for (int64_t c = 0; c < channels; ++c) {
                double acc = bias.data()[c];
                for (int64_t i = 0; i < in_dim; ++i) acc += flat[static_cast<size_t>(i)] * weight.data()[i * channels + c];
                dst[c] = acc;
            }
        }
    return out;
}

Tensor VaeStub::encode_video(const Tensor& pixels) const {
    if (pixels.rank() != 4 || pixels.dim(3) != 3)
        throw ShapeError("video must be [T,h,w,3], got " + shape_str(pixels.shape()));
    int64_t T = pixels.dim(0), hp = pixels.dim(1), wp = pixels.dim(2);
    Tensor out = Tensor::zeros({T, hp / patch, wp / patch, channels});
    int64_t frame_px = hp * wp * 3;
    int64_t frame_lat = (hp / patch) * (wp / patch) * channels;
    for (int64_t t = 0; t < T; ++t) {
        Tensor frame = Tensor::zeros({hp, wp, 3});
        std::memcpy(frame.data(), pixels.data() + t * frame_px, sizeof(double) * static_cast<size_t>(frame_px));
        Tensor lat = encode_frame(frame);
        std::memcpy(out.data() + t * frame_lat, lat.data(), sizeof(double) * static_cast<size_t>(frame_lat));
    }
    return out;
}

// ---- prompt stub ------------------------------------------------------------

std::string CaptionRecord::flatten() const {
    std::ostringstream os;
    auto field = [&](const char* tag, const std::string& value) {
        if (value.empty()) return;
        os << "<" << tag << "> " << value << " </" << tag << "> ";
    };
    field("text", text);
    field("sfx", sfx);
    field("dialogue", dialogue);
    field("singing", singing);
    field("bgm", bgm);
    return os.str();
}

static uint64_t token_hash(const std::string& token) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : token) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

static bool is_reference_tag(const std::string& token) {
    for (const char* prefix : {"@image_", "@video_", "@audio_"}) {
        size_t n = std::strlen(prefix);
        if (token.size() > n && token.compare(0, n, prefix) == 0 &&
            std::all_of(token.begin() + static_cast<long>(n), token.end(), [](char c) { return c >= '0' && c <= '9'; }))
            return true;
    }
    return false;
}

static void fill_unit_row(double* row, int64_t dim, uint64_t seed) {
    CounterRng rng(seed);
    double norm = 0.0;
    for (int64_t i = 0; i < dim; ++i) {
        row[i] = rng.normal();
        norm += row[i] * row[i];
    }
    norm = std::sqrt(norm);
    for (int64_t i = 0; i < dim; ++i) row[i] /= norm;
}

Tensor embed_prompt_stub(const CaptionRecord& caption, int64_t dim, int64_t max_len) {
    std::istringstream is(caption.flatten());
    std::vector<std::string> tokens;
    std::string tok;
    while (is >> tok) tokens.push_back(tok);
    if (max_len > 0 && static_cast<int64_t>(tokens.size()) > max_len) tokens.resize(static_cast<size_t>(max_len));

    if (tokens.empty()) {
        Tensor start = Tensor::zeros({1, dim});
        fill_unit_row(start.data(), dim, token_hash("<start>"));
        return start;
    }

    // reference tags map to reserved slots in order of first appearance
    std::vector<std::string> slot_order;
    Tensor out = Tensor::zeros({static_cast<int64_t>(tokens.size()), dim});
    for (size_t i = 0; i < tokens.size(); ++i) {
        uint64_t h;
        if (is_reference_tag(tokens[i])) {
            auto it = std::find(slot_order.begin(), slot_order.end(), tokens[i]);
            size_t slot = it == slot_order.end() ? slot_order.size() : static_cast<size_t>(it - slot_order.begin());
            if (it == slot_order.end()) slot_order.push_back(tokens[i]);
            h = token_hash("<ref-slot-" + std::to_string(slot) + ">");
        } else {
            h = token_hash(tokens[i]);
        }
        fill_unit_row(out.data() + static_cast<int64_t>(i) * dim, dim, h);
    }
    return out;
}

// ---- synthetic data -----------------------------------------------------------

SyntheticSample gen_synthetic_sample(uint64_t seed, TaskKind kind, const SyntheticDims& dims, const VaeStub& vae,
                                     int64_t audio_channels) {
    SyntheticSample s;
    s.seed = seed;
    CounterRng rng(CounterRng::mix(seed, static_cast<uint64_t>(kind) + 101));

    const int64_t T = dims.frames, hp = dims.height * vae.patch, wp = dims.width * vae.patch;
    const int64_t L = dims.audio_tokens;

    // moving blob with a flash at the event frame
    double r0 = rng.uniform(0.0, static_cast<double>(hp));
    double c0 = rng.uniform(0.0, static_cast<double>(wp));
    double dr = rng.uniform(-1.5, 1.5);
    double dc = rng.uniform(-1.5, 1.5);
    double sigma = 0.8 + rng.uniform() * 1.2;
    s.event_frame = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(T));

    s.pixel_video = Tensor::zeros({T, hp, wp, 3});
    for (int64_t t = 0; t < T; ++t) {
        double amp = (t == s.event_frame) ? 2.0 : 1.0;
        double cy = std::fmod(r0 + dr * static_cast<double>(t) + 8.0 * static_cast<double>(hp), static_cast<double>(hp));
        double cx = std::fmod(c0 + dc * static_cast<double>(t) + 8.0 * static_cast<double>(wp), static_cast<double>(wp));
        for (int64_t y = 0; y < hp; ++y)
            for (int64_t x = 0; x < wp; ++x) {
                double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                double g = amp * std::exp(-d2 / (2.0 * sigma * sigma));
                double* px = s.pixel_video.data() + ((t * hp + y) * wp + x) * 3;
                px[0] = g;
                px[1] = 0.7 * g;
                px[2] = 0.4 * g + 0.05;
            }
    }

    // tone-envelope audio locked to the event frame's position on the shared timeline
    s.audio_peak_index = std::min<int64_t>(
        L - 1, static_cast<int64_t>(std::llround(static_cast<double>(s.event_frame) * static_cast<double>(L) /
                                                 static_cast<double>(T))));
    s.audio_raw = Tensor::zeros({L, audio_channels});
    double phase = rng.uniform(0.0, 6.28318530717958647692);
    for (int64_t l = 0; l < L; ++l) {
        double env = std::exp(-0.5 * static_cast<double>((l - s.audio_peak_index) * (l - s.audio_peak_index)) / 4.0);
        s.audio_raw.data()[l * audio_channels] = env;  // channel 0 carries the raw envelope
        for (int64_t c = 1; c < audio_channels; ++c)
            s.audio_raw.data()[l * audio_channels + c] =
                env * std::sin(phase + 6.28318530717958647692 * static_cast<double>(l * c) / static_cast<double>(L));
    }

    s.task.kind = kind;
    s.task.frames = dims.frames;
    s.task.height = dims.height;
    s.task.width = dims.width;
    s.task.channels = vae.channels;
    if (kind == TaskKind::extension) s.task.extend_frames = std::max<int64_t>(1, T / 2);
    if (kind == TaskKind::edit) {
        Tensor volume = Tensor::zeros({T, dims.height, dims.width, 1});
        for (int64_t i = 0; i < volume.numel(); ++i) volume.data()[i] = static_cast<double>(i % 2);
        s.task.edit_mask = volume;
    }

    s.caption.text = "pattern drifting r" + std::to_string(static_cast<int>(dr * 10.0)) + " c" +
                     std::to_string(static_cast<int>(dc * 10.0));
    s.caption.sfx = "tone burst at " + std::to_string(s.audio_peak_index);
    s.caption.dialogue = "sample " + std::to_string(seed % 1000);
    s.caption.bgm = "steady hum";
    return s;
}

std::vector<BatchItem> gen_synthetic_batch(uint64_t seed, std::optional<TaskKind> task, int64_t count,
                                           const SyntheticDims& dims, const VaeStub& vae, const ModelConfig& model_cfg,
                                           int64_t num_video_refs, int64_t num_audio_refs) {
    static const TaskKind rotation[5] = {TaskKind::t2v, TaskKind::i2v, TaskKind::extension, TaskKind::start_end,
                                         TaskKind::edit};
    std::vector<BatchItem> out;
    for (int64_t i = 0; i < count; ++i) {
        TaskKind kind = task ? *task : rotation[i % 5];
        BatchItem item;
        item.sample = gen_synthetic_sample(CounterRng::mix(seed, static_cast<uint64_t>(i)), kind, dims, vae,
                                           model_cfg.audio_channels);
        item.z_v0 = LatentVideo(vae.encode_video(item.sample.pixel_video));
        item.z_a0 = LatentAudio(item.sample.audio_raw);

        ConditionBundle& cond = item.cond;
        cond.task = item.sample.task;
        cond.cond_frames = item.z_v0;  // conditioned cells show the target content
        cond.task_mask = build_task_mask(cond.task);
        cond.audio_temporal_scale = audio_scale_factor(dims.frames, dims.audio_tokens);

        CaptionRecord caption = item.sample.caption;
        CounterRng ref_rng(CounterRng::mix(seed, 7000 + static_cast<uint64_t>(i)));
        for (int64_t r = 0; r < num_video_refs; ++r) {
            SyntheticSample still = gen_synthetic_sample(ref_rng.next_u64(), TaskKind::t2v,
                                                         {1, dims.height, dims.width, dims.audio_tokens}, vae,
                                                         model_cfg.audio_channels);
            cond.video_refs.refs.push_back(
                {vae.encode_video(still.pixel_video), r % 2 == 0 ? ReferenceSource::image : ReferenceSource::clip});
            caption.text += " @image_" + std::to_string(r + 1);
        }
        for (int64_t r = 0; r < num_audio_refs; ++r) {
            int64_t len = std::max<int64_t>(2, dims.audio_tokens / 4);
            cond.audio_refs.push_back(Tensor::randn({len, model_cfg.audio_channels}, ref_rng, 0.5));
            caption.text += " @audio_" + std::to_string(r + 1);
        }
        cond.text_tokens = embed_prompt_stub(caption, model_cfg.model_dim);
        out.push_back(std::move(item));
    }
    return out;
}

// ---- binary container -----------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("archive truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("archive truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

constexpr uint32_t kArchiveVersion = 1;

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void save_archive(const std::string& path, const TensorArchive& archive) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write("MMDT", 4);
    put_u32(os, archive.version);
    put_u64(os, archive.header_text.size());
    os.write(archive.header_text.data(), static_cast<std::streamsize>(archive.header_text.size()));
    put_u64(os, static_cast<uint64_t>(archive.step));
    put_u64(os, archive.rng_seed);
    put_u64(os, archive.rng_counter);
    put_u32(os, static_cast<uint32_t>(archive.tensors.size()));
    for (const auto& [name, tensor] : archive.tensors) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<uint32_t>(tensor.rank()));
        for (int64_t e : tensor.shape()) put_u64(os, static_cast<uint64_t>(e));
        for (int64_t i = 0; i < tensor.numel(); ++i) put_u64(os, std::bit_cast<uint64_t>(tensor.data()[i]));
    }
    if (!os) throw FormatError("write failed for " + path);
}

TensorArchive load_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MMDT", 4) != 0)
        throw FormatError(path + " is not a tensor archive (bad magic)");
    TensorArchive archive;
    archive.version = get_u32(is);
    if (archive.version != kArchiveVersion)
        throw FormatError("archive version " + std::to_string(archive.version) + " unsupported (expected " +
                          std::to_string(kArchiveVersion) + ")");
    uint64_t text_len = get_u64(is);
    archive.header_text.resize(text_len);
    if (text_len > 0 && !is.read(archive.header_text.data(), static_cast<std::streamsize>(text_len)))
        throw FormatError("archive truncated");
    archive.step = static_cast<int64_t>(get_u64(is));
    archive.rng_seed = get_u64(is);
    archive.rng_counter = get_u64(is);
    uint32_t count = get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("archive truncated");
        uint32_t rank = get_u32(is);
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(get_u64(is));
        std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
        for (double& v : data) v = std::bit_cast<double>(get_u64(is));
        archive.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return archive;
}

void save_checkpoint(const std::string& path, const GenerationModel& model, const AdamState& adam, int64_t step,
                     uint64_t rng_seed) {
    TensorArchive archive;
    archive.header_text = model.backbone.cfg.serialize();
    archive.step = step;
    archive.rng_seed = rng_seed;
    archive.rng_counter = 0;
    const auto& items = model.backbone.params.items();
    for (const auto& [name, tensor] : items) archive.tensors.emplace_back(name, tensor.clone());
    if (adam.initialized()) {
        for (size_t i = 0; i < items.size(); ++i) {
            archive.tensors.emplace_back("adam.m." + items[i].first,
                                         Tensor::from_data(items[i].second.shape(), adam.m[i]));
            archive.tensors.emplace_back("adam.v." + items[i].first,
                                         Tensor::from_data(items[i].second.shape(), adam.v[i]));
        }
    }
    save_archive(path, archive);
}

CheckpointData load_checkpoint(const std::string& path) {
    TensorArchive archive = load_archive(path);
    ModelConfig cfg = ModelConfig::deserialize(archive.header_text);
    CounterRng dummy(0);
    VaeStub vae(cfg.video_channels);
    GenerationModel model(cfg, dummy, InitMode::standard, vae.black_latent());
    AdamState adam;
    bool has_adam = false;
    auto& items = model.backbone.params.items_mut();
    for (auto& [name, tensor] : items) {
        const Tensor* src = archive.find(name);
        if (!src) throw FormatError("checkpoint " + path + " is missing parameter " + name);
        if (src->shape() != tensor.shape())
            throw FormatError("checkpoint parameter " + name + " has shape " + shape_str(src->shape()) +
                              ", expected " + shape_str(tensor.shape()));
        tensor.vec() = src->vec();
    }
    if (archive.find("adam.m." + items.front().first)) {
        adam.init(model.backbone.params);
        adam.step = archive.step;
        for (size_t i = 0; i < items.size(); ++i) {
            const Tensor* m = archive.find("adam.m." + items[i].first);
            const Tensor* v = archive.find("adam.v." + items[i].first);
            if (!m || !v) throw FormatError("checkpoint optimizer state is incomplete");
            adam.m[i] = m->vec();
            adam.v[i] = v->vec();
        }
        has_adam = true;
    }
    (void)has_adam;
    return CheckpointData{archive.step, archive.rng_seed, std::move(model), std::move(adam)};
}

// ---- config --------------------------------------------------------------------

HarnessConfig HarnessConfig::parse_text(const std::string& text) {
    HarnessConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    std::ostringstream model_lines;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        line = line.substr(start);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config line is not key=value: " + line);
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        if (section == "model") {
            model_lines << key << "=" << value << "\n";
        } else if (section == "data") {
            if (key == "frames") cfg.dims.frames = std::stoll(value);
            else if (key == "height") cfg.dims.height = std::stoll(value);
            else if (key == "width") cfg.dims.width = std::stoll(value);
            else if (key == "audio_tokens") cfg.dims.audio_tokens = std::stoll(value);
            else throw FormatError("unknown [data] key: " + key);
        } else if (section == "train") {
            if (key == "steps") cfg.steps = std::stoll(value);
            else if (key == "lr") cfg.lr = std::stod(value);
            else if (key == "batch") cfg.batch = std::stoll(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "task") cfg.task = parse_task_kind(value);
            else if (key == "overfit") cfg.overfit = std::stoll(value) != 0;
            else if (key == "video_refs") cfg.num_video_refs = std::stoll(value);
            else if (key == "audio_refs") cfg.num_audio_refs = std::stoll(value);
            else throw FormatError("unknown [train] key: " + key);
        } else if (section == "sample") {
            if (key == "steps") cfg.sample_steps = std::stoll(value);
            else throw FormatError("unknown [sample] key: " + key);
        } else {
            throw FormatError("unknown config section: [" + section + "]");
        }
    }
    std::string model_text = model_lines.str();
    if (!model_text.empty()) cfg.model = ModelConfig::deserialize(model_text);
    return cfg;
}

HarnessConfig HarnessConfig::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config " + path);
    std::ostringstream buffer;
    buffer << is.rdbuf();
    return parse_text(buffer.str());
}

std::string HarnessConfig::serialize() const {
    std::ostringstream os;
    os << "[model]\n" << model.serialize();
    os << "[data]\n";
    os << "frames=" << dims.frames << "\nheight=" << dims.height << "\nwidth=" << dims.width
       << "\naudio_tokens=" << dims.audio_tokens << "\n";
    os << "[train]\n";
    os << "steps=" << steps << "\nlr=" << lr << "\nbatch=" << batch << "\nseed=" << seed
       << "\ntask=" << task_kind_name(task) << "\noverfit=" << (overfit ? 1 : 0) << "\nvideo_refs=" << num_video_refs
       << "\naudio_refs=" << num_audio_refs << "\n";
    os << "[sample]\nsteps=" << sample_steps << "\n";
    return os.str();
}

// ---- training driver ------------------------------------------------------------

namespace {

std::string format_metrics_row(int64_t step, const TrainLosses& losses) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g", static_cast<long long>(step), losses.total, losses.video,
                  losses.audio);
    return buf;
}

// overfit runs cycle t over a fixed grid so the model sees the whole path
constexpr double kOverfitTimes[4] = {0.125, 0.375, 0.625, 0.875};

TrainItem overfit_item(const BatchItem& base, const Tensor& eps_v, const Tensor& eps_a, int64_t step) {
    TrainItem item;
    item.cond = base.cond;
    double t = kOverfitTimes[(step - 1) % 4];
    item.sample = make_flow_sample_with(base.z_v0, base.z_a0, t, eps_v.clone(), eps_a.clone());
    return item;
}

}  // namespace

int cmd_train(const HarnessConfig& cfg_in, const std::string& metrics_path, const std::string& checkpoint_path,
              const TrainOverrides& overrides, std::ostream& log) {
    HarnessConfig cfg = cfg_in;
    if (overrides.seed) cfg.seed = *overrides.seed;
    if (overrides.steps) cfg.steps = *overrides.steps;
    if (overrides.task) cfg.task = parse_task_kind(*overrides.task);

    VaeStub vae(cfg.model.video_channels);
    CounterRng master(cfg.seed);
    CounterRng init_rng = master.derive("init");
    GenerationModel model(cfg.model, init_rng, InitMode::standard, vae.black_latent());
    AdamState adam;
    int64_t start_step = 0;

    if (!checkpoint_path.empty() && std::filesystem::exists(checkpoint_path)) {
        CheckpointData ckpt = load_checkpoint(checkpoint_path);
        if (ckpt.model.backbone.cfg.serialize() != cfg.model.serialize())
            throw FormatError("checkpoint model config differs from the run config");
        model = std::move(ckpt.model);
        adam = std::move(ckpt.adam);
        start_step = ckpt.step;
        log << "resuming from " << checkpoint_path << " at step " << start_step << "\n";
    }
    if (start_step >= cfg.steps) {
        log << "nothing to do: checkpoint already at step " << start_step << "\n";
        return 0;
    }

    // pinned overfit ingredients are functions of the seed only
    std::vector<BatchItem> pinned;
    Tensor pinned_eps_v, pinned_eps_a;
    if (cfg.overfit) {
        pinned = gen_synthetic_batch(master.derive("data").next_u64(), cfg.task, 1, cfg.dims, vae, cfg.model,
                                     cfg.num_video_refs, cfg.num_audio_refs);
        CounterRng noise_rng = master.derive("overfit-noise");
        pinned_eps_v = Tensor::randn(pinned[0].z_v0.data.shape(), noise_rng);
        pinned_eps_a = Tensor::randn(pinned[0].z_a0.data.shape(), noise_rng);
    }

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path, std::ios::trunc);
        if (!metrics) throw FormatError("cannot open metrics file " + metrics_path);
        metrics << "step,loss_total,loss_video,loss_audio\n";
    }

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    adam.step = start_step;  // keep bias correction aligned on resume

    try {
        for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
            std::vector<TrainItem> batch;
            if (cfg.overfit) {
                batch.push_back(overfit_item(pinned[0], pinned_eps_v, pinned_eps_a, step));
            } else {
                CounterRng srng = master.derive("step").derive(static_cast<uint64_t>(step));
                auto items = gen_synthetic_batch(srng.next_u64(), std::nullopt, cfg.batch, cfg.dims, vae, cfg.model,
                                                 cfg.num_video_refs, cfg.num_audio_refs);
                for (auto& item : items) {
                    double t = srng.uniform();
                    batch.push_back(TrainItem{make_flow_sample(item.z_v0, item.z_a0, t, srng), item.cond});
                }
            }
            TrainLosses losses = train_step(model, batch, adam, acfg);
            if (metrics.is_open()) metrics << format_metrics_row(step, losses) << "\n";
        }
    } catch (const TrainingError& err) {
        log << "training aborted: " << err.what() << "\n";
        return 1;
    }

    if (!checkpoint_path.empty()) {
        save_checkpoint(checkpoint_path, model, adam, cfg.steps, cfg.seed);
        log << "checkpoint written to " << checkpoint_path << "\n";
    }
    return 0;
}

int cmd_sample(const HarnessConfig& cfg_in, const std::string& checkpoint_path, const std::string& out_path,
               const TrainOverrides& overrides, std::ostream& log) {
    HarnessConfig cfg = cfg_in;
    if (overrides.seed) cfg.seed = *overrides.seed;
    if (overrides.steps) cfg.sample_steps = *overrides.steps;
    if (overrides.task) cfg.task = parse_task_kind(*overrides.task);

    CheckpointData ckpt = load_checkpoint(checkpoint_path);
    VaeStub vae(ckpt.model.backbone.cfg.video_channels);
    auto items = gen_synthetic_batch(CounterRng(cfg.seed).derive("sample-data").next_u64(), cfg.task, 1, cfg.dims, vae,
                                     ckpt.model.backbone.cfg, cfg.num_video_refs, cfg.num_audio_refs);
    CounterRng srng = CounterRng(cfg.seed).derive("sample-noise");
    SampleResult result = euler_sample(ckpt.model, items[0].cond, cfg.dims.audio_tokens, cfg.sample_steps, srng);

    TensorArchive archive;
    std::ostringstream meta;
    meta << "kind=latent-archive\n";
    meta << "task=" << task_kind_name(cfg.task) << "\n";
    meta << "steps=" << cfg.sample_steps << "\n";
    meta << "seed=" << cfg.seed << "\n";
    meta << "checkpoint_step=" << ckpt.step << "\n";
    archive.header_text = meta.str();
    archive.step = cfg.sample_steps;
    archive.rng_seed = cfg.seed;
    archive.tensors.emplace_back("video_latent", result.video.data);
    archive.tensors.emplace_back("audio_latent", result.audio.data);
    save_archive(out_path, archive);
    log << "latents written to " << out_path << "\n";
    return 0;
}

int cmd_verify(const std::string& inject_fault, std::ostream& out) {
    if (!inject_fault.empty()) {
        if (inject_fault == "text-cross-sign") {
            debug::flip_text_cross_residual = true;
        } else {
            out << "unknown fault: " << inject_fault << "\n";
            return 2;
        }
    }
    int failures = run_verify(out);
    debug::flip_text_cross_residual = false;
    return failures == 0 ? 0 : 1;
}

// ---- bench ------------------------------------------------------------------------

namespace {

struct BenchRow {
    std::array<int64_t, 3> grid, cube;
    int64_t top_k;
    FlopLedger ledger;
    double max_abs_err;
};

BenchRow bench_one(std::array<int64_t, 3> grid, std::array<int64_t, 3> cube, int64_t top_k, const Tensor& q,
                   const Tensor& k, const Tensor& v, const Tensor& dense) {
    Tape tape;
    tape.set_recording(false);
    SparsePlan plan = partition_cubes(grid, cube);
    coarse_select(q, k, plan, top_k);
    Tensor sparse = sparse_attention(tape, q, k, v, plan);
    BenchRow row;
    row.grid = grid;
    row.cube = cube;
    row.top_k = top_k;
    row.ledger = flop_report(plan, q.dim(1), q.dim(2));
    row.max_abs_err = max_abs_diff(sparse, dense);
    return row;
}

}  // namespace

int cmd_bench(const std::string& out_path, std::ostream& log) {
    std::ofstream csv(out_path, std::ios::trunc);
    if (!csv) throw FormatError("cannot open " + out_path);
    csv << "grid,cube,K,coarse_flops,fine_flops,dense_flops,reduction,max_abs_err_vs_dense\n";

    struct Sweep {
        std::array<int64_t, 3> grid, cube;
        std::vector<int64_t> ks;
    };
    std::vector<Sweep> sweeps = {
        {{8, 8, 8}, {2, 2, 2}, {1, 8, 16, 32, 64}},
        {{16, 16, 16}, {4, 4, 4}, {16, 21}},
    };

    int64_t heads = 4, head_dim = 16;
    for (const Sweep& sweep : sweeps) {
        int64_t n = sweep.grid[0] * sweep.grid[1] * sweep.grid[2];
        CounterRng rng(CounterRng::mix(0xbe9c4ull, static_cast<uint64_t>(n)));
        Tensor q = Tensor::randn({n, heads, head_dim}, rng);
        Tensor k = Tensor::randn({n, heads, head_dim}, rng);
        Tensor v = Tensor::randn({n, heads, head_dim}, rng);
        // dense reference once per sweep: full selection over one whole-grid cube
        Tape tape;
        tape.set_recording(false);
        SparsePlan dense_plan = partition_cubes(sweep.grid, sweep.grid);
        coarse_select(q, k, dense_plan, 1);
        Tensor dense = sparse_attention(tape, q, k, v, dense_plan);

        for (int64_t K : sweep.ks) {
            BenchRow row = bench_one(sweep.grid, sweep.cube, K, q, k, v, dense);
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%lldx%lldx%lld,%lldx%lldx%lld,%lld,%.0f,%.0f,%.0f,%.6f,%.3e",
                          static_cast<long long>(row.grid[0]), static_cast<long long>(row.grid[1]),
                          static_cast<long long>(row.grid[2]), static_cast<long long>(row.cube[0]),
                          static_cast<long long>(row.cube[1]), static_cast<long long>(row.cube[2]),
                          static_cast<long long>(row.top_k), row.ledger.coarse_flops, row.ledger.fine_flops,
                          row.ledger.dense_flops, row.ledger.reduction(), row.max_abs_err);
            csv << buf << "\n";
        }
    }
    log << "bench ledger written to " << out_path << "\n";
    return 0;
}

}  // namespace mmdit
