#include "mmdit/blocks.hpp"

#include <cmath>
#include <sstream>

namespace mmdit {

namespace debug {
bool flip_text_cross_residual = false;
}

// ---- config -----------------------------------------------------------------

void ModelConfig::validate() const {
    if (m_dual < 1) throw ParamError("m_dual must be >= 1");
    if (n_single < 0) throw ParamError("n_single must be >= 0");
    if (model_dim != head_count * head_dim)
        throw ParamError("model_dim must equal head_count * head_dim, got " + std::to_string(model_dim) + " vs " +
                         std::to_string(head_count) + "*" + std::to_string(head_dim));
    if (head_dim % 2 != 0) throw ParamError("head_dim must be even for rotary embeddings");
    if (mlp_ratio < 1) throw ParamError("mlp_ratio must be >= 1");
    if (timestep_embed_dim < 2 || timestep_embed_dim % 2 != 0)
        throw ParamError("timestep_embed_dim must be even and >= 2");
    if (video_channels < 1 || audio_channels < 1) throw ParamError("latent channel counts must be >= 1");
}

std::string ModelConfig::serialize() const {
    std::ostringstream os;
    os << "m_dual=" << m_dual << "\n";
    os << "n_single=" << n_single << "\n";
    os << "model_dim=" << model_dim << "\n";
    os << "head_count=" << head_count << "\n";
    os << "head_dim=" << head_dim << "\n";
    os << "mlp_ratio=" << mlp_ratio << "\n";
    os << "timestep_embed_dim=" << timestep_embed_dim << "\n";
    os << "video_channels=" << video_channels << "\n";
    os << "audio_channels=" << audio_channels << "\n";
    os << "audio_text_cross=" << (audio_text_cross ? 1 : 0) << "\n";
    os << "text_rope=" << (text_rope ? 1 : 0) << "\n";
    os << "av_cross_rope=" << (av_cross_rope ? 1 : 0) << "\n";
    return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        int64_t value = std::stoll(line.substr(eq + 1));
        if (key == "m_dual") cfg.m_dual = value;
        else if (key == "n_single") cfg.n_single = value;
        else if (key == "model_dim") cfg.model_dim = value;
        else if (key == "head_count") cfg.head_count = value;
        else if (key == "head_dim") cfg.head_dim = value;
        else if (key == "mlp_ratio") cfg.mlp_ratio = value;
        else if (key == "timestep_embed_dim") cfg.timestep_embed_dim = value;
        else if (key == "video_channels") cfg.video_channels = value;
        else if (key == "audio_channels") cfg.audio_channels = value;
        else if (key == "audio_text_cross") cfg.audio_text_cross = value != 0;
        else if (key == "text_rope") cfg.text_rope = value != 0;
        else if (key == "av_cross_rope") cfg.av_cross_rope = value != 0;
        else throw FormatError("unknown model config key: " + key);
    }
    cfg.validate();
    return cfg;
}

// ---- parameter store ----------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : items_)
        if (n == name) throw UsageError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
}

Tensor* ParamStore::find(const std::string& name) {
    for (auto& [n, t] : items_)
        if (n == name) return &t;
    return nullptr;
}

void ParamStore::zero_grads() {
    for (auto& [n, t] : items_) t.zero_grad();
}

int64_t ParamStore::total_elements() const {
    int64_t total = 0;
    for (const auto& [n, t] : items_) total += t.numel();
    return total;
}

// ---- init -----------------------------------------------------------------------

namespace {

struct Init {
    ParamStore& store;
    CounterRng& rng;
    InitMode mode;

    Tensor weight(const std::string& name, Shape shape) { return store.add(name, Tensor::randn(shape, rng, 0.02)); }
    Tensor zero(const std::string& name, Shape shape) {
        // still consumes rng draws so both init modes visit the stream identically
        Tensor r = Tensor::randn(shape, rng, 0.05);
        if (mode == InitMode::random_all) return store.add(name, r);
        return store.add(name, Tensor::zeros(shape));
    }
    Tensor bias(const std::string& name, Shape shape) { return zero(name, shape); }
};

// Output projections behind a zero-initialized adaLN gate stay randomly
// initialized: the gate alone makes the block an exact identity, and a zero
// projection would deadlock with the zero gate (each kills the other's
// gradient). Ungated residuals (the cross-attentions) zero their projection
// instead; their gradients do not vanish.
AttentionParams make_attention(Init& init, const std::string& prefix, int64_t dim, bool gated_output) {
    AttentionParams p;
    p.wq = init.weight(prefix + ".wq", {dim, dim});
    p.bq = init.bias(prefix + ".bq", {dim});
    p.wk = init.weight(prefix + ".wk", {dim, dim});
    p.bk = init.bias(prefix + ".bk", {dim});
    p.wv = init.weight(prefix + ".wv", {dim, dim});
    p.bv = init.bias(prefix + ".bv", {dim});
    p.wo = gated_output ? init.weight(prefix + ".wo", {dim, dim}) : init.zero(prefix + ".wo", {dim, dim});
    p.bo = init.bias(prefix + ".bo", {dim});
    return p;
}

MlpParams make_mlp(Init& init, const std::string& prefix, int64_t dim, int64_t ratio) {
    MlpParams p;
    p.w1 = init.weight(prefix + ".w1", {dim, dim * ratio});
    p.b1 = init.bias(prefix + ".b1", {dim * ratio});
    p.w2 = init.weight(prefix + ".w2", {dim * ratio, dim});  // behind the mlp gate
    p.b2 = init.bias(prefix + ".b2", {dim});
    return p;
}

AdaLnParams make_ada(Init& init, const std::string& prefix, int64_t dim, int64_t chunks) {
    AdaLnParams p;
    p.w = init.zero(prefix + ".w", {dim, chunks * dim});
    p.b = init.bias(prefix + ".b", {chunks * dim});
    p.chunks = chunks;
    return p;
}

StreamParams make_stream(Init& init, const std::string& prefix, const ModelConfig& cfg) {
    StreamParams s;
    s.ada = make_ada(init, prefix + ".ada", cfg.model_dim, 6);
    s.attn = make_attention(init, prefix + ".attn", cfg.model_dim, /*gated_output=*/true);
    s.mlp = make_mlp(init, prefix + ".mlp", cfg.model_dim, cfg.mlp_ratio);
    return s;
}

BranchLayer make_layer(Init& init, const std::string& prefix, const ModelConfig& cfg, bool dual,
                       bool with_text_cross) {
    BranchLayer layer;
    layer.dual = dual;
    if (dual) {
        layer.modality = make_stream(init, prefix + ".mod", cfg);
        layer.text = make_stream(init, prefix + ".txt", cfg);
    } else {
        layer.shared = make_stream(init, prefix + ".shared", cfg);
    }
    layer.has_text_cross = with_text_cross;
    if (with_text_cross) layer.text_cross = make_attention(init, prefix + ".tcross", cfg.model_dim, /*gated_output=*/false);
    return layer;
}

}  // namespace

TwinBackbone::TwinBackbone(const ModelConfig& config, CounterRng init_rng, InitMode mode) : cfg(config) {
    cfg.validate();
    Init init{params, init_rng, mode};
    const int64_t D = cfg.model_dim;

    temb_w1 = init.weight("time_embed.w1", {cfg.timestep_embed_dim, D});
    temb_b1 = init.bias("time_embed.b1", {D});
    temb_w2 = init.weight("time_embed.w2", {D, D});
    temb_b2 = init.bias("time_embed.b2", {D});

    video_in_w = init.weight("video.input.w", {cfg.video_input_channels(), D});
    video_in_b = init.bias("video.input.b", {D});
    audio_in_w = init.weight("audio.input.w", {cfg.audio_channels, D});
    audio_in_b = init.bias("audio.input.b", {D});

    int64_t layers = cfg.m_dual + cfg.n_single;
    for (int64_t i = 0; i < layers; ++i) {
        bool dual = i < cfg.m_dual;
        std::string tag = std::to_string(i);
        video_layers.push_back(make_layer(init, "video.layers." + tag, cfg, dual, /*with_text_cross=*/true));
        audio_layers.push_back(make_layer(init, "audio.layers." + tag, cfg, dual, cfg.audio_text_cross));
        AvCrossParams av;
        av.audio_from_video = make_attention(init, "av.layers." + tag + ".audio_q", D, false);
        av.video_from_audio = make_attention(init, "av.layers." + tag + ".video_q", D, false);
        av_cross.push_back(av);
    }

    video_final = make_ada(init, "video.final.ada", D, 2);
    video_head_w = init.weight("video.head.w", {D, cfg.video_channels});
    video_head_b = init.bias("video.head.b", {cfg.video_channels});
    audio_final = make_ada(init, "audio.final.ada", D, 2);
    audio_head_w = init.weight("audio.head.w", {D, cfg.audio_channels});
    audio_head_b = init.bias("audio.head.b", {cfg.audio_channels});
}

TwinBackbone TwinBackbone::clone_weights() const {
    CounterRng dummy(0);
    TwinBackbone copy(cfg, dummy, InitMode::standard);
    const auto& src = params.items();
    auto& dst = copy.params.items_mut();
    for (size_t i = 0; i < src.size(); ++i) {
        if (dst[i].first != src[i].first) throw UsageError("parameter order mismatch in clone_weights");
        dst[i].second.vec() = src[i].second.vec();
    }
    return copy;
}

// ---- forward helpers -------------------------------------------------------------

namespace {

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(tape, matmul(tape, x, w), b);
}

Tensor proj_heads(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b, const ModelConfig& cfg) {
    Tensor y = linear(tape, x, w, b);
    return reshape(tape, y, {x.dim(0), cfg.head_count, cfg.head_dim});
}

Tensor maybe_rope(Tape& tape, const Tensor& x, const RopePlan* plan) {
    return plan ? apply_rope(tape, x, *plan) : x;
}

// [n, D] per-row layer norm without learnable affine
Tensor plain_norm(Tape& tape, const Tensor& x, int64_t dim) {
    Tensor ones = Tensor::full({dim}, 1.0);
    Tensor zeros = Tensor::zeros({dim});
    return layer_norm(tape, x, ones, zeros, 1e-6);
}

Tensor modulate(Tape& tape, const Tensor& x, const Tensor& shift, const Tensor& scale_v, int64_t dim) {
    Tensor h = plain_norm(tape, x, dim);
    return add(tape, mul(tape, h, add_scalar(tape, scale_v, 1.0)), shift);
}

Tensor gated_residual(Tape& tape, const Tensor& x, const Tensor& y, const Tensor& gate) {
    return add(tape, x, mul(tape, y, gate));
}

// softmax attention over [n, heads, head_dim] operands
Tensor mha_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const ModelConfig& cfg,
                const SparsePlan* vsa, int64_t vsa_tail) {
    if (vsa) return sparse_attention(tape, q, k, v, *vsa, nullptr, vsa_tail);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    Tensor qp = permute(tape, q, {1, 0, 2});  // [H, nq, hd]
    Tensor kp = permute(tape, k, {1, 2, 0});  // [H, hd, nk]
    Tensor probs = softmax_lastdim(tape, scale(tape, matmul(tape, qp, kp), inv_sqrt));
    Tensor ctx = matmul(tape, probs, permute(tape, v, {1, 0, 2}));
    return permute(tape, ctx, {1, 0, 2});  // [nq, H, hd]
}

Tensor merge_heads(Tape& tape, const Tensor& x, const ModelConfig& cfg) {
    return reshape(tape, x, {x.dim(0), cfg.model_dim});
}

struct ModChunks {
    Tensor shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp;
};

ModChunks mod6(Tape& tape, const AdaLnParams& ada, const Tensor& t_emb) {
    auto parts = ada_chunks(tape, ada, t_emb);
    return {parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]};
}

// self-attention half of a stream: modulate -> qkv -> rope -> (returned pieces)
struct QkvOut {
    Tensor q, k, v;  // [n, H, hd], rope applied to q/k
};

QkvOut qkv_project(Tape& tape, const StreamParams& s, const Tensor& x, const Tensor& shift, const Tensor& scale_v,
                   const RopePlan* rope, const ModelConfig& cfg) {
    Tensor h = modulate(tape, x, shift, scale_v, cfg.model_dim);
    QkvOut out;
    out.q = maybe_rope(tape, proj_heads(tape, h, s.attn.wq, s.attn.bq, cfg), rope);
    out.k = maybe_rope(tape, proj_heads(tape, h, s.attn.wk, s.attn.bk, cfg), rope);
    out.v = proj_heads(tape, h, s.attn.wv, s.attn.bv, cfg);
    return out;
}

Tensor mlp_forward(Tape& tape, const MlpParams& mlp, const Tensor& x) {
    return linear(tape, gelu(tape, linear(tape, x, mlp.w1, mlp.b1)), mlp.w2, mlp.b2);
}

Tensor stream_mlp_half(Tape& tape, const StreamParams& s, const Tensor& x, const ModChunks& mod,
                       const ModelConfig& cfg) {
    Tensor h = modulate(tape, x, mod.shift_mlp, mod.scale_mlp, cfg.model_dim);
    return gated_residual(tape, x, mlp_forward(tape, s.mlp, h), mod.gate_mlp);
}

// joint self-attention over the two streams of a dual layer
std::pair<Tensor, Tensor> dual_attn_half(Tape& tape, const BranchLayer& layer, const Tensor& xv, const Tensor& xt,
                                         const ModChunks& mv, const ModChunks& mt, const ModelConfig& cfg,
                                         const RopePlan* v_rope, const RopePlan* t_rope, const SparsePlan* vsa) {
    QkvOut v_qkv = qkv_project(tape, layer.modality, xv, mv.shift_attn, mv.scale_attn, v_rope, cfg);
    QkvOut t_qkv = qkv_project(tape, layer.text, xt, mt.shift_attn, mt.scale_attn, t_rope, cfg);
    Tensor q = concat(tape, {v_qkv.q, t_qkv.q}, 0);
    Tensor k = concat(tape, {v_qkv.k, t_qkv.k}, 0);
    Tensor v = concat(tape, {v_qkv.v, t_qkv.v}, 0);
    Tensor ctx = merge_heads(tape, mha_core(tape, q, k, v, cfg, vsa, xt.dim(0)), cfg);
    auto parts = split(tape, ctx, 0, {xv.dim(0), xt.dim(0)});
    Tensor ov = linear(tape, parts[0], layer.modality.attn.wo, layer.modality.attn.bo);
    Tensor ot = linear(tape, parts[1], layer.text.attn.wo, layer.text.attn.bo);
    return {gated_residual(tape, xv, ov, mv.gate_attn), gated_residual(tape, xt, ot, mt.gate_attn)};
}

Tensor single_attn_half(Tape& tape, const StreamParams& s, const Tensor& x_mixed, const ModChunks& mod,
                        const ModelConfig& cfg, const RopePlan* rope, const SparsePlan* vsa, int64_t vsa_tail) {
    QkvOut qkv = qkv_project(tape, s, x_mixed, mod.shift_attn, mod.scale_attn, rope, cfg);
    Tensor ctx = merge_heads(tape, mha_core(tape, qkv.q, qkv.k, qkv.v, cfg, vsa, vsa_tail), cfg);
    Tensor o = linear(tape, ctx, s.attn.wo, s.attn.bo);
    return gated_residual(tape, x_mixed, o, mod.gate_attn);
}

void check_width(const Tensor& x, const ModelConfig& cfg, const char* what) {
    if (!x.defined()) throw UsageError(std::string(what) + " sequence is required");
    if (x.rank() != 2 || x.dim(1) != cfg.model_dim)
        throw ShapeError(std::string(what) + " tokens must be [len, " + std::to_string(cfg.model_dim) + "], got " +
                         shape_str(x.shape()));
}

}  // namespace

std::vector<Tensor> ada_chunks(Tape& tape, const AdaLnParams& ada, const Tensor& t_emb) {
    Tensor h = linear(tape, silu(tape, t_emb), ada.w, ada.b);  // [1, chunks*D]
    int64_t dim = ada.w.dim(0);
    std::vector<int64_t> sizes(static_cast<size_t>(ada.chunks), dim);
    auto parts = split(tape, h, 1, sizes);
    std::vector<Tensor> rows;
    rows.reserve(parts.size());
    for (Tensor& p : parts) rows.push_back(reshape(tape, p, {dim}));
    return rows;
}

Tensor attention(Tape& tape, const AttentionParams& p, const Tensor& x_q, const Tensor& x_kv, const ModelConfig& cfg,
                 const RopePlan* q_rope, const RopePlan* k_rope, const SparsePlan* vsa, int64_t vsa_tail) {
    check_width(x_q, cfg, "query");
    check_width(x_kv, cfg, "key/value");
    Tensor q = maybe_rope(tape, proj_heads(tape, x_q, p.wq, p.bq, cfg), q_rope);
    Tensor k = maybe_rope(tape, proj_heads(tape, x_kv, p.wk, p.bk, cfg), k_rope);
    Tensor v = proj_heads(tape, x_kv, p.wv, p.bv, cfg);
    Tensor ctx = merge_heads(tape, mha_core(tape, q, k, v, cfg, vsa, vsa_tail), cfg);
    return linear(tape, ctx, p.wo, p.bo);
}

std::pair<Tensor, Tensor> dual_stream_block(Tape& tape, const BranchLayer& layer, const TokenSequence& x_v,
                                            const TokenSequence& x_t, const Tensor& t_emb, const ModelConfig& cfg) {
    check_width(x_v.tokens, cfg, "modality");
    check_width(x_t.tokens, cfg, "text");
    ModChunks mv = mod6(tape, layer.modality.ada, t_emb);
    ModChunks mt = mod6(tape, layer.text.ada, t_emb);
    auto [xv, xt] = dual_attn_half(tape, layer, x_v.tokens, x_t.tokens, mv, mt, cfg, x_v.rope, x_t.rope, nullptr);
    xv = stream_mlp_half(tape, layer.modality, xv, mv, cfg);
    xt = stream_mlp_half(tape, layer.text, xt, mt, cfg);
    return {xv, xt};
}

TokenSequence single_stream_block(Tape& tape, const StreamParams& shared, const TokenSequence& x_mixed,
                                  const Tensor& t_emb, const ModelConfig& cfg) {
    check_width(x_mixed.tokens, cfg, "mixed");
    ModChunks mod = mod6(tape, shared.ada, t_emb);
    Tensor x = single_attn_half(tape, shared, x_mixed.tokens, mod, cfg, x_mixed.rope, nullptr, 0);
    x = stream_mlp_half(tape, shared, x, mod, cfg);
    return {x, Modality::mixed, x_mixed.rope};
}

Tensor text_cross_attention(Tape& tape, const AttentionParams& p, const Tensor& x_v, const Tensor& x_t,
                            const ModelConfig& cfg) {
    if (!x_t.defined() || x_t.numel() == 0) throw UsageError("text cross-attention requires at least one text token");
    Tensor out = attention(tape, p, x_v, x_t, cfg);
    if (debug::flip_text_cross_residual) return sub(tape, x_v, out);
    return add(tape, x_v, out);
}

std::pair<Tensor, Tensor> av_cross_attention(Tape& tape, const AvCrossParams& p, const Tensor& a, const Tensor& v,
                                             const ModelConfig& cfg, const RopePlan* a_rope, const RopePlan* v_rope) {
    // audio first queries the video features, then video queries the updated audio
    Tensor a_out = add(tape, a, attention(tape, p.audio_from_video, a, v, cfg, a_rope, v_rope));
    Tensor v_out = add(tape, v, attention(tape, p.video_from_audio, v, a_out, cfg, v_rope, a_rope));
    return {a_out, v_out};
}

// ---- timestep embedding -----------------------------------------------------------

Tensor TwinBackbone::embed_timestep(Tape& tape, double t) const {
    int64_t half = cfg.timestep_embed_dim / 2;
    Tensor feats = Tensor::zeros({1, cfg.timestep_embed_dim});
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        double arg = t * 1000.0 * freq;
        feats.data()[i] = std::cos(arg);
        feats.data()[half + i] = std::sin(arg);
    }
    Tensor h = silu(tape, linear(tape, feats, temb_w1, temb_b1));
    return linear(tape, h, temb_w2, temb_b2);  // [1, D]
}

Tensor TwinBackbone::project_video_input(Tape& tape, const Tensor& z_flat) const {
    if (z_flat.rank() != 2 || z_flat.dim(1) != cfg.video_input_channels())
        throw ShapeError("video input must be [tokens, " + std::to_string(cfg.video_input_channels()) + "], got " +
                         shape_str(z_flat.shape()));
    return linear(tape, z_flat, video_in_w, video_in_b);
}

Tensor TwinBackbone::project_audio_input(Tape& tape, const Tensor& z_flat) const {
    if (z_flat.rank() != 2 || z_flat.dim(1) != cfg.audio_channels)
        throw ShapeError("audio input must be [tokens, " + std::to_string(cfg.audio_channels) + "], got " +
                         shape_str(z_flat.shape()));
    return linear(tape, z_flat, audio_in_w, audio_in_b);
}

// ---- branch forward -----------------------------------------------------------------

BranchOutputs TwinBackbone::branch_forward(Tape& tape, const BranchInputs& in) const {
    check_width(in.video_tokens, cfg, "video");
    check_width(in.audio_tokens, cfg, "audio");
    check_width(in.text_tokens, cfg, "text");
    const int64_t nv = in.video_tokens.dim(0);
    const int64_t na = in.audio_tokens.dim(0);
    const int64_t nt = in.text_tokens.dim(0);

    if (in.video_rope && in.video_rope->tokens() != nv)
        throw ShapeError("video rope plan covers " + std::to_string(in.video_rope->tokens()) + " tokens, need " +
                         std::to_string(nv));
    if (in.audio_rope && in.audio_rope->tokens() != na)
        throw ShapeError("audio rope plan covers " + std::to_string(in.audio_rope->tokens()) + " tokens, need " +
                         std::to_string(na));

    Tensor temb = embed_timestep(tape, in.t);

    // text rotation: identity unless configured to index text positions temporally
    RopePlan text_plan_storage;
    const RopePlan* text_plan = nullptr;
    if (cfg.text_rope) {
        text_plan_storage = make_audio_plan(cfg.head_dim, nt, 1.0);
        text_plan = &text_plan_storage;
    }

    // mixed-sequence plans for the single-stream phase
    RopePlan video_mixed_storage, audio_mixed_storage;
    const RopePlan* video_mixed = nullptr;
    const RopePlan* audio_mixed = nullptr;
    if (in.video_rope || text_plan) {
        RopePlan vpart = in.video_rope ? *in.video_rope : make_identity_plan(cfg.head_dim, nv);
        RopePlan tpart = text_plan ? *text_plan : make_identity_plan(cfg.head_dim, nt);
        video_mixed_storage = concat_plans(vpart, tpart);
        video_mixed = &video_mixed_storage;
    }
    if (in.audio_rope || text_plan) {
        RopePlan apart = in.audio_rope ? *in.audio_rope : make_identity_plan(cfg.head_dim, na);
        RopePlan tpart = text_plan ? *text_plan : make_identity_plan(cfg.head_dim, nt);
        audio_mixed_storage = concat_plans(apart, tpart);
        audio_mixed = &audio_mixed_storage;
    }

    // block-sparse video self-attention (refiner): one partition, per-layer selection
    SparsePlan vsa_plan;
    bool use_vsa = false;
    if (in.video_vsa) {
        const VsaSpec& spec = *in.video_vsa;
        if (spec.grid[0] * spec.grid[1] * spec.grid[2] != nv)
            throw ShapeError("vsa grid does not cover the video token count");
        vsa_plan = partition_cubes(spec.grid, spec.cube);
        use_vsa = true;
    }

    Tensor xv = in.video_tokens;
    Tensor xa = in.audio_tokens;
    Tensor xt_v = in.text_tokens;  // each branch evolves its own copy of the text tokens
    Tensor xt_a = in.text_tokens;

    const int64_t layers = cfg.m_dual + cfg.n_single;
    for (int64_t i = 0; i < layers; ++i) {
        const BranchLayer& vl = video_layers[static_cast<size_t>(i)];
        const BranchLayer& al = audio_layers[static_cast<size_t>(i)];

        ModChunks mod_v, mod_vt, mod_a, mod_at;
        if (vl.dual) {
            mod_v = mod6(tape, vl.modality.ada, temb);
            mod_vt = mod6(tape, vl.text.ada, temb);
            mod_a = mod6(tape, al.modality.ada, temb);
            mod_at = mod6(tape, al.text.ada, temb);
        } else {
            mod_v = mod6(tape, vl.shared.ada, temb);
            mod_a = mod6(tape, al.shared.ada, temb);
        }

        // self-attention
        if (use_vsa) {
            // selection from the roped video q/k of this layer (text = global tail)
            Tensor hv = modulate(tape, xv, mod_v.shift_attn, mod_v.scale_attn, cfg.model_dim);
            const StreamParams& sp = vl.dual ? vl.modality : vl.shared;
            Tape probe;
            probe.set_recording(false);
            Tensor qv = maybe_rope(probe, proj_heads(probe, hv, sp.attn.wq, sp.attn.bq, cfg), in.video_rope);
            Tensor kv = maybe_rope(probe, proj_heads(probe, hv, sp.attn.wk, sp.attn.bk, cfg), in.video_rope);
            coarse_select(qv, kv, vsa_plan, in.video_vsa->top_k);
        }
        const SparsePlan* vsa = use_vsa ? &vsa_plan : nullptr;

        if (vl.dual) {
            std::tie(xv, xt_v) = dual_attn_half(tape, vl, xv, xt_v, mod_v, mod_vt, cfg, in.video_rope, text_plan, vsa);
            std::tie(xa, xt_a) =
                dual_attn_half(tape, al, xa, xt_a, mod_a, mod_at, cfg, in.audio_rope, text_plan, nullptr);
        } else {
            Tensor mixed_v = concat(tape, {xv, xt_v}, 0);
            mixed_v = single_attn_half(tape, vl.shared, mixed_v, mod_v, cfg, video_mixed, vsa, nt);
            auto parts_v = split(tape, mixed_v, 0, {nv, nt});
            xv = parts_v[0];
            xt_v = parts_v[1];

            Tensor mixed_a = concat(tape, {xa, xt_a}, 0);
            mixed_a = single_attn_half(tape, al.shared, mixed_a, mod_a, cfg, audio_mixed, nullptr, 0);
            auto parts_a = split(tape, mixed_a, 0, {na, nt});
            xa = parts_a[0];
            xt_a = parts_a[1];
        }

        // reinforced text conditioning
        xv = text_cross_attention(tape, vl.text_cross, xv, xt_v, cfg);
        if (al.has_text_cross) xa = text_cross_attention(tape, al.text_cross, xa, xt_a, cfg);

        // bidirectional AV cross-attention
        const RopePlan* a_plan = cfg.av_cross_rope ? in.audio_rope : nullptr;
        const RopePlan* v_plan = cfg.av_cross_rope ? in.video_rope : nullptr;
        std::tie(xa, xv) = av_cross_attention(tape, av_cross[static_cast<size_t>(i)], xa, xv, cfg, a_plan, v_plan);

        // MLPs close the layer
        if (vl.dual) {
            xv = stream_mlp_half(tape, vl.modality, xv, mod_v, cfg);
            xt_v = stream_mlp_half(tape, vl.text, xt_v, mod_vt, cfg);
            xa = stream_mlp_half(tape, al.modality, xa, mod_a, cfg);
            xt_a = stream_mlp_half(tape, al.text, xt_a, mod_at, cfg);
        } else {
            xv = stream_mlp_half(tape, vl.shared, xv, mod_v, cfg);
            xt_v = stream_mlp_half(tape, vl.shared, xt_v, mod_v, cfg);
            xa = stream_mlp_half(tape, al.shared, xa, mod_a, cfg);
            xt_a = stream_mlp_half(tape, al.shared, xt_a, mod_a, cfg);
        }
    }

    BranchOutputs out;
    out.video_hidden = xv;
    out.audio_hidden = xa;

    auto fin_v = ada_chunks(tape, video_final, temb);
    Tensor hv = modulate(tape, xv, fin_v[0], fin_v[1], cfg.model_dim);
    out.video_velocity = linear(tape, hv, video_head_w, video_head_b);

    auto fin_a = ada_chunks(tape, audio_final, temb);
    Tensor ha = modulate(tape, xa, fin_a[0], fin_a[1], cfg.model_dim);
    out.audio_velocity = linear(tape, ha, audio_head_w, audio_head_b);
    return out;
}

}  // namespace mmdit
