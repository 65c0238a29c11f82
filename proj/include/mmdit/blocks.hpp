#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mmdit/rope.hpp"
#include "mmdit/tensor.hpp"
#include "mmdit/vsa.hpp"

namespace mmdit {

enum class Modality { video, audio, text, mixed };

struct TokenSequence {
    Tensor tokens;  // [len, model_dim]
    Modality tag = Modality::mixed;
    const RopePlan* rope = nullptr;  // nullptr = identity rotation
};

struct ModelConfig {
    int64_t m_dual = 2;    // dual-stream layers (M)
    int64_t n_single = 2;  // single-stream layers (N)
    int64_t model_dim = 64;
    int64_t head_count = 4;
    int64_t head_dim = 16;
    int64_t mlp_ratio = 4;
    int64_t timestep_embed_dim = 64;
    int64_t video_channels = 4;  // latent C; the video branch consumes 2C+1 channels
    int64_t audio_channels = 4;
    bool audio_text_cross = true;  // mirror the video branch's text cross-attention
    bool text_rope = false;        // identity rotation on text tokens when false
    bool av_cross_rope = true;     // temporal RoPE inside the AV cross-attention

    int64_t video_input_channels() const { return 2 * video_channels + 1; }
    void validate() const;
    std::string serialize() const;  // key=value lines
    static ModelConfig deserialize(const std::string& text);
};

// ---- parameter plumbing -----------------------------------------------------

enum class InitMode {
    standard,   // zero output projections and zero adaLN gates (identity at init)
    random_all  // everything random; used by gradient-fidelity checks
};

class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t);
    Tensor* find(const std::string& name);
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items_mut() { return items_; }
    void zero_grads();
    int64_t total_elements() const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MlpParams {
    Tensor w1, b1, w2, b2;
};

// silu(t_emb) -> chunks * model_dim modulation values
struct AdaLnParams {
    Tensor w, b;
    int64_t chunks = 0;
};

// one stream's parameters: adaLN (shift/scale/gate for attn + mlp), self-attention, MLP
struct StreamParams {
    AdaLnParams ada;  // 6 chunks
    AttentionParams attn;
    MlpParams mlp;
};

struct BranchLayer {
    bool dual = true;
    StreamParams modality;    // dual: the video/audio stream
    StreamParams text;        // dual: the text stream
    StreamParams shared;      // single: one set for the concatenated sequence
    AttentionParams text_cross;
    bool has_text_cross = true;
};

struct AvCrossParams {
    AttentionParams audio_from_video;  // Q = audio
    AttentionParams video_from_audio;  // Q = video
};

// ---- forward plumbing ---------------------------------------------------------

struct VsaSpec {
    std::array<int64_t, 3> grid = {0, 0, 0};  // video token grid incl. prepended condition frames
    std::array<int64_t, 3> cube = {4, 4, 4};
    int64_t top_k = 1;
};

struct BranchInputs {
    Tensor video_tokens;  // [nv, model_dim], condition tokens first when present
    Tensor audio_tokens;  // [na, model_dim]
    Tensor text_tokens;   // [nt, model_dim]
    double t = 0.0;
    const RopePlan* video_rope = nullptr;
    const RopePlan* audio_rope = nullptr;
    const VsaSpec* video_vsa = nullptr;  // block-sparse video self-attention (refiner)
};

struct BranchOutputs {
    Tensor video_hidden;    // residual-path value after all layers, pre head
    Tensor audio_hidden;
    Tensor video_velocity;  // [nv, video_channels]
    Tensor audio_velocity;  // [na, audio_channels]
};

// The twin backbone: per-branch hybrid dual/single stacks, text
// cross-attention on every layer, and a bidirectional AV cross-attention
// pair coupling the branches at every depth.
struct TwinBackbone {
    ModelConfig cfg;
    ParamStore params;

    Tensor temb_w1, temb_b1, temb_w2, temb_b2;
    Tensor video_in_w, video_in_b;  // 2C+1 -> model_dim
    Tensor audio_in_w, audio_in_b;  // C_a -> model_dim
    std::vector<BranchLayer> video_layers, audio_layers;
    std::vector<AvCrossParams> av_cross;
    AdaLnParams video_final, audio_final;  // 2 chunks: shift, scale
    Tensor video_head_w, video_head_b;
    Tensor audio_head_w, audio_head_b;

    TwinBackbone(const ModelConfig& config, CounterRng init_rng, InitMode mode = InitMode::standard);

    Tensor embed_timestep(Tape& tape, double t) const;
    Tensor project_video_input(Tape& tape, const Tensor& z_flat) const;  // [n, 2C+1] -> [n, D]
    Tensor project_audio_input(Tape& tape, const Tensor& z_flat) const;  // [n, C_a] -> [n, D]

    BranchOutputs branch_forward(Tape& tape, const BranchInputs& in) const;

    // clone with identical parameter values (refiner initialization contract)
    TwinBackbone clone_weights() const;
};

// ---- block-level operations ---------------------------------------------------

// adaLN modulation: chunks of model_dim derived from the timestep embedding
std::vector<Tensor> ada_chunks(Tape& tape, const AdaLnParams& ada, const Tensor& t_emb);

// generic attention: project, rope, multi-head softmax, merge, out-project
Tensor attention(Tape& tape, const AttentionParams& p, const Tensor& x_q, const Tensor& x_kv, const ModelConfig& cfg,
                 const RopePlan* q_rope = nullptr, const RopePlan* k_rope = nullptr,
                 const SparsePlan* vsa = nullptr, int64_t vsa_tail = 0);

// joint self-attention + per-stream MLP of one dual-stream layer (Eqs. of the
// dual design); the cross-attention hooks sit between the two halves inside
// branch_forward
std::pair<Tensor, Tensor> dual_stream_block(Tape& tape, const BranchLayer& layer, const TokenSequence& x_v,
                                            const TokenSequence& x_t, const Tensor& t_emb, const ModelConfig& cfg);

TokenSequence single_stream_block(Tape& tape, const StreamParams& shared, const TokenSequence& x_mixed,
                                  const Tensor& t_emb, const ModelConfig& cfg);

// x_v' + Attention(Q = x_v', K = x_t, V = x_t)
Tensor text_cross_attention(Tape& tape, const AttentionParams& p, const Tensor& x_v, const Tensor& x_t,
                            const ModelConfig& cfg);

// a' = a + CrossAttn(Q=a, K=v, V=v); v'' = v + CrossAttn(Q=v, K=a', V=a')
std::pair<Tensor, Tensor> av_cross_attention(Tape& tape, const AvCrossParams& p, const Tensor& a, const Tensor& v,
                                             const ModelConfig& cfg, const RopePlan* a_rope = nullptr,
                                             const RopePlan* v_rope = nullptr);

namespace debug {
// verify --inject-fault text-cross-sign flips the Eq.-4-style residual
extern bool flip_text_cross_residual;
}  // namespace debug

}  // namespace mmdit
