#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mmdit/rope.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

struct FlopLedger {
    double coarse_flops = 0.0;
    double fine_flops = 0.0;
    double dense_flops = 0.0;
    double reduction() const { return dense_flops / (coarse_flops + fine_flops); }
};

// Cube partition of a (T, H, W) token grid plus the per-query-cube key-cube
// selection. Tokens and cubes are numbered row-major; ragged edge cubes keep
// their smaller extents.
struct SparsePlan {
    std::array<int64_t, 3> grid = {0, 0, 0};
    std::array<int64_t, 3> cube = {0, 0, 0};        // clipped to the grid
    std::array<int64_t, 3> cube_grid = {0, 0, 0};   // number of cubes per axis
    int64_t cube_count = 0;
    int64_t top_k = 0;
    std::vector<int32_t> token_cube;                // token id -> cube id
    std::vector<std::vector<int64_t>> cube_tokens;  // cube id -> token ids (ascending)
    std::vector<double> coarse_scores;              // [cube_count * cube_count], filled by coarse_select
    std::vector<std::vector<int64_t>> selection;    // query cube -> selected key cubes (ascending)
    FlopLedger ledger;

    int64_t tokens() const { return grid[0] * grid[1] * grid[2]; }
};

// Tile the grid into cubes. Cube dims larger than the grid are clipped.
SparsePlan partition_cubes(std::array<int64_t, 3> grid, std::array<int64_t, 3> cube_dims);

// Mean-pool q and k per cube and head, score cube pairs with scaled dot
// products summed over heads, and keep the top_k key cubes per query cube.
// The self cube is always selected; ties break toward the lower cube index.
// q/k: [grid tokens, heads, head_dim].
void coarse_select(const Tensor& q, const Tensor& k, SparsePlan& plan, int64_t top_k);

// Attention restricted to each query cube's selected key cubes. q/k/v:
// [tokens, heads, head_dim] where tokens = grid tokens + global_tail. Tail
// tokens (e.g. text) attend densely and are visible to every query. When
// rope is given it is applied to q and k first. Gradients flow through the
// same masked form the forward uses.
Tensor sparse_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const SparsePlan& plan,
                        const RopePlan* rope = nullptr, int64_t global_tail = 0);

// FLOP model over the grid region (scores + weighted sum, 2 flops per
// multiply-add): dense = 4*n^2*D, fine = 4*D*sum(|q cube|*|k cube|) over
// selected pairs, coarse = pooling (n*D + c*D) + pooled scores (2*c^2*D),
// with D = head_count*head_dim.
FlopLedger flop_report(const SparsePlan& plan, int64_t head_count, int64_t head_dim);

}  // namespace mmdit
