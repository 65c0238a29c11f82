#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "mmdit/vsa.hpp"

using namespace mmdit;

namespace {

// dense attention with an optional additive mask, the independent oracle
Tensor dense_attention_masked(const Tensor& q, const Tensor& k, const Tensor& v,
                              const std::vector<double>* mask /*[n*n], 0 or -1e30*/) {
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
                logits[static_cast<size_t>(j)] = dot * scale + (mask ? (*mask)[static_cast<size_t>(i * n + j)] : 0.0);
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

SparsePlan full_selection_plan(std::array<int64_t, 3> grid, std::array<int64_t, 3> cube) {
    SparsePlan plan = partition_cubes(grid, cube);
    plan.top_k = plan.cube_count;
    plan.selection.assign(static_cast<size_t>(plan.cube_count), {});
    for (int64_t a = 0; a < plan.cube_count; ++a)
        for (int64_t b = 0; b < plan.cube_count; ++b) plan.selection[static_cast<size_t>(a)].push_back(b);
    return plan;
}

double mse(const Tensor& a, const Tensor& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
}

}  // namespace

TEST_CASE("partition_cubes exact tiling") {
    SparsePlan plan = partition_cubes({4, 4, 4}, {2, 2, 2});
    CHECK(plan.cube_count == 8);
    for (const auto& toks : plan.cube_tokens) CHECK(toks.size() == 8);
    // every token in exactly one cube
    std::vector<int> seen(64, 0);
    for (const auto& toks : plan.cube_tokens)
        for (int64_t t : toks) seen[static_cast<size_t>(t)]++;
    for (int c : seen) CHECK(c == 1);
}

TEST_CASE("partition_cubes ragged edges by enumeration") {
    SparsePlan plan = partition_cubes({3, 3, 3}, {2, 2, 2});
    CHECK(plan.cube_count == 8);
    // enumeration oracle: cube (i,j,k) has extent 2 or 1 per axis
    std::multiset<size_t> sizes;
    for (const auto& toks : plan.cube_tokens) sizes.insert(toks.size());
    std::multiset<size_t> expect;
    for (int i : {2, 1})
        for (int j : {2, 1})
            for (int k : {2, 1}) expect.insert(static_cast<size_t>(i * j * k));
    CHECK(sizes == expect);
    int64_t total = 0;
    for (const auto& toks : plan.cube_tokens) total += static_cast<int64_t>(toks.size());
    CHECK(total == 27);
}

TEST_CASE("partition_cubes degenerate grids") {
    SparsePlan one = partition_cubes({1, 1, 1}, {2, 2, 2});  // cube clipped, not an error
    CHECK(one.cube_count == 1);
    CHECK(one.cube_tokens[0].size() == 1);
    CHECK_THROWS_AS(partition_cubes({0, 1, 1}, {1, 1, 1}), ParamError);
    CHECK_THROWS_AS(partition_cubes({1, 1, 1}, {0, 1, 1}), ParamError);
}

TEST_CASE("coarse_select full K selects everything") {
    CounterRng rng(1);
    Tensor q = Tensor::randn({8, 2, 4}, rng);
    Tensor k = Tensor::randn({8, 2, 4}, rng);
    SparsePlan plan = partition_cubes({2, 2, 2}, {1, 1, 1});
    coarse_select(q, k, plan, plan.cube_count);
    for (const auto& sel : plan.selection) CHECK(sel.size() == 8);
}

TEST_CASE("coarse_select dominance and self forcing") {
    // two cubes along t; cube B keys scaled so pooled alignment is large positive
    Tensor q = Tensor::full({4, 1, 4}, 1.0);
    Tensor k = Tensor::full({4, 1, 4}, 1.0);
    for (int64_t t = 2; t < 4; ++t)
        for (int64_t d = 0; d < 4; ++d) k.data()[t * 4 + d] = 1000.0;
    SparsePlan plan = partition_cubes({4, 1, 1}, {2, 1, 1});
    REQUIRE(plan.cube_count == 2);
    coarse_select(q, k, plan, 1);
    // B (cube 1) outscores A for every query cube...
    CHECK(plan.coarse_scores[1] > plan.coarse_scores[0]);
    CHECK(plan.coarse_scores[3] > plan.coarse_scores[2]);
    // ...but self-forcing keeps each query cube's own cube at K=1
    CHECK(plan.selection[0] == std::vector<int64_t>{0});
    CHECK(plan.selection[1] == std::vector<int64_t>{1});
    // at K=2 the dominant cube is in every selection
    coarse_select(q, k, plan, 2);
    CHECK(plan.selection[0] == std::vector<int64_t>{0, 1});
    CHECK(plan.selection[1] == std::vector<int64_t>{0, 1});
}

TEST_CASE("coarse_select tie-break picks lowest indices, deterministically") {
    Tensor q = Tensor::full({8, 1, 2}, 0.5);
    Tensor k = Tensor::full({8, 1, 2}, 0.5);  // identical pooled keys everywhere
    SparsePlan plan = partition_cubes({8, 1, 1}, {2, 1, 1});
    coarse_select(q, k, plan, 2);
    CHECK(plan.selection[0] == std::vector<int64_t>{0, 1});
    CHECK(plan.selection[1] == std::vector<int64_t>{0, 1});
    CHECK(plan.selection[2] == std::vector<int64_t>{0, 2});  // self forced in over tied candidates
    CHECK(plan.selection[3] == std::vector<int64_t>{0, 3});
    auto first = plan.selection;
    for (int r = 0; r < 3; ++r) {
        coarse_select(q, k, plan, 2);
        CHECK(plan.selection == first);
    }
}

TEST_CASE("sparse_attention with all cubes selected equals dense attention") {
    Tape tape;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        CounterRng rng(100 + seed);
        Tensor q = Tensor::randn({27, 2, 8}, rng);
        Tensor k = Tensor::randn({27, 2, 8}, rng);
        Tensor v = Tensor::randn({27, 2, 8}, rng);
        SparsePlan plan = full_selection_plan({3, 3, 3}, {2, 2, 2});
        Tensor sparse = sparse_attention(tape, q, k, v, plan);
        Tensor dense = dense_attention_masked(q, k, v, nullptr);
        CHECK(max_abs_diff(sparse, dense) < 1e-12);
    }
}

TEST_CASE("K=1 with a whole-grid cube is dense attention") {
    Tape tape;
    CounterRng rng(9);
    Tensor q = Tensor::randn({8, 1, 4}, rng);
    Tensor k = Tensor::randn({8, 1, 4}, rng);
    Tensor v = Tensor::randn({8, 1, 4}, rng);
    SparsePlan plan = partition_cubes({2, 2, 2}, {2, 2, 2});
    REQUIRE(plan.cube_count == 1);
    coarse_select(q, k, plan, 1);
    Tensor sparse = sparse_attention(tape, q, k, v, plan);
    Tensor dense = dense_attention_masked(q, k, v, nullptr);
    CHECK(max_abs_diff(sparse, dense) < 1e-12);
}

TEST_CASE("half-K selection equals the masked-dense oracle") {
    Tape tape;
    CounterRng rng(11);
    Tensor q = Tensor::randn({16, 2, 6}, rng);
    Tensor k = Tensor::randn({16, 2, 6}, rng);
    Tensor v = Tensor::randn({16, 2, 6}, rng);
    SparsePlan plan = partition_cubes({4, 2, 2}, {2, 1, 2});
    coarse_select(q, k, plan, plan.cube_count / 2);
    Tensor sparse = sparse_attention(tape, q, k, v, plan);

    std::vector<double> mask(16 * 16, -1e30);
    for (int64_t i = 0; i < 16; ++i) {
        int64_t cid = plan.token_cube[static_cast<size_t>(i)];
        for (int64_t kc : plan.selection[static_cast<size_t>(cid)])
            for (int64_t j : plan.cube_tokens[static_cast<size_t>(kc)]) mask[static_cast<size_t>(i * 16 + j)] = 0.0;
    }
    Tensor dense = dense_attention_masked(q, k, v, &mask);
    CHECK(max_abs_diff(sparse, dense) < 1e-12);
}

TEST_CASE("global tail tokens are dense both ways") {
    Tape tape;
    CounterRng rng(12);
    // 8 grid tokens + 3 tail tokens
    Tensor q = Tensor::randn({11, 1, 4}, rng);
    Tensor k = Tensor::randn({11, 1, 4}, rng);
    Tensor v = Tensor::randn({11, 1, 4}, rng);
    SparsePlan plan = full_selection_plan({2, 2, 2}, {1, 2, 2});
    Tensor sparse = sparse_attention(tape, q, k, v, plan, nullptr, 3);
    Tensor dense = dense_attention_masked(q, k, v, nullptr);
    CHECK(max_abs_diff(sparse, dense) < 1e-12);
}

TEST_CASE("selection nesting and monotone fidelity in K") {
    CounterRng rng(21);
    Tape tape;
    Tensor q = Tensor::randn({64, 2, 8}, rng);
    Tensor k = Tensor::randn({64, 2, 8}, rng);
    Tensor v = Tensor::randn({64, 2, 8}, rng);
    SparsePlan plan = partition_cubes({4, 4, 4}, {2, 2, 2});
    Tensor dense = dense_attention_masked(q, k, v, nullptr);
    double prev = 1e300;
    std::vector<std::vector<int64_t>> prev_sel;
    for (int64_t K = 1; K <= plan.cube_count; ++K) {
        coarse_select(q, k, plan, K);
        if (!prev_sel.empty()) {
            // selections are nested as K grows
            for (size_t a = 0; a < prev_sel.size(); ++a)
                for (int64_t b : prev_sel[a])
                    CHECK(std::find(plan.selection[a].begin(), plan.selection[a].end(), b) != plan.selection[a].end());
        }
        prev_sel = plan.selection;
        double err = mse(sparse_attention(tape, q, k, v, plan), dense);
        CHECK(err <= prev + 1e-15);
        prev = err;
    }
    CHECK(prev < 1e-28);  // K = cube count reproduces dense
}

TEST_CASE("coverage: every self pair is selected") {
    CounterRng rng(31);
    Tensor q = Tensor::randn({27, 1, 4}, rng);
    Tensor k = Tensor::randn({27, 1, 4}, rng);
    SparsePlan plan = partition_cubes({3, 3, 3}, {2, 2, 2});
    for (int64_t K = 1; K <= plan.cube_count; ++K) {
        coarse_select(q, k, plan, K);
        for (int64_t a = 0; a < plan.cube_count; ++a) {
            const auto& sel = plan.selection[static_cast<size_t>(a)];
            CHECK(std::find(sel.begin(), sel.end(), a) != sel.end());
            CHECK(sel.size() == static_cast<size_t>(std::min<int64_t>(K, plan.cube_count)));
            CHECK(std::set<int64_t>(sel.begin(), sel.end()).size() == sel.size());  // distinct
        }
    }
}

TEST_CASE("flop ledger exactness and reduction cases") {
    CounterRng rng(41);
    Tensor q = Tensor::randn({64, 2, 8}, rng);
    Tensor k = Tensor::randn({64, 2, 8}, rng);
    SparsePlan plan = partition_cubes({4, 4, 4}, {2, 2, 2});
    coarse_select(q, k, plan, 3);
    FlopLedger ledger = flop_report(plan, 2, 8);

    // direct enumeration oracle for the fine term
    double area = 0;
    for (int64_t a = 0; a < plan.cube_count; ++a)
        for (int64_t b : plan.selection[static_cast<size_t>(a)])
            area += static_cast<double>(plan.cube_tokens[static_cast<size_t>(a)].size() *
                                        plan.cube_tokens[static_cast<size_t>(b)].size());
    CHECK(ledger.fine_flops == 4.0 * 16.0 * area);
    CHECK(ledger.dense_flops == 4.0 * 64.0 * 64.0 * 16.0);
    CHECK(ledger.coarse_flops > 0.0);

    // K = all: no sparsity, coarse overhead pushes reduction slightly below 1
    coarse_select(q, k, plan, plan.cube_count);
    FlopLedger full = flop_report(plan, 2, 8);
    CHECK(full.reduction() < 1.0);
    CHECK(full.reduction() > 0.9);

    // single-cube grid is degenerate
    SparsePlan tiny = partition_cubes({2, 2, 2}, {2, 2, 2});
    Tensor q2 = Tensor::randn({8, 2, 8}, rng);
    Tensor k2 = Tensor::randn({8, 2, 8}, rng);
    coarse_select(q2, k2, tiny, 1);
    CHECK(flop_report(tiny, 2, 8).reduction() < 1.0);
}

TEST_CASE("16^3 grid with quarter selection reaches the target reduction") {
    // FLOP model only; no attention is run here
    SparsePlan plan = partition_cubes({16, 16, 16}, {4, 4, 4});
    REQUIRE(plan.cube_count == 64);
    plan.selection.assign(64, {});
    for (int64_t a = 0; a < 64; ++a) {
        for (int64_t b = 0; b < 16; ++b) plan.selection[static_cast<size_t>(a)].push_back((a + b) % 64);
        std::sort(plan.selection[static_cast<size_t>(a)].begin(), plan.selection[static_cast<size_t>(a)].end());
    }
    FlopLedger ledger = flop_report(plan, 4, 16);
    CHECK(ledger.reduction() >= 2.5);
}

TEST_CASE("sparse_attention gradients match finite differences") {
    CounterRng rng(51);
    Tensor k = Tensor::randn({8, 1, 4}, rng);
    Tensor v = Tensor::randn({8, 1, 4}, rng);
    SparsePlan plan = partition_cubes({2, 2, 2}, {1, 1, 2});
    {
        Tensor q0 = Tensor::randn({8, 1, 4}, rng);
        coarse_select(q0, k, plan, 2);
    }
    auto through_q = [&](Tape& t, const Tensor& x) {
        Tensor o = sparse_attention(t, x, k, v, plan);
        return sum_all(t, mul(t, o, o));
    };
    Tensor qprobe = Tensor::randn({8, 1, 4}, rng);
    CHECK(grad_check(through_q, qprobe, 1e-5) < 1e-4);

    Tensor q = Tensor::randn({8, 1, 4}, rng);
    auto through_k = [&](Tape& t, const Tensor& x) {
        Tensor o = sparse_attention(t, q, x, v, plan);
        return sum_all(t, mul(t, o, o));
    };
    CHECK(grad_check(through_k, k.clone(), 1e-5) < 1e-4);
    auto through_v = [&](Tape& t, const Tensor& x) {
        Tensor o = sparse_attention(t, q, k, x, plan);
        return sum_all(t, mul(t, o, o));
    };
    CHECK(grad_check(through_v, v.clone(), 1e-5) < 1e-4);
}

TEST_CASE("empty selection is rejected") {
    Tape tape;
    CounterRng rng(61);
    Tensor q = Tensor::randn({8, 1, 4}, rng);
    SparsePlan plan = partition_cubes({2, 2, 2}, {1, 1, 2});
    CHECK_THROWS_AS(sparse_attention(tape, q, q, q, plan), UsageError);
}
