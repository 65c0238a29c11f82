#include "mmdit/vsa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mmdit {

static int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

SparsePlan partition_cubes(std::array<int64_t, 3> grid, std::array<int64_t, 3> cube_dims) {
    for (int i = 0; i < 3; ++i) {
        if (grid[static_cast<size_t>(i)] < 1) throw ParamError("grid dims must be >= 1");
        if (cube_dims[static_cast<size_t>(i)] < 1) throw ParamError("cube dims must be >= 1");
    }
    SparsePlan plan;
    plan.grid = grid;
    for (int i = 0; i < 3; ++i)
        plan.cube[static_cast<size_t>(i)] = std::min(cube_dims[static_cast<size_t>(i)], grid[static_cast<size_t>(i)]);
    for (int i = 0; i < 3; ++i)
        plan.cube_grid[static_cast<size_t>(i)] = ceil_div(grid[static_cast<size_t>(i)], plan.cube[static_cast<size_t>(i)]);
    plan.cube_count = plan.cube_grid[0] * plan.cube_grid[1] * plan.cube_grid[2];
    plan.token_cube.resize(static_cast<size_t>(plan.tokens()));
    plan.cube_tokens.assign(static_cast<size_t>(plan.cube_count), {});
    int64_t tok = 0;
    for (int64_t t = 0; t < grid[0]; ++t)
        for (int64_t h = 0; h < grid[1]; ++h)
            for (int64_t w = 0; w < grid[2]; ++w, ++tok) {
                int64_t cid = (t / plan.cube[0]) * plan.cube_grid[1] * plan.cube_grid[2] +
                              (h / plan.cube[1]) * plan.cube_grid[2] + (w / plan.cube[2]);
                plan.token_cube[static_cast<size_t>(tok)] = static_cast<int32_t>(cid);
                plan.cube_tokens[static_cast<size_t>(cid)].push_back(tok);
            }
    return plan;
}

void coarse_select(const Tensor& q, const Tensor& k, SparsePlan& plan, int64_t top_k) {
    if (q.rank() != 3 || k.rank() != 3)
        throw ShapeError("coarse_select expects [tokens, heads, head_dim], got " + shape_str(q.shape()) + " / " +
                         shape_str(k.shape()));
    if (q.dim(0) != plan.tokens() || k.dim(0) != plan.tokens())
        throw ShapeError("coarse_select token count does not match the grid of the plan");
    if (top_k < 1) throw ParamError("top_k must be >= 1");
    int64_t heads = q.dim(1), hd = q.dim(2);
    int64_t c = plan.cube_count;
    plan.top_k = top_k;

    // mean pool per cube, per head
    auto pool = [&](const Tensor& x) {
        std::vector<double> pooled(static_cast<size_t>(c * heads * hd), 0.0);
        for (int64_t cid = 0; cid < c; ++cid) {
            const auto& toks = plan.cube_tokens[static_cast<size_t>(cid)];
            for (int64_t t : toks) {
                const double* row = x.data() + t * heads * hd;
                double* dst = pooled.data() + cid * heads * hd;
                for (int64_t i = 0; i < heads * hd; ++i) dst[i] += row[i];
            }
            double inv = 1.0 / static_cast<double>(toks.size());
            double* dst = pooled.data() + cid * heads * hd;
            for (int64_t i = 0; i < heads * hd; ++i) dst[i] *= inv;
        }
        return pooled;
    };
    std::vector<double> pq = pool(q), pk = pool(k);

    // scaled dot per head, summed across heads -> one score per cube pair
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    plan.coarse_scores.assign(static_cast<size_t>(c * c), 0.0);
    for (int64_t a = 0; a < c; ++a)
        for (int64_t b = 0; b < c; ++b) {
            double s = 0.0;
            for (int64_t h = 0; h < heads; ++h) {
                const double* qa = pq.data() + (a * heads + h) * hd;
                const double* kb = pk.data() + (b * heads + h) * hd;
                double dot = 0.0;
                for (int64_t i = 0; i < hd; ++i) dot += qa[i] * kb[i];
                s += dot * scale;
            }
            plan.coarse_scores[static_cast<size_t>(a * c + b)] = s;
        }

    int64_t keep = std::min<int64_t>(top_k, c);
    plan.selection.assign(static_cast<size_t>(c), {});
    std::vector<int64_t> order(static_cast<size_t>(c));
    for (int64_t a = 0; a < c; ++a) {
        std::iota(order.begin(), order.end(), 0);
        const double* row = plan.coarse_scores.data() + a * c;
        std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
            if (row[x] != row[y]) return row[x] > row[y];
            return x < y;  // tie: lower cube index wins
        });
        std::vector<int64_t> chosen(order.begin(), order.begin() + keep);
        if (std::find(chosen.begin(), chosen.end(), a) == chosen.end()) chosen.back() = a;  // self always in
        std::sort(chosen.begin(), chosen.end());
        plan.selection[static_cast<size_t>(a)] = std::move(chosen);
    }
}

Tensor sparse_attention(Tape& tape, const Tensor& q_in, const Tensor& k_in, const Tensor& v, const SparsePlan& plan,
                        const RopePlan* rope, int64_t global_tail) {
    if (q_in.rank() != 3 || k_in.rank() != 3 || v.rank() != 3)
        throw ShapeError("sparse_attention expects [tokens, heads, head_dim] inputs");
    int64_t n = plan.tokens() + global_tail;
    if (q_in.dim(0) != n || k_in.dim(0) != n || v.dim(0) != n)
        throw ShapeError("sparse_attention token count " + std::to_string(q_in.dim(0)) + " does not match plan (" +
                         std::to_string(n) + ")");
    if (plan.selection.empty()) throw UsageError("sparse_attention needs a populated selection (run coarse_select)");

    Tensor q = rope ? apply_rope(tape, q_in, *rope) : q_in;
    Tensor k = rope ? apply_rope(tape, k_in, *rope) : k_in;

    int64_t heads = q.dim(1), hd = q.dim(2);
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    int64_t ngrid = plan.tokens();

    // key list per query token: selected cubes' tokens (ascending), then tail
    auto keys_of = [&](int64_t i, std::vector<int64_t>& out) {
        out.clear();
        if (i < ngrid) {
            int64_t cid = plan.token_cube[static_cast<size_t>(i)];
            for (int64_t kc : plan.selection[static_cast<size_t>(cid)]) {
                const auto& toks = plan.cube_tokens[static_cast<size_t>(kc)];
                out.insert(out.end(), toks.begin(), toks.end());
            }
        } else {
            for (int64_t j = 0; j < ngrid; ++j) out.push_back(j);
        }
        for (int64_t j = ngrid; j < n; ++j) out.push_back(j);
    };

    Tensor out = Tensor::zeros(q.shape());
    {
        std::vector<int64_t> keys;
        std::vector<double> logits;
        for (int64_t i = 0; i < n; ++i) {
            keys_of(i, keys);
            logits.resize(keys.size());
            for (int64_t h = 0; h < heads; ++h) {
                const double* qr = q.data() + (i * heads + h) * hd;
                double mx = -1e300;
                for (size_t j = 0; j < keys.size(); ++j) {
                    const double* kr = k.data() + (keys[j] * heads + h) * hd;
                    double dot = 0.0;
                    for (int64_t d = 0; d < hd; ++d) dot += qr[d] * kr[d];
                    logits[j] = dot * scale;
                    mx = std::max(mx, logits[j]);
                }
                double denom = 0.0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    denom += l;
                }
                double inv = 1.0 / denom;
                double* orow = out.data() + (i * heads + h) * hd;
                for (size_t j = 0; j < keys.size(); ++j) {
                    double p = logits[j] * inv;
                    const double* vr = v.data() + (keys[j] * heads + h) * hd;
                    for (int64_t d = 0; d < hd; ++d) orow[d] += p * vr[d];
                }
            }
        }
    }

    if (tape.should_record({&q, &k, &v})) {
        out.set_requires_grad(true);
        Tensor tq = q, tk = k, tv = v;
        SparsePlan splan = plan;  // selection snapshot
        tape.record("sparse_attention", {q, k, v}, out, [=]() mutable {
            auto keys_of2 = [&](int64_t i, std::vector<int64_t>& o) {
                o.clear();
                if (i < ngrid) {
                    int64_t cid = splan.token_cube[static_cast<size_t>(i)];
                    for (int64_t kc : splan.selection[static_cast<size_t>(cid)]) {
                        const auto& toks = splan.cube_tokens[static_cast<size_t>(kc)];
                        o.insert(o.end(), toks.begin(), toks.end());
                    }
                } else {
                    for (int64_t j = 0; j < ngrid; ++j) o.push_back(j);
                }
                for (int64_t j = ngrid; j < n; ++j) o.push_back(j);
            };
            std::vector<int64_t> keys;
            std::vector<double> p, dp;
            const double* dy = out.grad();
            double* gq = tq.requires_grad() ? tq.grad() : nullptr;
            double* gk = tk.requires_grad() ? tk.grad() : nullptr;
            double* gv = tv.requires_grad() ? tv.grad() : nullptr;
            for (int64_t i = 0; i < n; ++i) {
                keys_of2(i, keys);
                p.resize(keys.size());
                dp.resize(keys.size());
                for (int64_t h = 0; h < heads; ++h) {
                    const double* qr = tq.data() + (i * heads + h) * hd;
                    double mx = -1e300;
                    for (size_t j = 0; j < keys.size(); ++j) {
                        const double* kr = tk.data() + (keys[j] * heads + h) * hd;
                        double dot = 0.0;
                        for (int64_t d = 0; d < hd; ++d) dot += qr[d] * kr[d];
                        p[j] = dot * scale;
                        mx = std::max(mx, p[j]);
                    }
                    double denom = 0.0;
                    for (double& l : p) {
                        l = std::exp(l - mx);
                        denom += l;
                    }
                    double inv = 1.0 / denom;
                    for (double& l : p) l *= inv;

                    const double* dyr = dy + (i * heads + h) * hd;
                    double dot_pdp = 0.0;
                    for (size_t j = 0; j < keys.size(); ++j) {
                        const double* vr = tv.data() + (keys[j] * heads + h) * hd;
                        double acc = 0.0;
                        for (int64_t d = 0; d < hd; ++d) acc += vr[d] * dyr[d];
                        dp[j] = acc;
                        dot_pdp += p[j] * acc;
                        if (gv) {
                            double* gvr = gv + (keys[j] * heads + h) * hd;
                            for (int64_t d = 0; d < hd; ++d) gvr[d] += p[j] * dyr[d];
                        }
                    }
                    for (size_t j = 0; j < keys.size(); ++j) {
                        double ds = p[j] * (dp[j] - dot_pdp) * scale;
                        const double* kr = tk.data() + (keys[j] * heads + h) * hd;
                        if (gq) {
                            double* gqr = gq + (i * heads + h) * hd;
                            for (int64_t d = 0; d < hd; ++d) gqr[d] += ds * kr[d];
                        }
                        if (gk) {
                            double* gkr = gk + (keys[j] * heads + h) * hd;
                            const double* qr2 = tq.data() + (i * heads + h) * hd;
                            for (int64_t d = 0; d < hd; ++d) gkr[d] += ds * qr2[d];
                        }
                    }
                }
            }
        });
    }
    return out;
}

FlopLedger flop_report(const SparsePlan& plan, int64_t head_count, int64_t head_dim) {
    if (plan.selection.empty()) throw UsageError("flop_report needs a populated selection");
    double D = static_cast<double>(head_count * head_dim);
    double n = static_cast<double>(plan.tokens());
    double c = static_cast<double>(plan.cube_count);
    FlopLedger ledger;
    ledger.dense_flops = 4.0 * n * n * D;
    double pair_area = 0.0;
    for (int64_t a = 0; a < plan.cube_count; ++a)
        for (int64_t b : plan.selection[static_cast<size_t>(a)])
            pair_area += static_cast<double>(plan.cube_tokens[static_cast<size_t>(a)].size()) *
                         static_cast<double>(plan.cube_tokens[static_cast<size_t>(b)].size());
    ledger.fine_flops = 4.0 * D * pair_area;
    ledger.coarse_flops = n * D + c * D + 2.0 * c * c * D;
    return ledger;
}

}  // namespace mmdit
