#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmdit/rope.hpp"

using namespace mmdit;

namespace {

double pair_norm(const Tensor& x, int64_t token, int64_t head, int64_t pair) {
    int64_t hd = x.dim(2);
    const double* p = x.data() + (token * x.dim(1) + head) * hd + 2 * pair;
    return std::hypot(p[0], p[1]);
}

double dot_tokens(const Tensor& a, int64_t ia, const Tensor& b, int64_t ib) {
    int64_t w = a.dim(1) * a.dim(2);
    double acc = 0;
    for (int64_t i = 0; i < w; ++i) acc += a.data()[ia * w + i] * b.data()[ib * w + i];
    return acc;
}

RopePlan temporal_plan(int64_t head_dim, std::vector<int64_t> t_indices, double scale = 1.0) {
    RopePlan p;
    p.head_dim = head_dim;
    p.axis_split = default_axis_split(head_dim);
    p.temporal_scale = scale;
    for (int64_t t : t_indices) p.indices.push_back({t, 0, 0});
    p.validate();
    return p;
}

}  // namespace

TEST_CASE("audio_scale_factor") {
    CHECK(std::abs(audio_scale_factor(21, 218) - 0.09633) < 5e-5);
    CHECK(audio_scale_factor(7, 7) == 1.0);
    CHECK_THROWS_AS(audio_scale_factor(0, 5), ParamError);
    CHECK_THROWS_AS(audio_scale_factor(5, 0), ParamError);
}

TEST_CASE("condition_offset_indices") {
    CHECK(condition_offset_indices({1}) == std::vector<int64_t>{-1});
    CHECK(condition_offset_indices({2, 3}) == std::vector<int64_t>{-5, -4, -3, -2, -1});
    CHECK(condition_offset_indices({1, 1, 1}) == std::vector<int64_t>{-3, -2, -1});
    CHECK(condition_offset_indices({}).empty());
    CHECK_THROWS_AS(condition_offset_indices({0}), ParamError);
}

TEST_CASE("default_axis_split is even and sums to head_dim") {
    for (int64_t hd : {8, 12, 16, 24, 32, 64}) {
        auto s = default_axis_split(hd);
        CHECK(s[0] + s[1] + s[2] == hd);
        CHECK(s[0] % 2 == 0);
        CHECK(s[1] % 2 == 0);
        CHECK(s[2] % 2 == 0);
        CHECK(s[0] >= s[1]);  // temporal dominance
    }
    auto s16 = default_axis_split(16);
    CHECK(s16 == std::array<int64_t, 3>{8, 4, 4});
}

TEST_CASE("zero index is identity rotation") {
    CounterRng rng(2);
    Tape tape;
    Tensor x = Tensor::randn({1, 2, 16}, rng);
    RopePlan plan = make_identity_plan(16, 1);
    Tensor y = apply_rope(tape, x, plan);
    CHECK(tensors_equal(x, y));
}

TEST_CASE("norm preservation per 2-subspace") {
    CounterRng rng(3);
    Tape tape;
    Tensor x = Tensor::randn({6, 2, 16}, rng);
    RopePlan plan = make_video_plan(16, 6, 1, 1);
    Tensor y = apply_rope(tape, x, plan);
    for (int64_t t = 0; t < 6; ++t)
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t p = 0; p < 8; ++p)
                CHECK(std::abs(pair_norm(x, t, h, p) - pair_norm(y, t, h, p)) < 1e-12);
}

TEST_CASE("relative position property on pure-temporal indices") {
    CounterRng rng(4);
    Tape tape;
    Tensor q = Tensor::randn({1, 1, 8}, rng);
    Tensor k = Tensor::randn({1, 1, 8}, rng);
    // brute force over index pairs in [-4,4]: dot depends only on (a-b)
    std::vector<std::vector<double>> by_delta(17);
    for (int64_t a = -4; a <= 4; ++a)
        for (int64_t b = -4; b <= 4; ++b) {
            Tensor qa = apply_rope(tape, q, temporal_plan(8, {a}));
            Tensor kb = apply_rope(tape, k, temporal_plan(8, {b}));
            by_delta[static_cast<size_t>(a - b + 8)].push_back(dot_tokens(qa, 0, kb, 0));
        }
    for (const auto& bucket : by_delta)
        for (double v : bucket) CHECK(std::abs(v - bucket.front()) < 1e-10);
}

TEST_CASE("relative position invariance under common shift on a 5x5 grid") {
    CounterRng rng(5);
    Tape tape;
    Tensor q = Tensor::randn({1, 2, 16}, rng);
    Tensor k = Tensor::randn({1, 2, 16}, rng);
    for (int64_t a = 0; a < 5; ++a)
        for (int64_t b = 0; b < 5; ++b) {
            double base_dot = dot_tokens(apply_rope(tape, q, temporal_plan(16, {a})), 0,
                                         apply_rope(tape, k, temporal_plan(16, {b})), 0);
            for (int64_t shift : {-3, 1, 7}) {
                double shifted = dot_tokens(apply_rope(tape, q, temporal_plan(16, {a + shift})), 0,
                                            apply_rope(tape, k, temporal_plan(16, {b + shift})), 0);
                CHECK(std::abs(base_dot - shifted) < 1e-10);
            }
        }
}

TEST_CASE("audio scaling aligns integral scaled indices with video frames") {
    double s = audio_scale_factor(21, 218);
    CounterRng rng(6);
    Tape tape;
    Tensor x = Tensor::randn({1, 1, 8}, rng);
    // audio token index 218*m/21 integral for m = 21: token 218 matches video frame 21
    Tensor audio = apply_rope(tape, x, temporal_plan(8, {218}, s));
    Tensor video = apply_rope(tape, x, temporal_plan(8, {21}, 1.0));
    CHECK(max_abs_diff(audio, video) < 1e-10);

    // direct angle oracle for the scaled index
    RopePlan p = temporal_plan(8, {218}, s);
    std::vector<double> c, sn;
    p.angles(0, c, sn);
    auto split = default_axis_split(8);
    for (int64_t k = 0; k < split[0] / 2; ++k) {
        double theta = 218.0 * s * std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(split[0]));
        CHECK(std::abs(c[static_cast<size_t>(k)] - std::cos(theta)) < 1e-12);
        CHECK(std::abs(sn[static_cast<size_t>(k)] - std::sin(theta)) < 1e-12);
    }
}

TEST_CASE("offset disambiguation: condition angles never collide with generated frames") {
    // brute force T <= 32, N_cond <= 8 on the first temporal frequency (freq = 1)
    for (int64_t ncond = 1; ncond <= 8; ++ncond) {
        auto cond = condition_offset_indices(std::vector<int64_t>(static_cast<size_t>(ncond), 1));
        for (int64_t T : {2, 8, 32}) {
            for (int64_t ct : cond)
                for (int64_t t = 0; t < T; ++t) {
                    double a = static_cast<double>(ct), b = static_cast<double>(t);
                    // identical rotations require equal angle mod 2*pi
                    double d = std::remainder(a - b, 2.0 * 3.14159265358979323846);
                    CHECK(std::abs(d) > 1e-6);
                }
        }
    }
}

TEST_CASE("plan invariant violations throw") {
    RopePlan p;
    p.head_dim = 7;
    CHECK_THROWS_AS(p.validate(), ParamError);
    p.head_dim = 8;
    p.axis_split = {4, 2, 0};
    CHECK_THROWS_AS(p.validate(), ParamError);  // sums to 6
    p.axis_split = {4, 2, 2};
    p.temporal_scale = 0.0;
    CHECK_THROWS_AS(p.validate(), ParamError);
}

TEST_CASE("token count mismatch throws shape error") {
    Tape tape;
    CounterRng rng(7);
    Tensor x = Tensor::randn({3, 1, 8}, rng);
    RopePlan plan = make_identity_plan(8, 2);
    CHECK_THROWS_AS(apply_rope(tape, x, plan), ShapeError);
}

TEST_CASE("video plan with references puts negative frames first, spatial grid preserved") {
    RopePlan plan = make_video_plan(16, 2, 2, 2, {1});
    CHECK(plan.tokens() == 12);
    CHECK(plan.indices[0].t == -1);
    CHECK(plan.indices[3].t == -1);
    CHECK(plan.indices[4].t == 0);
    CHECK(plan.indices[11].t == 1);
    // condition tokens index the same (h, w) grid as generated tokens
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(plan.indices[static_cast<size_t>(i)].h == plan.indices[static_cast<size_t>(4 + i)].h);
        CHECK(plan.indices[static_cast<size_t>(i)].w == plan.indices[static_cast<size_t>(4 + i)].w);
    }
}
