#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmdit/tensor.hpp"

using namespace mmdit;

namespace {

// naive triple-loop oracle, independent of the matmul implementation path
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a.data()[i * k + kk] * b.data()[kk * n + j];
            out.data()[i * n + j] = acc;
        }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
    Tape t;
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    CHECK(tensors_equal(matmul(t, eye, b), b));

    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor c = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(t, a, c).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul matches triple-loop oracle") {
    CounterRng rng(42);
    Tape t;
    for (int s = 0; s < 5; ++s) {
        Tensor a = Tensor::randn({4, 3}, rng);
        Tensor b = Tensor::randn({3, 5}, rng);
        CHECK(max_abs_diff(matmul(t, a, b), matmul_oracle(a, b)) < 1e-12);
    }
    // shapes up to 8x8x8
    for (int s = 0; s < 5; ++s) {
        Tensor a = Tensor::randn({8, 8}, rng);
        Tensor b = Tensor::randn({8, 8}, rng);
        CHECK(max_abs_diff(matmul(t, a, b), matmul_oracle(a, b)) < 1e-12);
    }
}

TEST_CASE("matmul shape errors name both shapes") {
    Tape t;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(t, a, b), doctest::Contains("[2,3]"), ShapeError);
    CHECK_THROWS_WITH_AS(matmul(t, a, b), doctest::Contains("[4,2]"), ShapeError);
}

TEST_CASE("batched matmul broadcasts an unbatched operand") {
    CounterRng rng(7);
    Tape t;
    Tensor a = Tensor::randn({3, 4, 5}, rng);
    Tensor w = Tensor::randn({5, 2}, rng);
    Tensor out = matmul(t, a, w);
    CHECK(out.shape() == Shape{3, 4, 2});
    for (int64_t bi = 0; bi < 3; ++bi) {
        Tensor slice = Tensor::zeros({4, 5});
        std::copy(a.data() + bi * 20, a.data() + (bi + 1) * 20, slice.data());
        Tensor ref = matmul_oracle(slice, w);
        for (int64_t i = 0; i < 8; ++i) CHECK(out.data()[bi * 8 + i] == doctest::Approx(ref.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("softmax rows") {
    Tape t;
    Tensor z = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor s = softmax_lastdim(t, z);
    for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    // stability under large logits
    Tensor big = Tensor::from_data({1, 2}, {1000, 0});
    Tensor sb = softmax_lastdim(t, big);
    CHECK(std::abs(sb.data()[0] - 1.0) < 1e-12);
    CHECK(std::abs(sb.data()[1]) < 1e-12);

    // direct exp/sum oracle
    Tensor x = Tensor::from_data({1, 3}, {1, 2, 3});
    Tensor sx = softmax_lastdim(t, x);
    double den = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(sx.data()[i] - std::exp(1.0 + i) / den) < 1e-12);

    // rows sum to 1
    CounterRng rng(1);
    Tensor r = Tensor::randn({6, 9}, rng, 3.0);
    Tensor sr = softmax_lastdim(t, r);
    for (int64_t row = 0; row < 6; ++row) {
        double sum = 0;
        for (int64_t j = 0; j < 9; ++j) sum += sr.data()[row * 9 + j];
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("layer_norm examples") {
    Tape t;
    Tensor gain = Tensor::from_data({3}, {1, 1, 1});
    Tensor bias = Tensor::from_data({3}, {0, 0, 0});

    Tensor constant = Tensor::from_data({1, 3}, {5, 5, 5});
    Tensor yc = layer_norm(t, constant, gain, bias, 1e-6);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(yc.data()[i]) < 1e-9);

    Tensor two = Tensor::from_data({1, 2}, {1, 3});
    Tensor g2 = Tensor::from_data({2}, {1, 1});
    Tensor b2 = Tensor::from_data({2}, {0, 0});
    Tensor y2 = layer_norm(t, two, g2, b2, 1e-14);
    CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-6));

    // random row against direct mean/variance oracle
    CounterRng rng(3);
    Tensor x = Tensor::randn({1, 8}, rng, 2.0);
    Tensor g8 = Tensor::full({8}, 1.0);
    Tensor b8 = Tensor::zeros({8});
    Tensor y = layer_norm(t, x, g8, b8, 1e-12);
    double mu = 0, var = 0;
    for (int i = 0; i < 8; ++i) mu += x.data()[i];
    mu /= 8;
    for (int i = 0; i < 8; ++i) var += (x.data()[i] - mu) * (x.data()[i] - mu);
    var /= 8;
    for (int i = 0; i < 8; ++i)
        CHECK(std::abs(y.data()[i] - (x.data()[i] - mu) / std::sqrt(var + 1e-12)) < 1e-10);

    // normalized rows have zero mean / unit variance
    double m2 = 0, v2 = 0;
    for (int i = 0; i < 8; ++i) m2 += y.data()[i];
    for (int i = 0; i < 8; ++i) v2 += y.data()[i] * y.data()[i];
    CHECK(std::abs(m2 / 8) < 1e-10);
    CHECK(std::abs(v2 / 8 - 1.0) < 1e-10);

    CHECK_THROWS_AS(layer_norm(t, x, g8, b8, 0.0), ParamError);
    CHECK_THROWS_AS(layer_norm(t, x, g8, b8, -1.0), ParamError);
}

TEST_CASE("backward basics") {
    {
        Tape t;
        Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, /*requires_grad=*/true);
        Tensor loss = sum_all(t, x);
        backward(t, loss);
        for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);
    }
    {
        Tape t;
        Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
        Tensor loss = sum_all(t, mul(t, x, x));
        backward(t, loss);
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
        CHECK(x.grad()[2] == 6.0);
    }
    {
        Tape t;
        Tensor x = Tensor::zeros({2, 2}, true);
        CHECK_THROWS_AS(backward(t, x), UsageError);
    }
}

TEST_CASE("grad_check on simple functions") {
    CounterRng rng(11);
    Tensor x = Tensor::randn({2, 4}, rng);

    auto f_sum = [](Tape& t, const Tensor& v) { return sum_all(t, v); };
    CHECK(grad_check(f_sum, x, 1e-5) < 1e-10);

    // sum of softmax is constant 1 per row: analytic grad ~ 0
    auto f_softmax_sum = [](Tape& t, const Tensor& v) { return sum_all(t, softmax_lastdim(t, v)); };
    CHECK(grad_check(f_softmax_sum, x, 1e-5) < 1e-8);

    CHECK_THROWS_AS(grad_check(f_sum, x, 0.0), ParamError);
    CHECK_THROWS_AS(grad_check(f_sum, x, 0.5), ParamError);
}

TEST_CASE("grad_check every registered primitive") {
    // spec invariant: 20 seeds per primitive, max relative error < 1e-4 at h=1e-5
    struct Probe {
        const char* name;
        std::function<Tensor(Tape&, const Tensor&)> f;
        Shape shape;
    };
    CounterRng aux_rng(999);
    Tensor aux23 = Tensor::randn({2, 3}, aux_rng);
    Tensor aux34 = Tensor::randn({3, 4}, aux_rng);
    Tensor gain = Tensor::randn({4}, aux_rng);
    Tensor bias = Tensor::randn({4}, aux_rng);

    std::vector<Probe> probes = {
        {"matmul_lhs", [&](Tape& t, const Tensor& v) { return sum_all(t, matmul(t, v, aux34)); }, {2, 3}},
        {"matmul_rhs", [&](Tape& t, const Tensor& v) { return sum_all(t, matmul(t, aux23, v)); }, {3, 4}},
        {"add", [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, add(t, v, aux23), add(t, v, v))); }, {2, 3}},
        {"sub", [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, sub(t, v, aux23), v)); }, {2, 3}},
        {"mul_bcast", [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, aux23, v)); }, {3}},
        {"scale", [&](Tape& t, const Tensor& v) { return sum_all(t, scale(t, mul(t, v, v), -2.5)); }, {2, 3}},
        {"neg", [&](Tape& t, const Tensor& v) { return sum_all(t, neg(t, mul(t, v, v))); }, {2, 3}},
        {"silu", [&](Tape& t, const Tensor& v) { return sum_all(t, silu(t, v)); }, {2, 3}},
        {"gelu", [&](Tape& t, const Tensor& v) { return sum_all(t, gelu(t, v)); }, {2, 3}},
        {"softmax", [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, softmax_lastdim(t, v), aux23)); }, {2, 3}},
        {"layer_norm_x",
         [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, layer_norm(t, v, gain, bias, 1e-5), v)); },
         {2, 4}},
        {"layer_norm_gain",
         [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, layer_norm(t, aux34, v, bias, 1e-5), aux34)); },
         {4}},
        {"reshape", [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, reshape(t, v, {3, 2}), reshape(t, v, {3, 2}))); }, {2, 3}},
        {"permute",
         [&](Tape& t, const Tensor& v) { return sum_all(t, mul(t, permute(t, v, {1, 0}), permute(t, v, {1, 0}))); },
         {2, 3}},
        {"concat",
         [&](Tape& t, const Tensor& v) {
             Tensor c = concat(t, {v, aux23}, 0);
             return sum_all(t, mul(t, c, c));
         },
         {2, 3}},
        {"split",
         [&](Tape& t, const Tensor& v) {
             auto parts = split(t, v, 1, {1, 2});
             return sum_all(t, mul(t, parts[1], parts[1]));
         },
         {2, 3}},
        {"mean_all", [&](Tape& t, const Tensor& v) { return mean_all(t, mul(t, v, v)); }, {2, 3}},
    };

    for (const auto& p : probes) {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            CounterRng rng(1000 + seed);
            Tensor x = Tensor::randn(p.shape, rng);
            double err = grad_check(p.f, x, 1e-5);
            INFO(p.name << " seed " << seed);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("concat and split round-trip") {
    CounterRng rng(5);
    Tape t;
    Tensor a = Tensor::randn({2, 3, 4}, rng);
    auto parts = split(t, a, 2, {1, 3});
    Tensor back = concat(t, parts, 2);
    CHECK(tensors_equal(a, back));
}

TEST_CASE("broadcast add bias over rows") {
    Tape t;
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2}, {10, 20});
    Tensor y = add(t, x, b);
    CHECK(y.data()[0] == 11);
    CHECK(y.data()[1] == 22);
    CHECK(y.data()[2] == 13);
    CHECK(y.data()[3] == 24);
    Tensor bad = Tensor::zeros({3});
    CHECK_THROWS_AS(add(t, x, bad), ShapeError);
}

TEST_CASE("tape replay determinism") {
    auto run = [] {
        CounterRng rng(77);
        Tape t;
        Tensor w = Tensor::randn({4, 4}, rng, 0.5, true);
        Tensor x = Tensor::randn({3, 4}, rng);
        Tensor h = gelu(t, matmul(t, x, w));
        Tensor loss = mean_all(t, mul(t, h, h));
        backward(t, loss);
        std::vector<double> bits(w.grad(), w.grad() + 16);
        bits.push_back(loss.item());
        return bits;
    };
    CHECK(run() == run());
}

TEST_CASE("primitives keep finite values finite") {
    CounterRng rng(13);
    Tape t;
    Tensor x = Tensor::randn({4, 6}, rng, 50.0);
    CHECK(softmax_lastdim(t, x).all_finite());
    CHECK(silu(t, x).all_finite());
    CHECK(gelu(t, x).all_finite());
    Tensor g = Tensor::full({6}, 1.0), b = Tensor::zeros({6});
    CHECK(layer_norm(t, x, g, b, 1e-6).all_finite());
}

TEST_CASE("no-grad tape records nothing") {
    CounterRng rng(1);
    Tape t;
    t.set_recording(false);
    Tensor x = Tensor::randn({2, 2}, rng, 1.0, true);
    Tensor y = mul(t, x, x);
    CHECK(t.size() == 0);
    CHECK_FALSE(y.requires_grad());
}
