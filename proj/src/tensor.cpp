#include "mmdit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <sstream>
#include <thread>

namespace mmdit {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

static void check_shape_valid(const Shape& shape) {
    for (int64_t e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_valid(shape);
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape_valid(shape);
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(Shape shape, CounterRng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.impl_->data) v = rng.normal() * stddev;
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::dim(int axis) const {
    int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw UsageError("axis out of range for shape " + shape_str(shape()));
    return impl_->shape[axis];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }
std::vector<double>& Tensor::vec() { return impl_->data; }
const std::vector<double>& Tensor::vec() const { return impl_->data; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

double* Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad.data();
}

const double* Tensor::grad() const { return impl_->grad.empty() ? nullptr : impl_->grad.data(); }

std::vector<double> Tensor::grad_vec() const {
    if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone(bool requires_grad) const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = requires_grad;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- Tape ------------------------------------------------------------------

void Tape::record(const char* rule, std::vector<Tensor> inputs, Tensor output, std::function<void()> bw) {
    nodes_.push_back(TapeNode{rule, std::move(inputs), std::move(output), std::move(bw)});
}

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    Tensor seed = loss;
    seed.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;  // does not feed the loss
        it->backward();
    }
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

// ---- threading -------------------------------------------------------------

int max_threads() {
    static int n = [] {
        const char* env = std::getenv("MMDT_THREADS");
        if (!env) return 1;
        int v = std::atoi(env);
        return v > 0 ? v : 1;
    }();
    return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    int threads = max_threads();
    if (threads <= 1 || n < 2 * threads) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

// ---- broadcast helpers -----------------------------------------------------

// b broadcast over a's leading dims: b.shape must be a suffix of a.shape
static bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    size_t off = big.size() - small.size();
    for (size_t i = 0; i < small.size(); ++i)
        if (small[i] != big[off + i]) return false;
    return true;
}

struct BinArgs {
    Tensor big, small;
    bool swapped;  // small is the first operand
};

static BinArgs align_binary(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return {a, b, false};
    if (is_suffix(b.shape(), a.shape())) return {a, b, false};
    if (is_suffix(a.shape(), b.shape())) return {b, a, true};
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not broadcast (leading-batch only)");
}

// accumulate dy (shaped like big) into grad of small by summing leading dims
static void reduce_into_suffix(const double* dy, int64_t n_big, double* gsmall, int64_t n_small) {
    for (int64_t i = 0; i < n_big; ++i) gsmall[i % n_small] += dy[i];
}

// ---- elementwise binaries --------------------------------------------------

template <class Fwd, class BwdA, class BwdB>
static Tensor binary_op(Tape& tape, const char* rule, const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a,
                        BwdB bwd_b) {
    BinArgs ar = align_binary(rule, a, b);
    int64_t n = ar.big.numel(), m = ar.small.numel();
    Tensor out = Tensor::zeros(ar.big.shape());
    const double* pb = ar.big.data();
    const double* ps = ar.small.data();
    double* po = out.data();
    if (!ar.swapped) {
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pb[i], ps[i % m]);
    } else {
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(ps[i % m], pb[i]);
    }
    if (tape.should_record({&a, &b})) {
        out.set_requires_grad(true);
        Tensor big = ar.big, small = ar.small;
        bool swapped = ar.swapped;
        tape.record(rule, {a, b}, out, [=]() mutable {
            const double* dy = out.grad();
            int64_t nn = big.numel(), mm = small.numel();
            if (big.requires_grad()) {
                double* g = big.grad();
                for (int64_t i = 0; i < nn; ++i)
                    g[i] += swapped ? bwd_b(small.data()[i % mm], big.data()[i], dy[i])
                                    : bwd_a(big.data()[i], small.data()[i % mm], dy[i]);
            }
            if (small.requires_grad()) {
                std::vector<double> tmp(static_cast<size_t>(nn));
                for (int64_t i = 0; i < nn; ++i)
                    tmp[static_cast<size_t>(i)] = swapped ? bwd_a(small.data()[i % mm], big.data()[i], dy[i])
                                                          : bwd_b(big.data()[i], small.data()[i % mm], dy[i]);
                reduce_into_suffix(tmp.data(), nn, small.grad(), mm);
            }
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double dy) { return dy; }, [](double, double, double dy) { return dy; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double dy) { return dy; }, [](double, double, double dy) { return -dy; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double dy) { return dy * y; }, [](double x, double, double dy) { return dy * x; });
}

// ---- elementwise unaries ---------------------------------------------------

template <class Fwd, class Bwd>
static Tensor unary_op(Tape& tape, const char* rule, const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    int64_t n = x.numel();
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (tape.should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xin = x;
        tape.record(rule, {x}, out, [=]() mutable {
            const double* dy = out.grad();
            double* g = xin.grad();
            for (int64_t i = 0; i < n; ++i) g[i] += bwd(xin.data()[i], dy[i]);
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double s) {
    return unary_op(
        tape, "scale", a, [s](double x) { return x * s; }, [s](double, double dy) { return dy * s; });
}

Tensor add_scalar(Tape& tape, const Tensor& a, double s) {
    return unary_op(
        tape, "add_scalar", a, [s](double x) { return x + s; }, [](double, double dy) { return dy; });
}

Tensor neg(Tape& tape, const Tensor& a) {
    return unary_op(
        tape, "neg", a, [](double x) { return -x; }, [](double, double dy) { return -dy; });
}

Tensor silu(Tape& tape, const Tensor& x) {
    return unary_op(
        tape, "silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double dy) {
            double s = 1.0 / (1.0 + std::exp(-v));
            return dy * (s + v * s * (1.0 - s));
        });
}

Tensor gelu(Tape& tape, const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        tape, "gelu", x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](double v, double dy) {
            double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            return dy * (phi + v * pdf);
        });
}

// ---- matmul ----------------------------------------------------------------

static Shape batch_dims(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul needs rank >= 2, got " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    int64_t m = a.dim(-2), k = a.dim(-1);
    int64_t k2 = b.dim(-2), n = b.dim(-1);
    if (k != k2)
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    Shape ba = batch_dims(a.shape()), bb = batch_dims(b.shape());
    if (!ba.empty() && !bb.empty() && ba != bb)
        throw ShapeError("matmul batch extents differ: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    Shape batch = ba.empty() ? bb : ba;
    int64_t nb = shape_numel(batch);

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);

    const bool a_batched = !ba.empty();
    const bool b_batched = !bb.empty();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();

    parallel_for(nb * m, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            int64_t batch_i = r / m, i = r % m;
            const double* arow = pa + (a_batched ? batch_i * m * k : 0) + i * k;
            const double* bmat = pb + (b_batched ? batch_i * k * n : 0);
            double* orow = po + batch_i * m * n + i * n;
            for (int64_t kk = 0; kk < k; ++kk) {
                double av = arow[kk];
                const double* brow = bmat + kk * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });

    if (tape.should_record({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ta = a, tb = b;
        tape.record("matmul", {a, b}, out, [=]() mutable {
            const double* dy = out.grad();
            if (ta.requires_grad()) {
                double* ga = ta.grad();
                for (int64_t bi = 0; bi < nb; ++bi) {
                    const double* dyb = dy + bi * m * n;
                    const double* bm = tb.data() + (b_batched ? bi * k * n : 0);
                    double* gab = ga + (a_batched ? bi * m * k : 0);
                    // dA += dY @ B^T
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            const double* dyr = dyb + i * n;
                            const double* br = bm + kk * n;
                            for (int64_t j = 0; j < n; ++j) acc += dyr[j] * br[j];
                            gab[i * k + kk] += acc;
                        }
                }
            }
            if (tb.requires_grad()) {
                double* gb = tb.grad();
                for (int64_t bi = 0; bi < nb; ++bi) {
                    const double* dyb = dy + bi * m * n;
                    const double* am = ta.data() + (a_batched ? bi * m * k : 0);
                    double* gbb = gb + (b_batched ? bi * k * n : 0);
                    // dB += A^T @ dY
                    for (int64_t i = 0; i < m; ++i) {
                        const double* ar = am + i * k;
                        const double* dyr = dyb + i * n;
                        for (int64_t kk = 0; kk < k; ++kk) {
                            double av = ar[kk];
                            double* gr = gbb + kk * n;
                            for (int64_t j = 0; j < n; ++j) gr[j] += av * dyr[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = px + r * d;
        double* o = po + r * d;
        double mx = in[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        double inv = 1.0 / sum;
        for (int64_t j = 0; j < d; ++j) o[j] *= inv;
    }
    if (tape.should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xin = x;
        tape.record("softmax_lastdim", {x}, out, [=]() mutable {
            const double* p = out.data();
            const double* dy = out.grad();
            double* g = xin.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* pr = p + r * d;
                const double* dyr = dy + r * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += pr[j] * dyr[j];
                double* gr = g + r * d;
                for (int64_t j = 0; j < d; ++j) gr[j] += pr[j] * (dyr[j] - dot);
            }
        });
    }
    return out;
}

// ---- layer norm ------------------------------------------------------------

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ParamError("layer_norm eps must be positive, got " + std::to_string(eps));
    int64_t d = x.dim(-1);
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " must match last extent of " + shape_str(x.shape()));
    int64_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = px + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = in[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + eps);
        mean[static_cast<size_t>(r)] = mu;
        rstd[static_cast<size_t>(r)] = rs;
        double* o = po + r * d;
        for (int64_t j = 0; j < d; ++j) o[j] = (in[j] - mu) * rs * pg[j] + pb[j];
    }
    if (tape.should_record({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        Tensor xin = x, gin = gain, bin = bias;
        tape.record("layer_norm", {x, gain, bias}, out, [=]() mutable {
            const double* dy = out.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* in = xin.data() + r * d;
                const double* dyr = dy + r * d;
                double mu = mean[static_cast<size_t>(r)];
                double rs = rstd[static_cast<size_t>(r)];
                if (gin.requires_grad()) {
                    double* gg = gin.grad();
                    for (int64_t j = 0; j < d; ++j) gg[j] += dyr[j] * (in[j] - mu) * rs;
                }
                if (bin.requires_grad()) {
                    double* gb = bin.grad();
                    for (int64_t j = 0; j < d; ++j) gb[j] += dyr[j];
                }
                if (xin.requires_grad()) {
                    // dxhat = dy * gain; dx = rs*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        double xh = (in[j] - mu) * rs;
                        double dxh = dyr[j] * gin.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    double invd = 1.0 / static_cast<double>(d);
                    double* gx = xin.grad();
                    for (int64_t j = 0; j < d; ++j) {
                        double xh = (in[j] - mu) * rs;
                        double dxh = dyr[j] * gin.data()[j];
                        gx[r * d + j] += rs * (dxh - invd * sum_dxh - xh * invd * sum_dxh_xh);
                    }
                }
            }
        });
    }
    return out;
}

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) + " changes element count");
    Tensor out = Tensor::from_data(std::move(new_shape), x.vec());
    if (tape.should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xin = x;
        tape.record("reshape", {x}, out, [=]() mutable {
            const double* dy = out.grad();
            double* g = xin.grad();
            int64_t n = xin.numel();
            for (int64_t i = 0; i < n; ++i) g[i] += dy[i];
        });
    }
    return out;
}

static std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

static void permute_copy(const double* src, double* dst, const Shape& in_shape, const std::vector<int>& perm) {
    int r = static_cast<int>(in_shape.size());
    auto in_strides = strides_of(in_shape);
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[i])];
    auto out_strides = strides_of(out_shape);
    int64_t n = shape_numel(in_shape);
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    for (int64_t lin = 0; lin < n; ++lin) {
        int64_t rem = lin;
        int64_t dst_off = 0;
        for (int i = 0; i < r; ++i) {
            int64_t coord = rem / in_strides[static_cast<size_t>(i)];
            rem %= in_strides[static_cast<size_t>(i)];
            // coordinate i of input becomes coordinate position j with perm[j]==i
            idx[static_cast<size_t>(i)] = coord;
        }
        for (int j = 0; j < r; ++j) dst_off += idx[static_cast<size_t>(perm[j])] * out_strides[static_cast<size_t>(j)];
        dst[dst_off] = src[lin];
    }
}

Tensor permute(Tape& tape, const Tensor& x, const std::vector<int>& perm) {
    int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw UsageError("permute order must name every axis once");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        if (perm[i] < 0 || perm[i] >= r || seen[static_cast<size_t>(perm[i])])
            throw UsageError("permute order must name every axis once");
        seen[static_cast<size_t>(perm[i])] = true;
        out_shape[static_cast<size_t>(i)] = x.dim(perm[i]);
    }
    Tensor out = Tensor::zeros(out_shape);
    permute_copy(x.data(), out.data(), x.shape(), perm);
    if (tape.should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xin = x;
        std::vector<int> inv(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) inv[static_cast<size_t>(perm[i])] = i;
        Shape oshape = out_shape;
        tape.record("permute", {x}, out, [=]() mutable {
            std::vector<double> tmp(static_cast<size_t>(xin.numel()));
            permute_copy(out.grad(), tmp.data(), oshape, inv);
            double* g = xin.grad();
            for (int64_t i = 0; i < xin.numel(); ++i) g[i] += tmp[static_cast<size_t>(i)];
        });
    }
    return out;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw UsageError("concat of zero tensors");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw UsageError("concat axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != r) throw ShapeError("concat rank mismatch: " + shape_str(p.shape()));
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                                 " differ off-axis");
        total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape);

    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

    double* po = out.data();
    int64_t row_out = total * inner;
    int64_t off = 0;
    for (const Tensor& p : parts) {
        int64_t len = p.dim(axis) * inner;
        const double* ps = p.data();
        for (int64_t o = 0; o < outer; ++o) std::memcpy(po + o * row_out + off, ps + o * len, sizeof(double) * static_cast<size_t>(len));
        off += len;
    }

    bool rec = tape.recording();
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (rec && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> ins = parts;
        tape.record("concat", ins, out, [=]() mutable {
            const double* dy = out.grad();
            int64_t o2 = 0;
            for (Tensor& p : ins) {
                int64_t len = p.dim(axis) * inner;
                if (p.requires_grad()) {
                    double* g = p.grad();
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < len; ++i) g[o * len + i] += dy[o * row_out + o2 + i];
                }
                o2 += len;
            }
        });
    }
    return out;
}

std::vector<Tensor> split(Tape& tape, const Tensor& x, int axis, const std::vector<int64_t>& sizes) {
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw UsageError("split axis out of range");
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    if (total != x.dim(axis))
        throw ShapeError("split sizes sum to " + std::to_string(total) + " but axis extent is " +
                         std::to_string(x.dim(axis)) + " in " + shape_str(x.shape()));

    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    int64_t row_in = x.dim(axis) * inner;

    std::vector<Tensor> outs;
    int64_t off = 0;
    for (int64_t s : sizes) {
        Shape sh = x.shape();
        sh[static_cast<size_t>(axis)] = s;
        Tensor part = Tensor::zeros(sh);
        int64_t len = s * inner;
        double* pd = part.data();
        const double* ps = x.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(pd + o * len, ps + o * row_in + off, sizeof(double) * static_cast<size_t>(len));
        if (tape.should_record({&x})) {
            part.set_requires_grad(true);
            Tensor xin = x;
            int64_t offc = off;
            tape.record("split", {x}, part, [=]() mutable {
                const double* dy = part.grad();
                double* g = xin.grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < len; ++i) g[o * row_in + offc + i] += dy[o * len + i];
            });
        }
        outs.push_back(part);
        off += s * inner;
    }
    return outs;
}

// ---- reductions --------------------------------------------------------------

Tensor sum_all(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    const double* px = x.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = Tensor::scalar(acc);
    if (tape.should_record({&x})) {
        out.set_requires_grad(true);
        Tensor xin = x;
        tape.record("sum_all", {x}, out, [=]() mutable {
            double dy = out.grad()[0];
            double* g = xin.grad();
            for (int64_t i = 0; i < n; ++i) g[i] += dy;
        });
    }
    return out;
}

Tensor mean_all(Tape& tape, const Tensor& x) {
    int64_t n = x.numel();
    Tensor s = sum_all(tape, x);
    return scale(tape, s, 1.0 / static_cast<double>(n));
}

// ---- helpers ---------------------------------------------------------------

Tensor expand_last(const Tensor& x, int64_t channels) {
    if (x.dim(-1) != 1) throw ShapeError("expand_last expects trailing extent 1, got " + shape_str(x.shape()));
    Shape sh = x.shape();
    sh.back() = channels;
    Tensor out = Tensor::zeros(sh);
    const double* px = x.data();
    double* po = out.data();
    int64_t rows = x.numel();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < channels; ++c) po[r * channels + c] = px[r];
    return out;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// ---- gradient checking -------------------------------------------------------

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0 && h <= 1e-2)) throw ParamError("grad_check h must lie in (0, 1e-2], got " + std::to_string(h));

    Tensor probe = x.clone(/*requires_grad=*/true);
    Tape tape;
    Tensor loss = f(tape, probe);
    if (loss.numel() != 1) throw UsageError("grad_check requires a scalar-valued function");
    if (!loss.all_finite()) throw NumericalError("grad_check: non-finite loss value");
    tape.backward(loss);
    std::vector<double> analytic = probe.grad_vec();

    auto eval = [&](const Tensor& pt) {
        Tape t;
        t.set_recording(false);
        double v = f(t, pt).item();
        if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite intermediate value");
        return v;
    };

    double worst = 0.0;
    Tensor pt = x.clone();
    for (int64_t i = 0; i < x.numel(); ++i) {
        double orig = pt.data()[i];
        pt.data()[i] = orig + h;
        double fp = eval(pt);
        pt.data()[i] = orig - h;
        double fm = eval(pt);
        pt.data()[i] = orig;
        double fd = (fp - fm) / (2.0 * h);
        double a = analytic[static_cast<size_t>(i)];
        double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace mmdit
