#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmdit/errors.hpp"
#include "mmdit/rng.hpp"

namespace mmdit {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense f64 tensor, row-major, with an optional gradient slot. Copies are
// shallow handles onto shared storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, CounterRng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int64_t dim(int axis) const;  // negative axis counts from the back
    int64_t numel() const;

    double* data();
    const double* data() const;
    std::vector<double>& vec();
    const std::vector<double>& vec() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);

    bool has_grad() const;
    double* grad();                    // allocates a zero slot on first use
    const double* grad() const;        // nullptr when absent
    std::vector<double> grad_vec() const;
    void zero_grad();

    double item() const;  // scalar tensors only
    Tensor clone(bool requires_grad = false) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    bool all_finite() const;

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until touched
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// One recorded primitive application. Creation order is topological order.
struct TapeNode {
    const char* rule = "";
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;  // pulls output.grad, accumulates into inputs
};

class Tape {
public:
    void record(const char* rule, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward);
    bool should_record(std::initializer_list<const Tensor*> inputs) const;

    // true (default) while gradients are being tracked
    bool recording() const { return recording_; }
    void set_recording(bool value) { recording_ = value; }

    size_t size() const { return nodes_.size(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }
    void clear() { nodes_.clear(); }

    void backward(const Tensor& loss);

private:
    std::vector<TapeNode> nodes_;
    bool recording_ = true;
};

// scoped recording off, e.g. around sampling loops
struct NoGradGuard {
    explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.recording()) { tape_.set_recording(false); }
    ~NoGradGuard() { tape_.set_recording(prev_); }
    Tape& tape_;
    bool prev_;
};

// ---- primitives ------------------------------------------------------------
// Each records itself on the tape when recording is on and any input requires
// grad. Elementwise binaries broadcast when one shape is a suffix of the other
// (leading-batch broadcast only).

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double s);
Tensor add_scalar(Tape& tape, const Tensor& a, double s);
Tensor neg(Tape& tape, const Tensor& a);
Tensor silu(Tape& tape, const Tensor& x);
Tensor gelu(Tape& tape, const Tensor& x);
Tensor softmax_lastdim(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);
Tensor permute(Tape& tape, const Tensor& x, const std::vector<int>& perm);
Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(Tape& tape, const Tensor& x, int axis, const std::vector<int64_t>& sizes);
Tensor sum_all(Tape& tape, const Tensor& x);
Tensor mean_all(Tape& tape, const Tensor& x);

void backward(Tape& tape, const Tensor& loss);

// Non-taped helpers for mask plumbing (masks never carry gradients).
Tensor expand_last(const Tensor& x, int64_t channels);  // [..,1] -> [..,c]
bool tensors_equal(const Tensor& a, const Tensor& b);   // bitwise, shape + data
double max_abs_diff(const Tensor& a, const Tensor& b);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued f. h must lie in (0, 1e-2].
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// MMDT_THREADS caps intra-primitive parallelism (default 1). Work is split
// over disjoint output rows only, so results are bit-identical to sequential.
int max_threads();
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace mmdit
