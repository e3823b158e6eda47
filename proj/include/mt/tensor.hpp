#pragma once

#include "mt/errors.hpp"
#include "mt/rng.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mt {

// Dense row-major 64-bit tensor, rank 1 or 2. Values are immutable once an op
// has consumed them; grads accumulate during backward. Slices copy.
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad; // allocated on first touch during backward
    bool requires_grad = false;
    int param_slot = -1; // >= 0 when owned by a ParamSet
    std::string name;    // diagnostics; set for parameters

    size_t numel() const {
        size_t n = 1;
        for (int s : shape) n *= static_cast<size_t>(s);
        return n;
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor make(std::vector<int> shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    static Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng,
                               bool requires_grad = true);

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    size_t numel() const { return n_->numel(); }
    int rows() const;
    int cols() const;

    const std::vector<double>& values() const { return n_->values; }
    std::vector<double>& mutable_values() { return n_->values; }
    double value_at(size_t i) const { return n_->values[i]; }
    double scalar_value() const;

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }
    const std::vector<double>& grad() const;
    void zero_grad();

    std::shared_ptr<TensorNode> node() const { return n_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
    std::shared_ptr<TensorNode> n_;
};

// ---------------------------------------------------------------------------
// Tape: the record of primitive ops in execution (hence topological) order.
// One tape per thread of training; backward replays it in reverse and then
// clears it.
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        records_.push_back(std::move(backward_fn));
    }
    size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    void run_reverse_and_clear();

private:
    std::vector<std::function<void()>> records_;
};

// RAII activation of a tape on the current thread. Ops record themselves when
// a tape is active and any input requires grad.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

Tape* active_tape();

// Redirects gradient accumulation for parameter tensors (param_slot >= 0)
// into caller-owned buffers, so parallel windows can share read-only
// parameters without racing on their grads.
class GradSinkScope {
public:
    explicit GradSinkScope(std::vector<std::vector<double>>* slots);
    ~GradSinkScope();
    GradSinkScope(const GradSinkScope&) = delete;
    GradSinkScope& operator=(const GradSinkScope&) = delete;

private:
    std::vector<std::vector<double>>* prev_;
};

// Grad storage for a node, honouring the active sink. Allocates zero-filled
// on first touch.
double* grad_buffer(TensorNode* n);

// ---------------------------------------------------------------------------
// Primitive ops. All throw DimensionError naming the op on shape mismatch.
// Binary elementwise ops broadcast numpy-style over rank <= 2
// (equal dims, or 1 on either side after left-padding).

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materializing the transpose
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise
Tensor div(const Tensor& a, const Tensor& b); // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor elu(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor abs_op(const Tensor& a);
Tensor softmax_lastdim(const Tensor& a);
// Normalizes each last-dim row to mean 0, variance 1 (eps 1e-5 inside the
// square root). Affine scale/shift, when wanted, is applied by the caller.
Tensor layer_norm_lastdim(const Tensor& a);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
// Copying slice along `dim` (0 = rows, 1 = cols for rank 2; 0 for rank 1).
Tensor slice(const Tensor& a, int dim, int start, int len);
// Train-only inverted dropout; identity is the caller's eval path.
Tensor dropout(const Tensor& a, double rate, Rng& rng);
// Row `index` of a [vocab x d] table as a rank-1 [d] tensor.
Tensor embedding_lookup(const Tensor& table, int index);
Tensor sum_all(const Tensor& a);  // [1]
Tensor mean_all(const Tensor& a); // [1]

// The sequence-level LSTM primitive: x [T x in], weights W [in x 4h],
// recurrent U [h x 4h], bias b [4h]; returns hidden states [T x h].
// Gate layout along the 4h axis: input, forget, cell, output.
// Implemented as one taped record with hand-derived BPTT.
Tensor lstm_sequence(const Tensor& x, const Tensor& w, const Tensor& u, const Tensor& b);

// Spec-facing dispatcher over the primitive vocabulary.
enum class OpKind {
    matmul,
    add,
    sub,
    elementwise_mul,
    sigmoid,
    tanh,
    elu,
    softmax_lastdim,
    layer_norm_lastdim,
    concat_lastdim,
    slice,
    dropout,
    embedding_lookup,
};

struct OpArgs {
    int dim = 0;
    int start = 0;
    int len = 0;
    int index = 0;
    double rate = 0.0;
    Rng* rng = nullptr;
};

Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs,
                         const OpArgs& args = {});

// Seeds d(loss)/d(loss) = 1 and consumes the active tape. Leaf grads land in
// node grads, or in the active GradSinkScope for parameter slots.
void backward(const Tensor& loss);

void ensure_finite(const Tensor& t, const std::string& context);

// ---------------------------------------------------------------------------
// Parameter registry: stable slot order drives checkpoint layout and the
// deterministic gradient reduction.
class ParamSet {
public:
    Tensor add(const std::string& name, std::vector<int> shape, int fan_in, Rng& rng);
    const std::vector<Tensor>& tensors() const { return params_; }
    const Tensor& at(size_t i) const { return params_[i]; }
    size_t size() const { return params_.size(); }
    size_t scalar_count() const;
    void zero_grads();
    std::vector<std::vector<double>> make_grad_buffer() const;
    // element-wise copy of values (shapes must already match)
    void copy_values_from(const ParamSet& other);

private:
    std::vector<Tensor> params_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. The builder must be a pure function of
// the leaf values (re-run under perturbed leaves for central differences).
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst; // leaf name/index detail of the worst coordinate
    bool pass(double tol) const { return max_rel_err < tol; }
};

GradCheckReport grad_check(const std::function<Tensor(std::vector<Tensor>&)>& build,
                           std::vector<Tensor> leaves, double h = 1e-5);

} // namespace mt
