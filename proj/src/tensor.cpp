#include "mt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_tape = nullptr;
thread_local std::vector<std::vector<double>>* g_sink = nullptr;

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

[[noreturn]] void dim_error(const char* op, const std::vector<int>& a,
                            const std::vector<int>& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                         shape_str(b));
}

[[noreturn]] void dim_error1(const char* op, const std::vector<int>& a, const char* why) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " " + why);
}

// rank <= 2 views as [rows, cols]
void as2d(const std::vector<int>& s, int& r, int& c) {
    if (s.size() == 1) {
        r = 1;
        c = s[0];
    } else if (s.size() == 2) {
        r = s[0];
        c = s[1];
    } else {
        throw DimensionError("tensor rank " + std::to_string(s.size()) + " not supported");
    }
}

bool want_grad(std::initializer_list<Tensor> ins) {
    if (!g_tape) return false;
    for (const auto& t : ins)
        if (t.requires_grad()) return true;
    return false;
}

} // namespace

// ---------------------------------------------------------------------------

Tensor Tensor::make(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    if (n->numel() != n->values.size())
        throw DimensionError("tensor: " + std::to_string(n->values.size()) +
                             " values do not fill shape " + shape_str(n->shape));
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    return make(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return make({1}, {v}, requires_grad);
}

Tensor Tensor::uniform_init(std::vector<int> shape, int fan_in, Rng& rng, bool requires_grad) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return make(std::move(shape), std::move(v), requires_grad);
}

int Tensor::rows() const {
    int r, c;
    as2d(n_->shape, r, c);
    return r;
}

int Tensor::cols() const {
    int r, c;
    as2d(n_->shape, r, c);
    return c;
}

double Tensor::scalar_value() const {
    if (numel() != 1) throw ContractError("scalar_value: tensor has " +
                                          std::to_string(numel()) + " elements");
    return n_->values[0];
}

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    return n_->grad.empty() ? empty : n_->grad;
}

void Tensor::zero_grad() { n_->grad.assign(n_->numel(), 0.0); }

// ---------------------------------------------------------------------------

void Tape::run_reverse_and_clear() {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
}

TapeScope::TapeScope() : prev_(g_tape) { g_tape = &tape_; }
TapeScope::~TapeScope() { g_tape = prev_; }

Tape* active_tape() { return g_tape; }

GradSinkScope::GradSinkScope(std::vector<std::vector<double>>* slots) : prev_(g_sink) {
    g_sink = slots;
}
GradSinkScope::~GradSinkScope() { g_sink = prev_; }

double* grad_buffer(TensorNode* n) {
    if (n->param_slot >= 0 && g_sink) {
        auto& slot = (*g_sink)[static_cast<size_t>(n->param_slot)];
        if (slot.empty()) slot.assign(n->numel(), 0.0);
        return slot.data();
    }
    if (n->grad.empty()) n->grad.assign(n->numel(), 0.0);
    return n->grad.data();
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    Tape* tp = active_tape();
    if (!tp || tp->empty()) throw ContractError("backward: no recorded tape");
    grad_buffer(loss.node().get())[0] += 1.0;
    tp->run_reverse_and_clear();
}

void ensure_finite(const Tensor& t, const std::string& context) {
    for (double v : t.values())
        if (!std::isfinite(v)) throw NumericError("non-finite value in " + context);
}

// ---------------------------------------------------------------------------
// binary elementwise with broadcasting

namespace {

struct Bcast {
    int r, c;          // output dims
    int ra, ca, rb, cb; // operand dims
    std::vector<int> out_shape;
};

Bcast bcast_shapes(const char* op, const Tensor& a, const Tensor& b) {
    Bcast z;
    as2d(a.shape(), z.ra, z.ca);
    as2d(b.shape(), z.rb, z.cb);
    if ((z.ra != z.rb && z.ra != 1 && z.rb != 1) || (z.ca != z.cb && z.ca != 1 && z.cb != 1))
        dim_error(op, a.shape(), b.shape());
    z.r = std::max(z.ra, z.rb);
    z.c = std::max(z.ca, z.cb);
    if (a.rank() == 2 || b.rank() == 2)
        z.out_shape = {z.r, z.c};
    else
        z.out_shape = {z.c};
    return z;
}

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    Bcast z = bcast_shapes(name, a, b);
    std::vector<double> out(static_cast<size_t>(z.r) * z.c);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (int i = 0; i < z.r; ++i) {
        int ia = (z.ra == 1 ? 0 : i);
        int ib = (z.rb == 1 ? 0 : i);
        for (int j = 0; j < z.c; ++j) {
            int ja = (z.ca == 1 ? 0 : j);
            int jb = (z.cb == 1 ? 0 : j);
            out[static_cast<size_t>(i) * z.c + j] =
                fwd(pa[static_cast<size_t>(ia) * z.ca + ja], pb[static_cast<size_t>(ib) * z.cb + jb]);
        }
    }
    Tensor res = Tensor::make(z.out_shape, std::move(out));
    if (want_grad({a, b})) {
        res.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = res.node();
        g_tape->record([an, bn, on, z, bwd] {
            const double* go = grad_buffer(on.get());
            const double* pa = an->values.data();
            const double* pb = bn->values.data();
            double* ga = an->requires_grad ? grad_buffer(an.get()) : nullptr;
            double* gb = bn->requires_grad ? grad_buffer(bn.get()) : nullptr;
            for (int i = 0; i < z.r; ++i) {
                int ia = (z.ra == 1 ? 0 : i);
                int ib = (z.rb == 1 ? 0 : i);
                for (int j = 0; j < z.c; ++j) {
                    int ja = (z.ca == 1 ? 0 : j);
                    int jb = (z.cb == 1 ? 0 : j);
                    size_t ka = static_cast<size_t>(ia) * z.ca + ja;
                    size_t kb = static_cast<size_t>(ib) * z.cb + jb;
                    double da, db;
                    bwd(pa[ka], pb[kb], go[static_cast<size_t>(i) * z.c + j], da, db);
                    if (ga) ga[ka] += da;
                    if (gb) gb[kb] += db;
                }
            }
        });
    }
    return res;
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    std::vector<double> out(a.numel());
    const double* pa = a.values().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
    Tensor res = Tensor::make(a.shape(), std::move(out));
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on, bwd] {
            const double* go = grad_buffer(on.get());
            const double* x = an->values.data();
            const double* y = on->values.data();
            double* ga = grad_buffer(an.get());
            size_t n = an->numel();
            for (size_t i = 0; i < n; ++i) ga[i] += go[i] * bwd(x[i], y[i]);
        });
    }
    return res;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "elementwise_mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "elementwise_div", a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor elu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
        [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Tensor sqrt_op(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor abs_op(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    bool promote = a.rank() == 1;
    int m, k, k2, n;
    as2d(a.shape(), m, k);
    as2d(b.shape(), k2, n);
    if (b.rank() != 2 || k != k2) dim_error("matmul", a.shape(), b.shape());
    std::vector<double> out(static_cast<size_t>(m) * n);
    {
        CMapMat A(a.values().data(), m, k), B(b.values().data(), k, n);
        MapMat C(out.data(), m, n);
        C.noalias() = A * B;
    }
    Tensor res = Tensor::make(promote ? std::vector<int>{n} : std::vector<int>{m, n},
                              std::move(out));
    if (want_grad({a, b})) {
        res.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = res.node();
        g_tape->record([an, bn, on, m, k, n] {
            CMapMat G(grad_buffer(on.get()), m, n);
            if (an->requires_grad) {
                CMapMat B(bn->values.data(), k, n);
                MapMat GA(grad_buffer(an.get()), m, k);
                GA.noalias() += G * B.transpose();
            }
            if (bn->requires_grad) {
                CMapMat A(an->values.data(), m, k);
                MapMat GB(grad_buffer(bn.get()), k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
    }
    return res;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    int m, k, n, k2;
    as2d(a.shape(), m, k);
    as2d(b.shape(), n, k2);
    if (a.rank() != 2 || b.rank() != 2 || k != k2) dim_error("matmul_nt", a.shape(), b.shape());
    std::vector<double> out(static_cast<size_t>(m) * n);
    {
        CMapMat A(a.values().data(), m, k), B(b.values().data(), n, k);
        MapMat C(out.data(), m, n);
        C.noalias() = A * B.transpose();
    }
    Tensor res = Tensor::make({m, n}, std::move(out));
    if (want_grad({a, b})) {
        res.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = res.node();
        g_tape->record([an, bn, on, m, k, n] {
            CMapMat G(grad_buffer(on.get()), m, n);
            if (an->requires_grad) {
                CMapMat B(bn->values.data(), n, k);
                MapMat GA(grad_buffer(an.get()), m, k);
                GA.noalias() += G * B;
            }
            if (bn->requires_grad) {
                CMapMat A(an->values.data(), m, k);
                MapMat GB(grad_buffer(bn.get()), n, k);
                GB.noalias() += G.transpose() * A;
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
    int r, c;
    as2d(a.shape(), r, c);
    std::vector<double> out(a.numel());
    const double* x = a.values().data();
    for (int i = 0; i < r; ++i) {
        const double* row = x + static_cast<size_t>(i) * c;
        double* orow = out.data() + static_cast<size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= sum;
    }
    Tensor res = Tensor::make(a.shape(), std::move(out));
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on, r, c] {
            const double* go = grad_buffer(on.get());
            const double* y = on->values.data();
            double* ga = grad_buffer(an.get());
            for (int i = 0; i < r; ++i) {
                size_t off = static_cast<size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += go[off + j] * y[off + j];
                for (int j = 0; j < c; ++j) ga[off + j] += y[off + j] * (go[off + j] - dot);
            }
        });
    }
    return res;
}

Tensor layer_norm_lastdim(const Tensor& a) {
    constexpr double kEps = 1e-5;
    int r, c;
    as2d(a.shape(), r, c);
    if (c < 1) dim_error1("layer_norm_lastdim", a.shape(), "has empty last dim");
    std::vector<double> out(a.numel());
    auto inv_std = std::make_shared<std::vector<double>>(r);
    const double* x = a.values().data();
    for (int i = 0; i < r; ++i) {
        size_t off = static_cast<size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += x[off + j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = x[off + j] - mean;
            var += d * d;
        }
        var /= c;
        double inv = 1.0 / std::sqrt(var + kEps);
        (*inv_std)[i] = inv;
        for (int j = 0; j < c; ++j) out[off + j] = (x[off + j] - mean) * inv;
    }
    Tensor res = Tensor::make(a.shape(), std::move(out));
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on, inv_std, r, c] {
            const double* go = grad_buffer(on.get());
            const double* y = on->values.data();
            double* ga = grad_buffer(an.get());
            for (int i = 0; i < r; ++i) {
                size_t off = static_cast<size_t>(i) * c;
                double mg = 0.0, mgy = 0.0;
                for (int j = 0; j < c; ++j) {
                    mg += go[off + j];
                    mgy += go[off + j] * y[off + j];
                }
                mg /= c;
                mgy /= c;
                double inv = (*inv_std)[i];
                for (int j = 0; j < c; ++j)
                    ga[off + j] += inv * (go[off + j] - mg - y[off + j] * mgy);
            }
        });
    }
    return res;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
    int r0, c0;
    as2d(parts[0].shape(), r0, c0);
    int ctot = 0;
    bool grad = false;
    for (const auto& p : parts) {
        int r, c;
        as2d(p.shape(), r, c);
        if (r != r0) dim_error("concat_lastdim", parts[0].shape(), p.shape());
        ctot += c;
        grad = grad || p.requires_grad();
    }
    std::vector<double> out(static_cast<size_t>(r0) * ctot);
    int col = 0;
    for (const auto& p : parts) {
        int r, c;
        as2d(p.shape(), r, c);
        const double* src = p.values().data();
        for (int i = 0; i < r; ++i)
            std::copy(src + static_cast<size_t>(i) * c, src + static_cast<size_t>(i + 1) * c,
                      out.data() + static_cast<size_t>(i) * ctot + col);
        col += c;
    }
    std::vector<int> oshape =
        parts[0].rank() == 1 ? std::vector<int>{ctot} : std::vector<int>{r0, ctot};
    Tensor res = Tensor::make(oshape, std::move(out));
    if (g_tape && grad) {
        res.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode>> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        auto on = res.node();
        g_tape->record([ins, on, r0, ctot] {
            const double* go = grad_buffer(on.get());
            int col = 0;
            for (const auto& in : ins) {
                int r, c;
                as2d(in->shape, r, c);
                if (in->requires_grad) {
                    double* gi = grad_buffer(in.get());
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                            gi[static_cast<size_t>(i) * c + j] +=
                                go[static_cast<size_t>(i) * ctot + col + j];
                }
                col += c;
            }
        });
    }
    return res;
}

Tensor slice(const Tensor& a, int dim, int start, int len) {
    int r, c;
    as2d(a.shape(), r, c);
    int extent = dim == 0 ? (a.rank() == 1 ? c : r) : c;
    if (dim < 0 || dim >= a.rank())
        dim_error1("slice", a.shape(), "has no such dim");
    if (start < 0 || len < 1 || start + len > extent)
        throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of bounds for " +
                             shape_str(a.shape()));
    int or_ = r, oc = c, roff = 0, coff = 0;
    if (a.rank() == 1) {
        oc = len;
        coff = start;
    } else if (dim == 0) {
        or_ = len;
        roff = start;
    } else {
        oc = len;
        coff = start;
    }
    std::vector<double> out(static_cast<size_t>(or_) * oc);
    const double* src = a.values().data();
    for (int i = 0; i < or_; ++i)
        for (int j = 0; j < oc; ++j)
            out[static_cast<size_t>(i) * oc + j] =
                src[static_cast<size_t>(i + roff) * c + (j + coff)];
    std::vector<int> oshape =
        a.rank() == 1 ? std::vector<int>{oc} : std::vector<int>{or_, oc};
    Tensor res = Tensor::make(oshape, std::move(out));
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on, or_, oc, roff, coff, c] {
            const double* go = grad_buffer(on.get());
            double* ga = grad_buffer(an.get());
            for (int i = 0; i < or_; ++i)
                for (int j = 0; j < oc; ++j)
                    ga[static_cast<size_t>(i + roff) * c + (j + coff)] +=
                        go[static_cast<size_t>(i) * oc + j];
        });
    }
    return res;
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ContractError("dropout: rate must lie in [0, 1)");
    auto mask = std::make_shared<std::vector<double>>(a.numel());
    double keep = 1.0 - rate;
    for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    std::vector<double> out(a.numel());
    const double* x = a.values().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] * (*mask)[i];
    Tensor res = Tensor::make(a.shape(), std::move(out));
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on, mask] {
            const double* go = grad_buffer(on.get());
            double* ga = grad_buffer(an.get());
            for (size_t i = 0; i < mask->size(); ++i) ga[i] += go[i] * (*mask)[i];
        });
    }
    return res;
}

Tensor embedding_lookup(const Tensor& table, int index) {
    if (table.rank() != 2) dim_error1("embedding_lookup", table.shape(), "is not a 2-d table");
    int v = table.shape()[0], d = table.shape()[1];
    if (index < 0 || index >= v)
        throw ContractError("embedding_lookup: index " + std::to_string(index) +
                            " outside vocab of " + std::to_string(v));
    std::vector<double> out(table.values().begin() + static_cast<size_t>(index) * d,
                            table.values().begin() + static_cast<size_t>(index + 1) * d);
    Tensor res = Tensor::make({d}, std::move(out));
    if (want_grad({table})) {
        res.set_requires_grad(true);
        auto tn = table.node(), on = res.node();
        g_tape->record([tn, on, index, d] {
            const double* go = grad_buffer(on.get());
            double* gt = grad_buffer(tn.get());
            for (int j = 0; j < d; ++j) gt[static_cast<size_t>(index) * d + j] += go[j];
        });
    }
    return res;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor res = Tensor::scalar(s);
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on] {
            double g = grad_buffer(on.get())[0];
            double* ga = grad_buffer(an.get());
            size_t n = an->numel();
            for (size_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return res;
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    double n = static_cast<double>(a.numel());
    Tensor res = Tensor::scalar(s / n);
    if (want_grad({a})) {
        res.set_requires_grad(true);
        auto an = a.node(), on = res.node();
        g_tape->record([an, on, n] {
            double g = grad_buffer(on.get())[0] / n;
            double* ga = grad_buffer(an.get());
            size_t cnt = an->numel();
            for (size_t i = 0; i < cnt; ++i) ga[i] += g;
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Fused LSTM over the whole sequence: one tape record, hand-derived BPTT.

namespace {

struct LstmSaved {
    int t, in, h;
    std::vector<double> ig, fg, cg, og; // gate activations, each [T x h]
    std::vector<double> cell;           // c_t  [T x h]
    std::vector<double> tanh_c;         // tanh(c_t)
};

} // namespace

Tensor lstm_sequence(const Tensor& x, const Tensor& w, const Tensor& u, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || u.rank() != 2 || b.rank() != 1)
        throw DimensionError("lstm_sequence: expected x[TxI], w[Ix4H], u[Hx4H], b[4H]");
    int T = x.shape()[0], in = x.shape()[1];
    int h4 = w.shape()[1];
    if (h4 % 4 != 0) dim_error1("lstm_sequence", w.shape(), "gate dim not divisible by 4");
    int h = h4 / 4;
    if (w.shape()[0] != in || u.shape()[0] != h || u.shape()[1] != h4 || b.shape()[0] != h4)
        dim_error("lstm_sequence", w.shape(), u.shape());

    auto sv = std::make_shared<LstmSaved>();
    sv->t = T;
    sv->in = in;
    sv->h = h;
    size_t th = static_cast<size_t>(T) * h;
    sv->ig.resize(th);
    sv->fg.resize(th);
    sv->cg.resize(th);
    sv->og.resize(th);
    sv->cell.resize(th);
    sv->tanh_c.resize(th);

    // pre-activations for all steps in one GEMM
    std::vector<double> pre(static_cast<size_t>(T) * h4);
    {
        CMapMat X(x.values().data(), T, in), W(w.values().data(), in, h4);
        MapMat P(pre.data(), T, h4);
        P.noalias() = X * W;
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < h4; ++j) pre[static_cast<size_t>(t) * h4 + j] += b.values()[j];
    }

    std::vector<double> hidden(th, 0.0);
    const double* uv = u.values().data();
    std::vector<double> g(h4);
    for (int t = 0; t < T; ++t) {
        const double* hprev = t > 0 ? hidden.data() + static_cast<size_t>(t - 1) * h : nullptr;
        for (int j = 0; j < h4; ++j) {
            double acc = pre[static_cast<size_t>(t) * h4 + j];
            if (hprev)
                for (int k = 0; k < h; ++k) acc += hprev[k] * uv[static_cast<size_t>(k) * h4 + j];
            g[j] = acc;
        }
        const double* cprev = t > 0 ? sv->cell.data() + static_cast<size_t>(t - 1) * h : nullptr;
        for (int k = 0; k < h; ++k) {
            double i_ = 1.0 / (1.0 + std::exp(-g[k]));
            double f_ = 1.0 / (1.0 + std::exp(-g[h + k]));
            double c_ = std::tanh(g[2 * h + k]);
            double o_ = 1.0 / (1.0 + std::exp(-g[3 * h + k]));
            double cell = f_ * (cprev ? cprev[k] : 0.0) + i_ * c_;
            size_t idx = static_cast<size_t>(t) * h + k;
            sv->ig[idx] = i_;
            sv->fg[idx] = f_;
            sv->cg[idx] = c_;
            sv->og[idx] = o_;
            sv->cell[idx] = cell;
            double tc = std::tanh(cell);
            sv->tanh_c[idx] = tc;
            hidden[idx] = o_ * tc;
        }
    }

    Tensor res = Tensor::make({T, h}, std::move(hidden));
    if (want_grad({x, w, u, b})) {
        res.set_requires_grad(true);
        auto xn = x.node(), wn = w.node(), un = u.node(), bn = b.node(), on = res.node();
        g_tape->record([xn, wn, un, bn, on, sv] {
            int T = sv->t, in = sv->in, h = sv->h, h4 = 4 * h;
            const double* go = grad_buffer(on.get());
            const double* hv = on->values.data();
            const double* uv = un->values.data();
            std::vector<double> dpre(static_cast<size_t>(T) * h4, 0.0);
            std::vector<double> dh(h, 0.0), dc(h, 0.0);
            std::vector<double> du_local(static_cast<size_t>(h) * h4, 0.0);
            for (int t = T - 1; t >= 0; --t) {
                size_t off = static_cast<size_t>(t) * h;
                const double* cprev = t > 0 ? sv->cell.data() + off - h : nullptr;
                const double* hprev = t > 0 ? hv + off - h : nullptr;
                double* dp = dpre.data() + static_cast<size_t>(t) * h4;
                for (int k = 0; k < h; ++k) {
                    double dht = go[off + k] + dh[k];
                    double o_ = sv->og[off + k], tc = sv->tanh_c[off + k];
                    double i_ = sv->ig[off + k], f_ = sv->fg[off + k], c_ = sv->cg[off + k];
                    double dct = dht * o_ * (1.0 - tc * tc) + dc[k];
                    double di = dct * c_;
                    double dcc = dct * i_;
                    double df = dct * (cprev ? cprev[k] : 0.0);
                    double do_ = dht * tc;
                    dc[k] = dct * f_;
                    dp[k] = di * i_ * (1.0 - i_);
                    dp[h + k] = df * f_ * (1.0 - f_);
                    dp[2 * h + k] = dcc * (1.0 - c_ * c_);
                    dp[3 * h + k] = do_ * o_ * (1.0 - o_);
                }
                // dh_{t-1} += dg . U^T ; dU += h_{t-1}^T dg
                if (t > 0) {
                    for (int k = 0; k < h; ++k) {
                        double acc = 0.0;
                        for (int j = 0; j < h4; ++j)
                            acc += dp[j] * uv[static_cast<size_t>(k) * h4 + j];
                        dh[k] = acc;
                    }
                    if (un->requires_grad)
                        for (int k = 0; k < h; ++k) {
                            double hp = hprev[k];
                            if (hp != 0.0)
                                for (int j = 0; j < h4; ++j)
                                    du_local[static_cast<size_t>(k) * h4 + j] += hp * dp[j];
                        }
                } else {
                    std::fill(dh.begin(), dh.end(), 0.0);
                }
            }
            if (un->requires_grad) {
                double* gu = grad_buffer(un.get());
                for (size_t i = 0; i < du_local.size(); ++i) gu[i] += du_local[i];
            }
            if (wn->requires_grad) {
                CMapMat X(xn->values.data(), T, in), DP(dpre.data(), T, h4);
                MapMat GW(grad_buffer(wn.get()), in, h4);
                GW.noalias() += X.transpose() * DP;
            }
            if (xn->requires_grad) {
                CMapMat W(wn->values.data(), in, h4), DP(dpre.data(), T, h4);
                MapMat GX(grad_buffer(xn.get()), T, in);
                GX.noalias() += DP * W.transpose();
            }
            if (bn->requires_grad) {
                double* gb = grad_buffer(bn.get());
                for (int t = 0; t < T; ++t)
                    for (int j = 0; j < h4; ++j) gb[j] += dpre[static_cast<size_t>(t) * h4 + j];
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------

Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpArgs& args) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            throw ContractError("forward_primitive: wrong input count");
    };
    switch (kind) {
        case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
        case OpKind::add: need(2); return add(inputs[0], inputs[1]);
        case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
        case OpKind::elementwise_mul: need(2); return mul(inputs[0], inputs[1]);
        case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
        case OpKind::tanh: need(1); return tanh_op(inputs[0]);
        case OpKind::elu: need(1); return elu(inputs[0]);
        case OpKind::softmax_lastdim: need(1); return softmax_lastdim(inputs[0]);
        case OpKind::layer_norm_lastdim: need(1); return layer_norm_lastdim(inputs[0]);
        case OpKind::concat_lastdim: return concat_lastdim(inputs);
        case OpKind::slice: need(1); return slice(inputs[0], args.dim, args.start, args.len);
        case OpKind::dropout:
            need(1);
            if (!args.rng) throw ContractError("dropout: rng required");
            return dropout(inputs[0], args.rate, *args.rng);
        case OpKind::embedding_lookup: need(1); return embedding_lookup(inputs[0], args.index);
    }
    throw ContractError("forward_primitive: unknown op kind");
}

// ---------------------------------------------------------------------------

Tensor ParamSet::add(const std::string& name, std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::uniform_init(std::move(shape), fan_in, rng, true);
    t.node()->param_slot = static_cast<int>(params_.size());
    t.node()->name = name;
    params_.push_back(t);
    return t;
}

size_t ParamSet::scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
}

void ParamSet::zero_grads() {
    for (auto& p : params_) p.zero_grad();
}

std::vector<std::vector<double>> ParamSet::make_grad_buffer() const {
    std::vector<std::vector<double>> buf(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) buf[i].assign(params_[i].numel(), 0.0);
    return buf;
}

void ParamSet::copy_values_from(const ParamSet& other) {
    if (other.params_.size() != params_.size())
        throw ContractError("ParamSet::copy_values_from: size mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
        if (other.params_[i].shape() != params_[i].shape())
            throw ContractError("ParamSet::copy_values_from: shape mismatch at " +
                                params_[i].node()->name);
        params_[i].mutable_values() = other.params_[i].values();
    }
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(std::vector<Tensor>&)>& build,
                           std::vector<Tensor> leaves, double h) {
    for (auto& l : leaves) l.set_requires_grad(true);

    std::vector<std::vector<double>> analytic(leaves.size());
    {
        TapeScope ts;
        Tensor loss = build(leaves);
        if (loss.numel() != 1) throw ContractError("grad_check: loss must be scalar");
        for (auto& l : leaves) l.zero_grad();
        if (!ts.tape().empty()) backward(loss);
        for (size_t i = 0; i < leaves.size(); ++i) {
            analytic[i] = leaves[i].grad();
            if (analytic[i].empty()) analytic[i].assign(leaves[i].numel(), 0.0);
        }
    }

    GradCheckReport rep;
    for (size_t i = 0; i < leaves.size(); ++i) {
        auto& vals = leaves[i].mutable_values();
        for (size_t k = 0; k < vals.size(); ++k) {
            double orig = vals[k];
            vals[k] = orig + h;
            double fp = build(leaves).scalar_value();
            vals[k] = orig - h;
            double fm = build(leaves).scalar_value();
            vals[k] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i][k];
            double rel = std::fabs(a - numeric) /
                         std::max({1.0, std::fabs(a), std::fabs(numeric)});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = "leaf " + std::to_string(i) + " coord " + std::to_string(k) +
                            ": analytic " + std::to_string(a) + " vs numeric " +
                            std::to_string(numeric);
            }
        }
    }
    return rep;
}

} // namespace mt
