#pragma once

// Dense-tensor reverse-mode autodiff on an explicit tape.
//
// Design notes:
//  - Values are double throughout. Spike activations are exact small
//    rationals, reductions accumulate in double, and the finite-difference
//    tolerances in the test suite are unreachable in float.
//  - A Tensor is a shared handle to an immutable-once-recorded value node.
//    Gradients accumulate additively into .grad on backward().
//  - Ops record a backward closure on the active tape (thread-local stack).
//    With no active tape, ops compute forward only (inference mode).
//  - Custom ops carry three functions: forward, backward, and an optional
//    smooth twin. Under TwinModeGuard the twin replaces the forward, which
//    turns the whole graph into the differentiable surrogate that the
//    registered backwards actually differentiate; gradient checks compare
//    autodiff against finite differences of that twin graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace wtaspike {

struct DimError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Value domains
//
// Tags describe what value set a tensor lives in; arithmetic never consults
// them. The energy model and the spike-discipline audit read them.
//   Binary   : {0, 1}
//   Ternary  : {-unit, 0, +unit}          (T-LIF, unit = alpha)
//   NormInt  : {0, 1/D, ..., 1}           (NI-LIF, d_max = D)
//   SpikeSum : integer multiples of `quantum` (sums/products of spikes)
//   Real     : anything else
// ---------------------------------------------------------------------------
struct ValueDomain {
    enum Kind : uint8_t { Real, Binary, Ternary, NormInt, SpikeSum };
    Kind kind = Real;
    double unit = 1.0;    // magnitude of a single full spike (alpha; 1 for binary/normint)
    double quantum = 0.0; // all values are integer multiples of this (0 = unconstrained)
    int d_max = 1;        // D for NormInt

    bool is_spike() const { return kind == Binary || kind == Ternary || kind == NormInt; }
    bool mul_free() const { return kind != Real; }

    static ValueDomain real() { return {}; }
    static ValueDomain binary() { return {Binary, 1.0, 1.0, 1}; }
    static ValueDomain ternary(double alpha) { return {Ternary, alpha, alpha, 1}; }
    static ValueDomain norm_int(int d) { return {NormInt, 1.0, 1.0 / d, d}; }
    static ValueDomain spike_sum(double q) { return {SpikeSum, 1.0, q, 1}; }
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until touched
    bool requires_grad = false;
    ValueDomain domain;
    std::string name; // parameters only; used for diagnostics and checkpoints
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        int64_t count = numel(shape);
        n->shape = std::move(shape);
        n->value.assign(static_cast<size_t>(count), 0.0);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(data.size()))
            throw DimError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    size_t ndim() const { return node_->shape.size(); }

    std::vector<double>& value() { return node_->value; }
    const std::vector<double>& value() const { return node_->value; }
    double item() const {
        if (node_->value.size() != 1)
            throw ContractError("item() on non-scalar tensor " + shape_str(node_->shape));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    std::vector<double>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        const_cast<TensorNode*>(node_.get())->grad.resize(node_->value.size(), 0.0);
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    ValueDomain& domain() { return node_->domain; }
    const ValueDomain& domain() const { return node_->domain; }

    const std::string& name() const { return node_->name; }
    void set_name(std::string n) { node_->name = std::move(n); }

    TensorNode* node() const { return node_.get(); }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------
class Tape {
public:
    Tape() {
        prev_ = active_;
        active_ = this;
    }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> backward) {
        records_.push_back(std::move(backward));
    }

    size_t size() const { return records_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
    // Repeated calls without zeroing grads keep accumulating.
    void backward(Tensor loss) {
        if (loss.size() != 1)
            throw ContractError("backward() requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        loss.grad()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> records_;
    Tape* prev_ = nullptr;
    static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

// Under twin mode, custom ops (and straight-through round) evaluate the
// smooth function their backward differentiates instead of their spiking
// forward. Used only by gradient checks.
class TwinModeGuard {
public:
    TwinModeGuard() {
        prev_ = on_;
        on_ = true;
    }
    ~TwinModeGuard() { on_ = prev_; }
    static bool on() { return on_; }

private:
    bool prev_;
    static thread_local bool on_;
};

inline thread_local bool TwinModeGuard::on_ = false;

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

// Deterministic row-sharded parallel-for. Each index is processed by exactly
// one thread with the same per-index arithmetic as the serial loop, so
// results are bit-identical for any worker count.
inline int worker_cap() {
    static int cap = [] {
        unsigned hw = std::thread::hardware_concurrency();
        int n = hw == 0 ? 1 : static_cast<int>(hw);
        if (const char* env = std::getenv("WTA_SPIKE_THREADS")) {
            int e = std::atoi(env);
            if (e >= 1 && e < n) n = e;
        }
        return std::min(n, 16);
    }();
    return cap;
}

template <typename F>
void parallel_for(int64_t count, int64_t grain, F&& body) {
    int workers = worker_cap();
    if (workers <= 1 || count < 2 * grain) {
        for (int64_t i = 0; i < count; ++i) body(i);
        return;
    }
    int64_t chunks = std::min<int64_t>(workers, (count + grain - 1) / grain);
    int64_t per = (count + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks - 1));
    for (int64_t c = 1; c < chunks; ++c) {
        int64_t lo = c * per, hi = std::min(count, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] {
            for (int64_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (int64_t i = 0; i < std::min(per, count); ++i) body(i);
    for (auto& t : pool) t.join();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

// shapes equal, or one side scalar (1 element)
enum class EwMode { Same, LeftScalar, RightScalar };

inline EwMode ew_mode(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return EwMode::Same;
    if (a.size() == 1) return EwMode::LeftScalar;
    if (b.size() == 1) return EwMode::RightScalar;
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto mode = detail::ew_mode(a, b, "add");
    const Tensor& big = (mode == detail::EwMode::LeftScalar) ? b : a;
    Tensor out = Tensor::zeros(big.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[mode == detail::EwMode::LeftScalar ? 0 : i] +
                bv[mode == detail::EwMode::RightScalar ? 0 : i];
    if (a.domain().quantum > 0.0 && a.domain().quantum == b.domain().quantum)
        out.domain() = ValueDomain::spike_sum(a.domain().quantum);
    if (Tape* t = Tape::active(); t && detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        t->record([a, b, out, mode]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                if (mode == detail::EwMode::LeftScalar)
                    for (double gi : g) ga[0] += gi;
                else
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                if (mode == detail::EwMode::RightScalar)
                    for (double gi : g) gb[0] += gi;
                else
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto mode = detail::ew_mode(a, b, "sub");
    const Tensor& big = (mode == detail::EwMode::LeftScalar) ? b : a;
    Tensor out = Tensor::zeros(big.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[mode == detail::EwMode::LeftScalar ? 0 : i] -
                bv[mode == detail::EwMode::RightScalar ? 0 : i];
    if (Tape* t = Tape::active(); t && detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        t->record([a, b, out, mode]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                if (mode == detail::EwMode::LeftScalar)
                    for (double gi : g) ga[0] += gi;
                else
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                if (mode == detail::EwMode::RightScalar)
                    for (double gi : g) gb[0] -= gi;
                else
                    for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto mode = detail::ew_mode(a, b, "mul");
    const Tensor& big = (mode == detail::EwMode::LeftScalar) ? b : a;
    Tensor out = Tensor::zeros(big.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i)
        ov[i] = av[mode == detail::EwMode::LeftScalar ? 0 : i] *
                bv[mode == detail::EwMode::RightScalar ? 0 : i];
    if (Tape* t = Tape::active(); t && detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        t->record([a, b, out, mode]() mutable {
            const auto& g = out.grad();
            const auto& av2 = a.value();
            const auto& bv2 = b.value();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) {
                    double bval = bv2[mode == detail::EwMode::RightScalar ? 0 : i];
                    ga[mode == detail::EwMode::LeftScalar ? 0 : i] += g[i] * bval;
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) {
                    double aval = av2[mode == detail::EwMode::LeftScalar ? 0 : i];
                    gb[mode == detail::EwMode::RightScalar ? 0 : i] += g[i] * aval;
                }
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.value();
    if (c == 1.0) {
        ov = av; // bit-exact identity
        out.domain() = a.domain();
    } else {
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
        if (a.domain().quantum > 0.0)
            out.domain() = ValueDomain::spike_sum(a.domain().quantum * c);
    }
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out, c]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

inline Tensor add_const(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// a[..., n] + b[n]: broadcasts b across all leading axes (bias add)
inline Tensor add_rows(const Tensor& a, const Tensor& b) {
    if (b.ndim() != 1 || a.ndim() < 1 || a.shape().back() != b.dim(0))
        throw DimError("add_rows: cannot broadcast " + shape_str(b.shape()) + " over " +
                       shape_str(a.shape()));
    int64_t n = b.dim(0);
    int64_t rows = a.size() / n;
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j)
            ov[static_cast<size_t>(r * n + j)] = av[static_cast<size_t>(r * n + j)] + bv[static_cast<size_t>(j)];
    if (Tape* t = Tape::active(); t && detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        t->record([a, b, out, rows, n]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < n; ++j)
                        gb[static_cast<size_t>(j)] += g[static_cast<size_t>(r * n + j)];
            }
        });
    }
    return out;
}

// clip with straight-through backward: gradient passes where the input lies
// inside [lo, hi], zero outside. Twin function is clip itself.
inline Tensor clip(const Tensor& a, double lo, double hi) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(hi, std::max(lo, av[i]));
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out, lo, hi]() mutable {
            const auto& g = out.grad();
            const auto& av2 = a.value();
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i)
                if (av2[i] >= lo && av2[i] <= hi) ga[i] += g[i];
        });
    }
    return out;
}

// round-half-away-from-zero (std::round), straight-through backward.
// Twin function is the identity, which twin mode evaluates directly.
inline Tensor round_st(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.value();
    if (TwinModeGuard::on()) {
        ov = av;
    } else {
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::round(av[i]);
    }
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul: a[..., m, k] @ b[..., k, n]. Leading axes must match exactly, or b
// may be a plain 2-D matrix shared across all leading batches of a.
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] @ B[k,n]; skips zero A entries (spike inputs are sparse)
inline void mm_nn_acc(const double* A, const double* B, double* C, int64_t m, int64_t k,
                      int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* a_row = A + i * k;
        double* c_row = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double a = a_row[p];
            if (a == 0.0) continue;
            const double* b_row = B + p * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[m,k] += G[m,n] @ B[k,n]^T
inline void mm_nt_acc(const double* G, const double* B, double* C, int64_t m, int64_t n,
                      int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const double* g_row = G + i * n;
        double* c_row = C + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double* b_row = B + p * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += g_row[j] * b_row[j];
            c_row[p] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T @ G[m,n]
inline void mm_tn_acc(const double* A, const double* G, double* C, int64_t m, int64_t k,
                      int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* g_row = G + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double a = A[i * k + p];
            if (a == 0.0) continue;
            double* c_row = C + p * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += a * g_row[j];
        }
    }
}

} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw DimError("matmul: operands must have >= 2 dims, got " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
    int64_t m = a.shape()[a.ndim() - 2];
    int64_t k = a.shape()[a.ndim() - 1];
    int64_t kb = b.shape()[b.ndim() - 2];
    int64_t n = b.shape()[b.ndim() - 1];
    if (k != kb)
        throw DimError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));

    Shape lead(a.shape().begin(), a.shape().end() - 2);
    bool b_shared = (b.ndim() == 2);
    if (!b_shared) {
        Shape lead_b(b.shape().begin(), b.shape().end() - 2);
        if (lead_b != lead)
            throw DimError("matmul: leading axes disagree, " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
    int64_t batches = numel(lead);

    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);

    const double* A = a.value().data();
    const double* B = b.value().data();
    double* C = out.value().data();
    detail::parallel_for(batches, std::max<int64_t>(1, 2'000'000 / std::max<int64_t>(1, m * k * n)),
                         [&](int64_t bi) {
                             detail::mm_nn_acc(A + bi * m * k, B + (b_shared ? 0 : bi * k * n),
                                               C + bi * m * n, m, k, n);
                         });

    if (a.domain().quantum > 0.0 && b.domain().quantum > 0.0)
        out.domain() = ValueDomain::spike_sum(a.domain().quantum * b.domain().quantum);

    if (Tape* t = Tape::active(); t && detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        t->record([a, b, out, m, k, n, batches, b_shared]() mutable {
            const double* G = out.grad().data();
            if (a.requires_grad()) {
                double* GA = a.grad().data();
                const double* B2 = b.value().data();
                detail::parallel_for(
                    batches, std::max<int64_t>(1, 2'000'000 / std::max<int64_t>(1, m * k * n)),
                    [&](int64_t bi) {
                        detail::mm_nt_acc(G + bi * m * n, B2 + (b_shared ? 0 : bi * k * n),
                                          GA + bi * m * k, m, n, k);
                    });
            }
            if (b.requires_grad()) {
                double* GB = b.grad().data();
                const double* A2 = a.value().data();
                // shared weights accumulate across batches; keep serial for determinism
                for (int64_t bi = 0; bi < batches; ++bi)
                    detail::mm_tn_acc(A2 + bi * m * k, G + bi * m * n,
                                      GB + (b_shared ? 0 : bi * k * n), m, k, n);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                       shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), a.value());
    out.domain() = a.domain();
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// flat index map for permute: out_flat -> in_flat
inline std::vector<int64_t> permute_map(const Shape& in_shape, const std::vector<size_t>& axes) {
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[axes[i]];
    auto in_st = strides_of(in_shape);
    auto out_st = strides_of(out_shape);
    int64_t count = numel(out_shape);
    std::vector<int64_t> map(static_cast<size_t>(count));
    std::vector<int64_t> idx(axes.size(), 0);
    for (int64_t flat = 0; flat < count; ++flat) {
        int64_t rem = flat;
        int64_t src = 0;
        for (size_t d = 0; d < axes.size(); ++d) {
            int64_t q = rem / out_st[d];
            rem -= q * out_st[d];
            src += q * in_st[axes[d]];
        }
        map[static_cast<size_t>(flat)] = src;
    }
    return map;
}

} // namespace detail

inline Tensor permute(const Tensor& a, const std::vector<size_t>& axes) {
    if (axes.size() != a.ndim())
        throw DimError("permute: axes rank " + std::to_string(axes.size()) +
                       " does not match tensor rank " + std::to_string(a.ndim()));
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[axes[i]];
    auto map = detail::permute_map(a.shape(), axes);
    Tensor out = Tensor::zeros(out_shape);
    const auto& av = a.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[static_cast<size_t>(map[i])];
    out.domain() = a.domain();
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out, map = std::move(map)]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[static_cast<size_t>(map[i])] += g[i];
        });
    }
    return out;
}

// swap the last two axes
inline Tensor transpose_last2(const Tensor& a) {
    std::vector<size_t> axes(a.ndim());
    std::iota(axes.begin(), axes.end(), size_t{0});
    std::swap(axes[a.ndim() - 1], axes[a.ndim() - 2]);
    return permute(a, axes);
}

// rows of table[v, d] selected by ids; backward scatter-adds
inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids, Shape id_shape) {
    if (table.ndim() != 2) throw DimError("gather_rows: table must be 2-D");
    int64_t v = table.dim(0), d = table.dim(1);
    for (int64_t id : ids)
        if (id < 0 || id >= v)
            throw InputError("gather_rows: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
    Shape out_shape = id_shape;
    out_shape.push_back(d);
    Tensor out = Tensor::zeros(out_shape);
    const auto& tv = table.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(tv.begin() + ids[i] * d, d, ov.begin() + static_cast<int64_t>(i) * d);
    if (Tape* t = Tape::active(); t && table.requires_grad()) {
        out.set_requires_grad(true);
        t->record([table, out, ids, d]() mutable {
            const auto& g = out.grad();
            auto& gt = table.grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                const double* src = g.data() + static_cast<int64_t>(i) * d;
                double* dst = gt.data() + ids[i] * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    Tensor out = Tensor::scalar(s);
    if (Tape* t = Tape::active(); t && a.requires_grad()) {
        out.set_requires_grad(true);
        t->record([a, out]() mutable {
            double g = out.grad()[0];
            auto& ga = a.grad();
            for (double& gi : ga) gi += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// stack a time sequence of equally shaped tensors along a new axis 0
inline Tensor stack_time(const std::vector<Tensor>& xs) {
    if (xs.empty()) return Tensor::zeros({0});
    Shape out_shape = xs[0].shape();
    out_shape.insert(out_shape.begin(), static_cast<int64_t>(xs.size()));
    Tensor out = Tensor::zeros(out_shape);
    int64_t step = xs[0].size();
    auto& ov = out.value();
    bool needs_grad = false;
    for (size_t t = 0; t < xs.size(); ++t) {
        detail::check_same_shape(xs[t], xs[0], "stack_time");
        std::copy(xs[t].value().begin(), xs[t].value().end(),
                  ov.begin() + static_cast<int64_t>(t) * step);
        needs_grad |= xs[t].requires_grad();
    }
    out.domain() = xs[0].domain();
    if (Tape* tp = Tape::active(); tp && needs_grad) {
        out.set_requires_grad(true);
        tp->record([xs, out, step]() mutable {
            const auto& g = out.grad();
            for (size_t t = 0; t < xs.size(); ++t) {
                if (!xs[t].requires_grad()) continue;
                auto& gx = xs[t].grad();
                const double* src = g.data() + static_cast<int64_t>(t) * step;
                for (int64_t i = 0; i < step; ++i) gx[static_cast<size_t>(i)] += src[i];
            }
        });
    }
    return out;
}

// split along axis 0 into a time sequence
inline std::vector<Tensor> unstack_time(const Tensor& x) {
    if (x.ndim() < 1) throw DimError("unstack_time: need at least 1 axis");
    int64_t t_len = x.dim(0);
    Shape sub(x.shape().begin() + 1, x.shape().end());
    int64_t step = numel(sub);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(t_len));
    for (int64_t t = 0; t < t_len; ++t) {
        Tensor s = Tensor::zeros(sub);
        std::copy_n(x.value().begin() + t * step, step, s.value().begin());
        s.domain() = x.domain();
        if (Tape* tp = Tape::active(); tp && x.requires_grad()) {
            s.set_requires_grad(true);
            tp->record([x, s, t, step]() mutable {
                const auto& g = s.grad();
                auto& gx = x.grad();
                for (int64_t i = 0; i < step; ++i)
                    gx[static_cast<size_t>(t * step + i)] += g[static_cast<size_t>(i)];
            });
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Custom ops: forward value is exact; backward uses only the registered rule.
// ---------------------------------------------------------------------------
struct CustomOp {
    // forward(input values) -> output values (+ output shape via out_shape)
    std::function<std::vector<double>(const std::vector<Tensor>&)> forward;
    // backward(inputs, output values, upstream grad) -> one grad vector per input
    std::function<std::vector<std::vector<double>>(const std::vector<Tensor>&,
                                                   const std::vector<double>&,
                                                   const std::vector<double>&)>
        backward;
    // smooth twin of forward; evaluated instead of forward under twin mode
    std::function<std::vector<double>(const std::vector<Tensor>&)> smooth;
    std::function<Shape(const std::vector<Tensor>&)> out_shape;
    std::string label = "custom";
};

inline CustomOp register_custom_grad(
    std::function<std::vector<double>(const std::vector<Tensor>&)> forward,
    std::function<std::vector<std::vector<double>>(const std::vector<Tensor>&,
                                                   const std::vector<double>&,
                                                   const std::vector<double>&)>
        backward,
    std::function<std::vector<double>(const std::vector<Tensor>&)> smooth = nullptr,
    std::function<Shape(const std::vector<Tensor>&)> out_shape = nullptr) {
    CustomOp op;
    op.forward = std::move(forward);
    op.backward = std::move(backward);
    op.smooth = std::move(smooth);
    op.out_shape = std::move(out_shape);
    return op;
}

inline Tensor apply_custom(const CustomOp& op, const std::vector<Tensor>& inputs) {
    std::vector<double> vals = (TwinModeGuard::on() && op.smooth) ? op.smooth(inputs)
                                                                  : op.forward(inputs);
    Shape shape = op.out_shape ? op.out_shape(inputs) : inputs.at(0).shape();
    if (numel(shape) != static_cast<int64_t>(vals.size()))
        throw ContractError("custom op '" + op.label + "': forward produced " +
                            std::to_string(vals.size()) + " values for shape " +
                            shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), std::move(vals));
    bool needs = false;
    for (const Tensor& in : inputs) needs |= in.requires_grad();
    if (Tape* t = Tape::active(); t && needs) {
        out.set_requires_grad(true);
        auto backward = op.backward;
        auto label = op.label;
        t->record([inputs, out, backward, label]() mutable {
            auto grads = backward(inputs, out.value(), out.grad());
            if (grads.size() != inputs.size())
                throw ContractError("custom op '" + label + "': backward returned " +
                                    std::to_string(grads.size()) + " gradients for " +
                                    std::to_string(inputs.size()) + " inputs");
            for (size_t i = 0; i < inputs.size(); ++i) {
                if (grads[i].size() != inputs[i].value().size())
                    throw ContractError("custom op '" + label +
                                        "': gradient shape mismatch for input " +
                                        std::to_string(i));
                if (!inputs[i].requires_grad()) continue;
                auto& g = const_cast<Tensor&>(inputs[i]).grad();
                for (size_t j = 0; j < g.size(); ++j) g[j] += grads[i][j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy from logits: mean NLL over selected positions, stable LSE.
// logits [B, N, V] (or [N, V]), targets flattened per position.
// ---------------------------------------------------------------------------
inline Tensor cross_entropy_from_logits(const Tensor& logits,
                                        const std::vector<int64_t>& targets,
                                        const std::vector<uint8_t>& mask = {},
                                        bool* empty_mask_flag = nullptr) {
    if (logits.ndim() < 2)
        throw DimError("cross_entropy_from_logits: logits must be [..., V], got " +
                       shape_str(logits.shape()));
    int64_t v = logits.shape().back();
    int64_t rows = logits.size() / v;
    if (static_cast<int64_t>(targets.size()) != rows)
        throw DimError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                       " targets for " + std::to_string(rows) + " positions");
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != rows)
        throw DimError("cross_entropy_from_logits: mask length mismatch");

    int64_t selected = 0;
    for (int64_t r = 0; r < rows; ++r) {
        bool on = mask.empty() || mask[static_cast<size_t>(r)];
        if (!on) continue;
        ++selected;
        int64_t tgt = targets[static_cast<size_t>(r)];
        if (tgt < 0 || tgt >= v)
            throw InputError("cross_entropy_from_logits: target " + std::to_string(tgt) +
                             " out of range [0, " + std::to_string(v) + ")");
    }
    if (empty_mask_flag) *empty_mask_flag = (selected == 0);
    if (selected == 0) {
        Tensor out = Tensor::scalar(0.0);
        // zero loss contributes nothing to gradients; still recorded implicitly as a leaf
        return out;
    }

    const auto& lv = logits.value();
    const bool recording = Tape::active() && logits.requires_grad();
    double total = 0.0;
    std::vector<double> probs; // softmax rows for backward, selected rows only
    std::vector<int64_t> sel_rows;
    if (recording) {
        probs.reserve(static_cast<size_t>(selected * v));
        sel_rows.reserve(static_cast<size_t>(selected));
    }
    for (int64_t r = 0; r < rows; ++r) {
        bool on = mask.empty() || mask[static_cast<size_t>(r)];
        if (!on) continue;
        const double* row = lv.data() + r * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (int64_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
        double log_z = mx + std::log(lse);
        total += log_z - row[targets[static_cast<size_t>(r)]];
        if (recording) {
            for (int64_t j = 0; j < v; ++j) probs.push_back(std::exp(row[j] - log_z));
            sel_rows.push_back(r);
        }
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(selected));
    if (Tape* t = Tape::active(); t && logits.requires_grad()) {
        out.set_requires_grad(true);
        t->record([logits, out, targets, probs = std::move(probs), sel_rows = std::move(sel_rows),
                   v, selected]() mutable {
            double g = out.grad()[0] / static_cast<double>(selected);
            auto& gl = logits.grad();
            for (size_t s = 0; s < sel_rows.size(); ++s) {
                int64_t r = sel_rows[s];
                const double* p = probs.data() + static_cast<int64_t>(s) * v;
                double* dst = gl.data() + r * v;
                for (int64_t j = 0; j < v; ++j) dst[j] += g * p[j];
                dst[targets[static_cast<size_t>(r)]] -= g;
            }
        });
    }
    return out;
}

} // namespace wtaspike
