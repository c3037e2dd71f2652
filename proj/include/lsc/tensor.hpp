#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lsc/error.hpp"
#include "lsc/rng.hpp"

namespace lsc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Integer matrix for token ids (ids are not differentiable and never live on
// the tape).
struct IdMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> data;

    IdMatrix() = default;
    IdMatrix(std::size_t r, std::size_t c, std::int32_t fill = 0)
        : rows(r), cols(c), data(r * c, fill) {}

    std::int32_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    std::int32_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Boolean matrix; used for padding masks (true = real token, false = pad).
struct BoolMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> data;

    BoolMatrix() = default;
    BoolMatrix(std::size_t r, std::size_t c, bool fill = true)
        : rows(r), cols(c), data(r * c, fill ? 1 : 0) {}

    bool empty() const { return data.empty(); }
    void set(std::size_t r, std::size_t c, bool v) { data[r * cols + c] = v ? 1 : 0; }
    bool at(std::size_t r, std::size_t c) const { return data[r * cols + c] != 0; }
};

template <typename Real>
struct TensorImpl {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // empty until a backward pass touches this tensor
    bool requires_grad = false;
};

// Dense tensor with value semantics over a shared implementation. Copies are
// shallow: they alias the same storage, which is what parameter lists and
// tape records rely on.
template <typename Real>
class Tensor {
public:
    using ImplPtr = std::shared_ptr<TensorImpl<Real>>;

    Tensor() : impl_(std::make_shared<TensorImpl<Real>>()) {}
    explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), Real(0), requires_grad);
    }

    static Tensor full(Shape shape, Real fill, bool requires_grad = false) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->value.assign(shape_numel(t.impl_->shape), fill);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(Real v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, Real stddev = Real(1), bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (Real& v : t.impl_->value) v = static_cast<Real>(rng.normal(0.0, 1.0)) * stddev;
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->value.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t rank() const { return impl_->shape.size(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    std::vector<Real>& value() { return impl_->value; }
    const std::vector<Real>& value() const { return impl_->value; }
    Real* data() { return impl_->value.data(); }
    const Real* data() const { return impl_->value.data(); }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<Real>& grad() { return impl_->grad; }
    const std::vector<Real>& grad() const { return impl_->grad; }

    Real item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return impl_->value[0];
    }

    // Row-major element access for tests and small fixtures.
    Real at(std::initializer_list<std::size_t> idx) const {
        std::size_t flat = 0;
        std::size_t i = 0;
        for (std::size_t v : idx) flat = flat * impl_->shape[i++] + v;
        return impl_->value[flat];
    }

    ImplPtr impl() const { return impl_; }

private:
    ImplPtr impl_;
};

// Wengert-list tape: operations append records in execution order, which is
// topological by construction; backward replays them in reverse. A tape is
// active for the current thread from construction to destruction.
template <typename Real>
class Tape {
public:
    struct Record {
        const char* op;
        std::vector<std::shared_ptr<TensorImpl<Real>>> inputs;
        std::shared_ptr<TensorImpl<Real>> output;
        std::function<void()> backward;
    };

    Tape() : prev_(active_ptr()) { active_ptr() = this; }
    ~Tape() { active_ptr() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ptr(); }

    // Suspends recording for the enclosing scope (used by numeric probes).
    struct Pause {
        Pause() : saved_(active_ptr()) { active_ptr() = nullptr; }
        ~Pause() { active_ptr() = saved_; }
        Tape* saved_;
    };

    void record(const char* op, std::vector<std::shared_ptr<TensorImpl<Real>>> inputs,
                std::shared_ptr<TensorImpl<Real>> output, std::function<void()> backward) {
        records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }
    const Record& record_at(std::size_t i) const { return records_[i]; }

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, populating
    // grad for every recorded tensor (ancestors of the loss get nonzero
    // values; unrelated recorded tensors get zeros).
    void backward(const Tensor<Real>& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw ContractError("backward() called on a tensor that was not recorded with gradients enabled");
        }
        for (auto& r : records_) {
            for (auto& in : r.inputs) {
                if (in->requires_grad) in->grad.assign(in->value.size(), Real(0));
            }
            r.output->grad.assign(r.output->value.size(), Real(0));
        }
        if (loss.impl()->grad.empty()) loss.impl()->grad.assign(1, Real(0));
        loss.impl()->grad[0] = Real(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            it->backward();
        }
    }

private:
    static Tape*& active_ptr() {
        thread_local Tape* active = nullptr;
        return active;
    }

    std::vector<Record> records_;
    Tape* prev_;
};

namespace detail {

template <typename Real>
bool should_record(std::initializer_list<const Tensor<Real>*> inputs) {
    if (Tape<Real>::active() == nullptr) return false;
    for (const Tensor<Real>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <typename Real>
void accumulate(const std::shared_ptr<TensorImpl<Real>>& impl, std::size_t i, Real v) {
    if (impl->requires_grad) impl->grad[i] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape operations
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::should_record<Real>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape<Real>::active()->record("add", {ai, bi}, oi, [ai, bi, oi, n] {
            for (std::size_t i = 0; i < n; ++i) {
                detail::accumulate(ai, i, oi->grad[i]);
                detail::accumulate(bi, i, oi->grad[i]);
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::should_record<Real>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape<Real>::active()->record("mul", {ai, bi}, oi, [ai, bi, oi, n] {
            for (std::size_t i = 0; i < n; ++i) {
                detail::accumulate(ai, i, oi->grad[i] * bi->value[i]);
                detail::accumulate(bi, i, oi->grad[i] * ai->value[i]);
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (detail::should_record<Real>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        Tape<Real>::active()->record("scale", {ai}, oi, [ai, oi, c, n] {
            for (std::size_t i = 0; i < n; ++i) detail::accumulate(ai, i, oi->grad[i] * c);
        });
    }
    return out;
}

// The one permitted broadcast: adds a length-d row vector along the last axis.
template <typename Real>
Tensor<Real> add_row(const Tensor<Real>& a, const Tensor<Real>& bias) {
    if (bias.rank() != 1 || a.rank() < 1 || a.shape().back() != bias.dim(0)) {
        throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                         shape_str(a.shape()));
    }
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const std::size_t d = bias.dim(0);
    const std::size_t rows = a.numel() / d;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) out.data()[r * d + j] = a.data()[r * d + j] + bias.data()[j];
    }
    if (detail::should_record<Real>({&a, &bias})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = bias.impl(), oi = out.impl();
        Tape<Real>::active()->record("add_row", {ai, bi}, oi, [ai, bi, oi, rows, d] {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    detail::accumulate(ai, r * d + j, oi->grad[r * d + j]);
                    detail::accumulate(bi, j, oi->grad[r * d + j]);
                }
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> silu(const Tensor<Real>& a) {
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const Real x = a.data()[i];
        out.data()[i] = x / (Real(1) + std::exp(-x));
    }
    if (detail::should_record<Real>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        Tape<Real>::active()->record("silu", {ai}, oi, [ai, oi, n] {
            for (std::size_t i = 0; i < n; ++i) {
                const Real x = ai->value[i];
                const Real s = Real(1) / (Real(1) + std::exp(-x));
                detail::accumulate(ai, i, oi->grad[i] * s * (Real(1) + x * (Real(1) - s)));
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    }
    Tensor<Real> out = Tensor<Real>::from(std::move(new_shape), a.value());
    if (detail::should_record<Real>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        Tape<Real>::active()->record("reshape", {ai}, oi, [ai, oi] {
            const std::size_t n = oi->value.size();
            for (std::size_t i = 0; i < n; ++i) detail::accumulate(ai, i, oi->grad[i]);
        });
    }
    return out;
}

// Swaps axes 1 and 2 of a rank-4 tensor: (a,b,c,d) -> (a,c,b,d).
template <typename Real>
Tensor<Real> transpose_12(const Tensor<Real>& x) {
    if (x.rank() != 4) throw ShapeError("transpose_12: expected rank-4 tensor, got " + shape_str(x.shape()));
    const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
    Tensor<Real> out = Tensor<Real>::zeros({A, C, B, D});
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t d = 0; d < D; ++d)
                    out.data()[((a * C + c) * B + b) * D + d] = x.data()[((a * B + b) * C + c) * D + d];
    if (detail::should_record<Real>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        Tape<Real>::active()->record("transpose_12", {xi}, oi, [xi, oi, A, B, C, D] {
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t d = 0; d < D; ++d)
                            detail::accumulate(xi, ((a * B + b) * C + c) * D + d,
                                               oi->grad[((a * C + c) * B + b) * D + d]);
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
    Real s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i];
    Tensor<Real> out = Tensor<Real>::scalar(s);
    if (detail::should_record<Real>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        Tape<Real>::active()->record("sum", {ai}, oi, [ai, oi] {
            const std::size_t n = ai->value.size();
            for (std::size_t i = 0; i < n; ++i) detail::accumulate(ai, i, oi->grad[0]);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
void check_batched(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) {
        throw ShapeError(std::string(op) + ": dimension mismatch between " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ShapeError(std::string(op) + ": dimension mismatch between " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
        }
    }
}

}  // namespace detail

// Batched matrix product: (...,m,k) x (...,k,n) -> (...,m,n) with identical
// leading dimensions. Gradients: dA = G.B^T, dB = A^T.G.
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_batched(a, b, "matmul");
    const std::size_t r = a.rank();
    const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
    const std::size_t k2 = b.dim(r - 2), n = b.dim(r - 1);
    if (k != k2) {
        throw ShapeError("matmul: dimension mismatch between " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Shape out_shape(a.shape());
    out_shape[r - 1] = n;
    Tensor<Real> out = Tensor<Real>::zeros(out_shape);
    const std::size_t batch = a.numel() / (m * k);
    for (std::size_t bt = 0; bt < batch; ++bt) {
        const Real* pa = a.data() + bt * m * k;
        const Real* pb = b.data() + bt * k * n;
        Real* po = out.data() + bt * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const Real av = pa[i * k + kk];
                for (std::size_t j = 0; j < n; ++j) po[i * n + j] += av * pb[kk * n + j];
            }
    }
    if (detail::should_record<Real>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape<Real>::active()->record("matmul", {ai, bi}, oi, [ai, bi, oi, batch, m, k, n] {
            for (std::size_t bt = 0; bt < batch; ++bt) {
                const Real* pa = ai->value.data() + bt * m * k;
                const Real* pb = bi->value.data() + bt * k * n;
                const Real* pg = oi->grad.data() + bt * m * n;
                if (ai->requires_grad) {
                    Real* ga = ai->grad.data() + bt * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const Real gv = pg[i * n + j];
                            for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * pb[kk * n + j];
                        }
                }
                if (bi->requires_grad) {
                    Real* gb = bi->grad.data() + bt * k * n;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const Real av = pa[i * k + kk];
                            for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += av * pg[i * n + j];
                        }
                }
            }
        });
    }
    return out;
}

// Batched product against a transposed right factor: (...,m,k) x (...,n,k)^T
// -> (...,m,n). This is the natural layout for linear layers (weights stored
// row-per-output) and attention scores.
template <typename Real>
Tensor<Real> matmul_bt(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_batched(a, b, "matmul_bt");
    const std::size_t r = a.rank();
    const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
    const std::size_t n = b.dim(r - 2), k2 = b.dim(r - 1);
    if (k != k2) {
        throw ShapeError("matmul_bt: dimension mismatch between " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Shape out_shape(a.shape());
    out_shape[r - 1] = n;
    Tensor<Real> out = Tensor<Real>::zeros(out_shape);
    const std::size_t batch = a.numel() / (m * k);
    for (std::size_t bt = 0; bt < batch; ++bt) {
        const Real* pa = a.data() + bt * m * k;
        const Real* pb = b.data() + bt * n * k;
        Real* po = out.data() + bt * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                Real acc = 0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += pa[i * k + kk] * pb[j * k + kk];
                po[i * n + j] = acc;
            }
    }
    if (detail::should_record<Real>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape<Real>::active()->record("matmul_bt", {ai, bi}, oi, [ai, bi, oi, batch, m, k, n] {
            for (std::size_t bt = 0; bt < batch; ++bt) {
                const Real* pa = ai->value.data() + bt * m * k;
                const Real* pb = bi->value.data() + bt * n * k;
                const Real* pg = oi->grad.data() + bt * m * n;
                if (ai->requires_grad) {
                    Real* ga = ai->grad.data() + bt * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const Real gv = pg[i * n + j];
                            for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * pb[j * k + kk];
                        }
                }
                if (bi->requires_grad) {
                    Real* gb = bi->grad.data() + bt * n * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const Real gv = pg[i * n + j];
                            for (std::size_t kk = 0; kk < k; ++kk) gb[j * k + kk] += gv * pa[i * k + kk];
                        }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization, softmax, loss
// ---------------------------------------------------------------------------

// Root-mean-square normalization over the last axis with a learned gain:
// y_i = g_i * x_i / sqrt(mean(x^2) + eps).
template <typename Real>
Tensor<Real> rmsnorm(const Tensor<Real>& x, const Tensor<Real>& gain, Real eps) {
    if (gain.rank() != 1 || x.shape().back() != gain.dim(0)) {
        throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
    }
    const std::size_t d = gain.dim(0);
    const std::size_t rows = x.numel() / d;
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    std::vector<Real> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* px = x.data() + r * d;
        Real ms = 0;
        for (std::size_t j = 0; j < d; ++j) ms += px[j] * px[j];
        ms = ms / Real(d) + eps;
        const Real inv = Real(1) / std::sqrt(ms);
        inv_rms[r] = inv;
        Real* po = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) po[j] = gain.data()[j] * px[j] * inv;
    }
    if (detail::should_record<Real>({&x, &gain})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gain.impl(), oi = out.impl();
        Tape<Real>::active()->record("rmsnorm", {xi, gi}, oi,
                                     [xi, gi, oi, rows, d, inv_rms = std::move(inv_rms)] {
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* px = xi->value.data() + r * d;
                const Real* pg = oi->grad.data() + r * d;
                const Real inv = inv_rms[r];
                if (gi->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) gi->grad[j] += pg[j] * px[j] * inv;
                }
                if (xi->requires_grad) {
                    Real dot = 0;  // sum_i g_i * gain_i * x_i
                    for (std::size_t j = 0; j < d; ++j) dot += pg[j] * gi->value[j] * px[j];
                    const Real c = dot * inv * inv * inv / Real(d);
                    Real* gx = xi->grad.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) gx[j] += pg[j] * gi->value[j] * inv - c * px[j];
                }
            }
        });
    }
    return out;
}

// Numerically stable softmax along the last axis.
template <typename Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& x) {
    if (x.rank() < 1 || x.shape().back() < 1) {
        throw ShapeError("softmax: last axis must be non-empty, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* px = x.data() + r * n;
        Real* po = out.data() + r * n;
        Real mx = px[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[j]);
        Real s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            po[j] = std::exp(px[j] - mx);
            s += po[j];
        }
        const Real inv = Real(1) / s;
        for (std::size_t j = 0; j < n; ++j) po[j] *= inv;
    }
    if (detail::should_record<Real>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        Tape<Real>::active()->record("softmax", {xi}, oi, [xi, oi, rows, n] {
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* py = oi->value.data() + r * n;
                const Real* pg = oi->grad.data() + r * n;
                Real dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += pg[j] * py[j];
                Real* gx = xi->grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += py[j] * (pg[j] - dot);
            }
        });
    }
    return out;
}

// Mean negative log-softmax probability of the gold class over rows whose
// label is not ignore_index. Ignored rows contribute nothing to the loss or
// the gradient.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<int>& labels, int ignore_index) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: expected (batch, classes) logits, got " + shape_str(logits.shape()));
    }
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(b));
    }
    std::vector<Real> lse(b, Real(0));
    std::vector<Real> mx(b, Real(0));
    Real total = 0;
    std::size_t valid = 0;
    for (std::size_t r = 0; r < b; ++r) {
        const int y = labels[r];
        if (y == ignore_index) continue;
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                                std::to_string(c) + ") at row " + std::to_string(r));
        }
        const Real* px = logits.data() + r * c;
        Real m = px[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, px[j]);
        Real s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(px[j] - m);
        mx[r] = m;
        lse[r] = m + std::log(s);
        total += lse[r] - px[y];
        ++valid;
    }
    if (valid == 0) throw ContractError("cross_entropy: every label is ignore_index, mean is undefined");
    Tensor<Real> out = Tensor<Real>::scalar(total / Real(valid));
    if (detail::should_record<Real>({&logits})) {
        out.set_requires_grad(true);
        auto li = logits.impl(), oi = out.impl();
        Tape<Real>::active()->record("cross_entropy", {li}, oi,
                                     [li, oi, labels, ignore_index, b, c, valid, lse = std::move(lse)] {
            const Real g = oi->grad[0] / Real(valid);
            for (std::size_t r = 0; r < b; ++r) {
                if (labels[r] == ignore_index) continue;
                const Real* px = li->value.data() + r * c;
                Real* gx = li->grad.data() + r * c;
                for (std::size_t j = 0; j < c; ++j) {
                    const Real p = std::exp(px[j] - lse[r]);
                    gx[j] += g * (p - (static_cast<int>(j) == labels[r] ? Real(1) : Real(0)));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lookup, dropout, rotary rotation
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, const IdMatrix& ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::int32_t id : ids.data) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw ContractError("embedding: token id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(v));
        }
    }
    Tensor<Real> out = Tensor<Real>::zeros({ids.rows, ids.cols, d});
    for (std::size_t i = 0; i < ids.data.size(); ++i) {
        const Real* src = table.data() + static_cast<std::size_t>(ids.data[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    if (detail::should_record<Real>({&table})) {
        out.set_requires_grad(true);
        auto ti = table.impl(), oi = out.impl();
        Tape<Real>::active()->record("embedding", {ti}, oi, [ti, oi, ids, d] {
            for (std::size_t i = 0; i < ids.data.size(); ++i) {
                Real* dst = ti->grad.data() + static_cast<std::size_t>(ids.data[i]) * d;
                const Real* g = oi->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

// Inverted dropout: kept activations are scaled by 1/(1-p) so eval needs no
// rescaling. Identity when not training or p == 0.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real p, Rng* rng, bool training) {
    if (!training || p <= Real(0)) return x;
    if (rng == nullptr) throw ContractError("dropout: training mode requires an rng");
    const std::size_t n = x.numel();
    const Real keep_scale = Real(1) / (Real(1) - p);
    std::vector<Real> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
        mask[i] = (rng->uniform() < static_cast<double>(p)) ? Real(0) : keep_scale;
    }
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * mask[i];
    if (detail::should_record<Real>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        Tape<Real>::active()->record("dropout", {xi}, oi, [xi, oi, n, mask = std::move(mask)] {
            for (std::size_t i = 0; i < n; ++i) detail::accumulate(xi, i, oi->grad[i] * mask[i]);
        });
    }
    return out;
}

// Rotates consecutive (even, odd) feature pairs of q/k heads by a
// position-dependent angle. cos/sin tables are (seq_len, head_dim/2)
// constants. The Jacobian of a rotation is its transpose, so backward rotates
// gradients the other way.
template <typename Real>
Tensor<Real> rope_apply(const Tensor<Real>& x, const Tensor<Real>& cos_t, const Tensor<Real>& sin_t) {
    if (x.rank() != 4) throw ShapeError("rope: expected (b,h,s,d_h) tensor, got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), H = x.dim(1), S = x.dim(2), D = x.dim(3);
    if (D % 2 != 0) throw ShapeError("rope: head dim must be even, got " + shape_str(x.shape()));
    const std::size_t P = D / 2;
    if (cos_t.rank() != 2 || cos_t.dim(0) < S || cos_t.dim(1) != P) {
        throw ShapeError("rope: cos table " + shape_str(cos_t.shape()) + " too small for " + shape_str(x.shape()));
    }
    const std::size_t table_p = cos_t.dim(1);
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t s = 0; s < S; ++s) {
                const Real* px = x.data() + ((b * H + h) * S + s) * D;
                Real* po = out.data() + ((b * H + h) * S + s) * D;
                const Real* pc = cos_t.data() + s * table_p;
                const Real* ps = sin_t.data() + s * table_p;
                for (std::size_t i = 0; i < P; ++i) {
                    const Real x0 = px[2 * i], x1 = px[2 * i + 1];
                    po[2 * i] = x0 * pc[i] - x1 * ps[i];
                    po[2 * i + 1] = x0 * ps[i] + x1 * pc[i];
                }
            }
    if (detail::should_record<Real>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), ci = cos_t.impl(), si = sin_t.impl(), oi = out.impl();
        Tape<Real>::active()->record("rope", {xi}, oi, [xi, ci, si, oi, B, H, S, D, P, table_p] {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t s = 0; s < S; ++s) {
                        const Real* pg = oi->grad.data() + ((b * H + h) * S + s) * D;
                        Real* gx = xi->grad.data() + ((b * H + h) * S + s) * D;
                        const Real* pc = ci->value.data() + s * table_p;
                        const Real* ps = si->value.data() + s * table_p;
                        for (std::size_t i = 0; i < P; ++i) {
                            const Real g0 = pg[2 * i], g1 = pg[2 * i + 1];
                            gx[2 * i] += g0 * pc[i] + g1 * ps[i];
                            gx[2 * i + 1] += -g0 * ps[i] + g1 * pc[i];
                        }
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling over time
// ---------------------------------------------------------------------------

namespace detail {

inline void check_pool_mask(const Shape& h, const BoolMatrix& pad) {
    if (h.size() != 3) throw ShapeError("pool: expected (b,s,d) input, got " + shape_str(h));
    if (pad.rows != h[0] || pad.cols != h[1]) {
        throw ShapeError("pool: pad mask " + std::to_string(pad.rows) + "x" + std::to_string(pad.cols) +
                         " does not match " + shape_str(h));
    }
}

}  // namespace detail

// Representation at the final non-pad position of each sequence.
template <typename Real>
Tensor<Real> pool_last(const Tensor<Real>& h, const BoolMatrix& pad) {
    detail::check_pool_mask(h.shape(), pad);
    const std::size_t B = h.dim(0), S = h.dim(1), D = h.dim(2);
    std::vector<std::size_t> last(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t idx = S;
        for (std::size_t s = S; s-- > 0;) {
            if (pad.at(b, s)) { idx = s; break; }
        }
        if (idx == S) throw ContractError("pool: sequence " + std::to_string(b) + " has no non-pad positions");
        last[b] = idx;
    }
    Tensor<Real> out = Tensor<Real>::zeros({B, D});
    for (std::size_t b = 0; b < B; ++b) {
        std::copy(h.data() + (b * S + last[b]) * D, h.data() + (b * S + last[b]) * D + D, out.data() + b * D);
    }
    if (detail::should_record<Real>({&h})) {
        out.set_requires_grad(true);
        auto hi = h.impl(), oi = out.impl();
        Tape<Real>::active()->record("pool_last", {hi}, oi, [hi, oi, B, S, D, last = std::move(last)] {
            for (std::size_t b = 0; b < B; ++b) {
                Real* gx = hi->grad.data() + (b * S + last[b]) * D;
                const Real* g = oi->grad.data() + b * D;
                for (std::size_t j = 0; j < D; ++j) gx[j] += g[j];
            }
        });
    }
    return out;
}

// Element-wise max over non-pad positions. Pad positions are treated as a
// -inf sentinel; gradient flows to the first position attaining the max.
template <typename Real>
Tensor<Real> pool_max(const Tensor<Real>& h, const BoolMatrix& pad) {
    detail::check_pool_mask(h.shape(), pad);
    const std::size_t B = h.dim(0), S = h.dim(1), D = h.dim(2);
    Tensor<Real> out = Tensor<Real>::zeros({B, D});
    std::vector<std::size_t> argmax(B * D);
    for (std::size_t b = 0; b < B; ++b) {
        bool any = false;
        for (std::size_t s = 0; s < S; ++s) any = any || pad.at(b, s);
        if (!any) throw ContractError("pool: sequence " + std::to_string(b) + " has no non-pad positions");
        for (std::size_t j = 0; j < D; ++j) {
            Real best = std::numeric_limits<Real>::lowest();
            std::size_t best_s = 0;
            for (std::size_t s = 0; s < S; ++s) {
                if (!pad.at(b, s)) continue;
                const Real v = h.data()[(b * S + s) * D + j];
                if (v > best) { best = v; best_s = s; }
            }
            out.data()[b * D + j] = best;
            argmax[b * D + j] = best_s;
        }
    }
    if (detail::should_record<Real>({&h})) {
        out.set_requires_grad(true);
        auto hi = h.impl(), oi = out.impl();
        Tape<Real>::active()->record("pool_max", {hi}, oi, [hi, oi, B, S, D, argmax = std::move(argmax)] {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < D; ++j)
                    hi->grad[(b * S + argmax[b * D + j]) * D + j] += oi->grad[b * D + j];
        });
    }
    return out;
}

// Mean over non-pad positions.
template <typename Real>
Tensor<Real> pool_mean(const Tensor<Real>& h, const BoolMatrix& pad) {
    detail::check_pool_mask(h.shape(), pad);
    const std::size_t B = h.dim(0), S = h.dim(1), D = h.dim(2);
    Tensor<Real> out = Tensor<Real>::zeros({B, D});
    std::vector<Real> inv_count(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t count = 0;
        for (std::size_t s = 0; s < S; ++s) {
            if (!pad.at(b, s)) continue;
            ++count;
            for (std::size_t j = 0; j < D; ++j) out.data()[b * D + j] += h.data()[(b * S + s) * D + j];
        }
        if (count == 0) throw ContractError("pool: sequence " + std::to_string(b) + " has no non-pad positions");
        inv_count[b] = Real(1) / Real(count);
        for (std::size_t j = 0; j < D; ++j) out.data()[b * D + j] *= inv_count[b];
    }
    if (detail::should_record<Real>({&h})) {
        out.set_requires_grad(true);
        auto hi = h.impl(), oi = out.impl();
        Tape<Real>::active()->record("pool_mean", {hi}, oi,
                                     [hi, oi, B, S, D, pad, inv_count = std::move(inv_count)] {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) {
                    if (!pad.at(b, s)) continue;
                    Real* gx = hi->grad.data() + (b * S + s) * D;
                    const Real* g = oi->grad.data() + b * D;
                    for (std::size_t j = 0; j < D; ++j) gx[j] += g[j] * inv_count[b];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

// Compares the analytic gradient of a scalar-valued function against central
// finite differences, element by element, and returns the worst relative
// error |a - n| / max(|a|, |n|, 1). Only defined for the 64-bit mode; 32-bit
// differences are too noisy for tight tolerances.
inline double finite_difference_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                      Tensor<double> x, double epsilon) {
    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape<double> tape;
        Tensor<double> y = f(x);
        if (y.numel() != 1) {
            throw ContractError("finite_difference_check: f must be scalar-valued, got shape " +
                                shape_str(y.shape()));
        }
        tape.backward(y);
        analytic = x.grad();
    }
    double worst = 0.0;
    {
        typename Tape<double>::Pause pause;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double saved = x.data()[i];
            x.data()[i] = saved + epsilon;
            const double up = f(x).item();
            x.data()[i] = saved - epsilon;
            const double down = f(x).item();
            x.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace lsc
