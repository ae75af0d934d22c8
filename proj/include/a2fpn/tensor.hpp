#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "a2fpn/error.hpp"
#include "a2fpn/rng.hpp"

namespace a2fpn {

// ---------------------------------------------------------------------------
// Shape: 1 to 4 extents. Feature maps are batch x channel x height x width,
// matrices are rows x cols.
// ---------------------------------------------------------------------------
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims) {
        if (dims.size() < 1 || dims.size() > 4) throw ShapeError("rank must be 1..4");
        rank_ = dims.size();
        std::size_t i = 0;
        for (std::size_t d : dims) dims_[i++] = d;
    }
    explicit Shape(const std::vector<std::size_t>& dims) {
        if (dims.size() < 1 || dims.size() > 4) throw ShapeError("rank must be 1..4");
        rank_ = dims.size();
        for (std::size_t i = 0; i < rank_; ++i) dims_[i] = dims[i];
    }

    std::size_t rank() const { return rank_; }
    std::size_t operator[](std::size_t i) const { return dims_[i]; }
    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
        return n;
    }
    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (std::size_t i = 0; i < rank_; ++i)
            if (dims_[i] != o.dims_[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < rank_; ++i) os << (i ? "x" : "") << dims_[i];
        return os.str();
    }

private:
    std::array<std::size_t, 4> dims_ = {0, 0, 0, 0};
    std::size_t rank_ = 0;
};

// ---------------------------------------------------------------------------
// Allocation metering. Counts live tensor elements so tests can verify the
// peak-intermediate-storage model of the attention kernels. Single-level
// scopes, test-harness use only.
// ---------------------------------------------------------------------------
class AllocationMeter {
public:
    static AllocationMeter& instance() {
        thread_local AllocationMeter meter;
        return meter;
    }

    void add(std::int64_t n) {
        current_ += n;
        peak_ = std::max(peak_, current_);
    }
    void sub(std::int64_t n) { current_ -= n; }
    std::int64_t current() const { return current_; }

    class Scope {
    public:
        Scope() {
            auto& m = AllocationMeter::instance();
            baseline_ = m.current_;
            m.peak_ = m.current_;
        }
        // Peak number of elements allocated above the scope baseline.
        std::int64_t peak_elements() const {
            return AllocationMeter::instance().peak_ - baseline_;
        }

    private:
        std::int64_t baseline_ = 0;
    };

private:
    std::int64_t current_ = 0;
    std::int64_t peak_ = 0;
};

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const Tape* tape = nullptr;  // tape that recorded the producing node
    std::int64_t metered = 0;

    TensorImpl(Shape s, std::vector<double> d) : shape(s), data(std::move(d)) {
        metered = static_cast<std::int64_t>(data.size());
        AllocationMeter::instance().add(metered);
    }
    ~TensorImpl() { AllocationMeter::instance().sub(metered); }
    TensorImpl(const TensorImpl&) = delete;
    TensorImpl& operator=(const TensorImpl&) = delete;

    std::vector<double>& grad_ref() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
            AllocationMeter::instance().add(static_cast<std::int64_t>(grad.size()));
            metered += static_cast<std::int64_t>(grad.size());
        }
        return grad;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor: dense row-major 64-bit float array with value semantics (shared
// storage). Immutable after creation except through the optimizer and
// gradient accumulation.
// ---------------------------------------------------------------------------
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return Tensor(s, std::vector<double>(s.numel(), 0.0), requires_grad);
    }
    static Tensor full(Shape s, double v, bool requires_grad = false) {
        return Tensor(s, std::vector<double>(s.numel(), v), requires_grad);
    }
    static Tensor from(Shape s, std::vector<double> values, bool requires_grad = false) {
        if (s.numel() != values.size())
            throw ShapeError("data length " + std::to_string(values.size()) +
                             " does not match shape " + s.str());
        return Tensor(s, std::move(values), requires_grad);
    }
    static Tensor scalar(double v) { return from({1}, {v}); }
    static Tensor uniform(Shape s, Rng& rng, double lo, double hi, bool requires_grad = false) {
        std::vector<double> v(s.numel());
        for (auto& x : v) x = rng.uniform(lo, hi);
        return Tensor(s, std::move(v), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.rank(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    // Reserved for the optimizer and in-place initialization.
    std::span<double> mutable_data() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    // Accumulated gradient; zeros if backward never reached this tensor.
    std::span<const double> grad() const { return impl_->grad_ref(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    double value() const {
        if (numel() != 1) throw UsageError("value() requires a scalar, got shape " + shape().str());
        return impl_->data[0];
    }
    double at(std::initializer_list<std::size_t> idx) const {
        return impl_->data[flat_index(idx)];
    }

    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        const Shape& s = impl_->shape;
        if (idx.size() != s.rank()) throw UsageError("index rank mismatch");
        std::size_t flat = 0;
        std::size_t i = 0;
        for (std::size_t v : idx) flat = flat * s[i++] + v;
        return flat;
    }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    Tensor(Shape s, std::vector<double> d, bool rg)
        : impl_(std::make_shared<detail::TensorImpl>(s, std::move(d))) {
        impl_->requires_grad = rg;
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape: append-only record of backward closures. Backward traverses in
// strict reverse append order. A tape that has run backward rejects further
// recording and a second backward until reset() is called.
// ---------------------------------------------------------------------------
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void record(std::function<void()> fn) {
        if (consumed_)
            throw UsageError("tape already consumed by backward; call reset() before reuse");
        nodes_.push_back(std::move(fn));
    }

    void backward(const Tensor& loss) {
        if (consumed_)
            throw UsageError("backward called twice on the same tape; call reset() first");
        if (loss.numel() != 1)
            throw UsageError("backward requires a scalar loss, got shape " + loss.shape().str());
        if (loss.impl()->tape != nullptr && loss.impl()->tape != this)
            throw UsageError("loss was not produced under this tape");
        consumed_ = true;
        loss.impl()->grad_ref()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    static Tape* active() { return active_; }

    // RAII activation of a tape for the current thread.
    class Scope {
    public:
        explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    inline static thread_local Tape* active_ = nullptr;

    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

namespace detail {

// Returns the active tape if the result of an op over `inputs_require_grad`
// should be recorded, nullptr otherwise.
inline Tape* recording_tape(bool inputs_require_grad) {
    Tape* t = Tape::active();
    return (t != nullptr && inputs_require_grad) ? t : nullptr;
}

inline void mark_output(const Tensor& out, Tape* tape) {
    if (tape != nullptr) {
        out.impl()->requires_grad = true;
        out.impl()->tape = tape;
    }
}

// --- raw GEMM kernels, row-major, accumulate into C ---

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T. Four independent accumulator chains
// per row keep the FMA ports busy without reassociating any single dot
// product.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            const double* b0 = b + j * k;
            const double* b1 = b0 + k;
            const double* b2 = b1 + k;
            const double* b3 = b2 + k;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                s0 += av * b0[p];
                s1 += av * b1[p];
                s2 += av * b2[p];
                s3 += av * b3[p];
            }
            crow[j] += s0;
            crow[j + 1] += s1;
            crow[j + 2] += s2;
            crow[j + 3] += s3;
        }
        for (; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) +
                         ", got shape " + t.shape().str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: inner extents differ, " + a.shape().str() + " vs " +
                         b.shape().str());
    Tensor c = Tensor::zeros({m, n});
    detail::gemm_nn(a.data().data(), b.data().data(), c.mutable_data().data(), m, k, n);

    Tape* tape = detail::recording_tape(a.requires_grad() || b.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), bi = b.impl(), ci = c.impl();
        tape->record([ai, bi, ci, m, k, n] {
            const double* dc = ci->grad_ref().data();
            if (ai->requires_grad)  // dA += dC * B^T
                detail::gemm_nt(dc, bi->data.data(), ai->grad_ref().data(), m, n, k);
            if (bi->requires_grad)  // dB += A^T * dC
                detail::gemm_tn(ai->data.data(), dc, bi->grad_ref().data(), k, m, n);
        });
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor c = Tensor::zeros({n, m});
    const double* src = a.data().data();
    double* dst = c.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, m, n] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) da[i * n + j] += dc[j * m + i];
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch, " + a.shape().str() + " vs " + b.shape().str());
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.mutable_data().data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] + pb[i];

    Tape* tape = detail::recording_tape(a.requires_grad() || b.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), bi = b.impl(), ci = c.impl();
        tape->record([ai, bi, ci, n] {
            const double* dc = ci->grad_ref().data();
            if (ai->requires_grad) {
                double* da = ai->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
            }
            if (bi->requires_grad) {
                double* db = bi->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i) db[i] += dc[i];
            }
        });
    }
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* pc = c.mutable_data().data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] * s;

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, s, n] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i) da[i] += s * dc[i];
        });
    }
    return c;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* pc = c.mutable_data().data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] + s;

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, n] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
        });
    }
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch, " + a.shape().str() + " vs " + b.shape().str());
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.mutable_data().data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] * pb[i];

    Tape* tape = detail::recording_tape(a.requires_grad() || b.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), bi = b.impl(), ci = c.impl();
        tape->record([ai, bi, ci, n] {
            const double* dc = ci->grad_ref().data();
            if (ai->requires_grad) {
                double* da = ai->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i) da[i] += bi->data[i] * dc[i];
            }
            if (bi->requires_grad) {
                double* db = bi->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i) db[i] += ai->data[i] * dc[i];
            }
        });
    }
    return c;
}

inline Tensor relu(const Tensor& a) {
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* pc = c.mutable_data().data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] > 0.0 ? pa[i] : 0.0;

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, n] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i)
                if (ai->data[i] > 0.0) da[i] += dc[i];
        });
    }
    return c;
}

// Element order is preserved; only the shape changes.
inline Tensor reshape(const Tensor& a, Shape s) {
    if (s.numel() != a.numel())
        throw ShapeError("reshape: " + a.shape().str() + " -> " + s.str() +
                         " changes element count");
    Tensor c = Tensor::zeros(s);
    std::copy(a.data().begin(), a.data().end(), c.mutable_data().begin());

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        const std::size_t n = a.numel();
        tape->record([ai, ci, n] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
        });
    }
    return c;
}

inline Tensor permute4(const Tensor& a, std::array<std::size_t, 4> order) {
    detail::require_rank(a, 4, "permute4");
    std::array<bool, 4> seen = {false, false, false, false};
    for (std::size_t o : order) {
        if (o > 3 || seen[o]) throw UsageError("permute4: invalid axis order");
        seen[o] = true;
    }
    const Shape& s = a.shape();
    Shape out_shape{s[order[0]], s[order[1]], s[order[2]], s[order[3]]};
    Tensor c = Tensor::zeros(out_shape);

    const std::size_t in_stride3 = 1, in_stride2 = s[3], in_stride1 = s[2] * s[3],
                      in_stride0 = s[1] * s[2] * s[3];
    const std::array<std::size_t, 4> in_strides = {in_stride0, in_stride1, in_stride2, in_stride3};
    const double* src = a.data().data();
    double* dst = c.mutable_data().data();
    std::size_t flat = 0;
    for (std::size_t i0 = 0; i0 < out_shape[0]; ++i0)
        for (std::size_t i1 = 0; i1 < out_shape[1]; ++i1)
            for (std::size_t i2 = 0; i2 < out_shape[2]; ++i2)
                for (std::size_t i3 = 0; i3 < out_shape[3]; ++i3) {
                    const std::size_t src_idx = i0 * in_strides[order[0]] +
                                                i1 * in_strides[order[1]] +
                                                i2 * in_strides[order[2]] +
                                                i3 * in_strides[order[3]];
                    dst[flat++] = src[src_idx];
                }

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, out_shape, in_strides, order] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            std::size_t flat = 0;
            for (std::size_t i0 = 0; i0 < out_shape[0]; ++i0)
                for (std::size_t i1 = 0; i1 < out_shape[1]; ++i1)
                    for (std::size_t i2 = 0; i2 < out_shape[2]; ++i2)
                        for (std::size_t i3 = 0; i3 < out_shape[3]; ++i3) {
                            const std::size_t src_idx = i0 * in_strides[order[0]] +
                                                        i1 * in_strides[order[1]] +
                                                        i2 * in_strides[order[2]] +
                                                        i3 * in_strides[order[3]];
                            da[src_idx] += dc[flat++];
                        }
        });
    }
    return c;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_channels: no inputs");
    detail::require_rank(parts[0], 4, "concat_channels");
    const Shape& s0 = parts[0].shape();
    std::size_t total_c = 0;
    bool any_grad = false;
    for (const Tensor& t : parts) {
        detail::require_rank(t, 4, "concat_channels");
        const Shape& s = t.shape();
        if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: non-channel extents differ, " + s0.str() + " vs " +
                             s.str());
        total_c += s[1];
        any_grad = any_grad || t.requires_grad();
    }
    const std::size_t b = s0[0], h = s0[2], w = s0[3], hw = h * w;
    Tensor c = Tensor::zeros({b, total_c, h, w});
    double* dst = c.mutable_data().data();
    std::size_t c_off = 0;
    for (const Tensor& t : parts) {
        const std::size_t tc = t.shape()[1];
        const double* src = t.data().data();
        for (std::size_t bi = 0; bi < b; ++bi)
            std::copy(src + bi * tc * hw, src + (bi + 1) * tc * hw,
                      dst + (bi * total_c + c_off) * hw);
        c_off += tc;
    }

    Tape* tape = detail::recording_tape(any_grad);
    detail::mark_output(c, tape);
    if (tape) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const Tensor& t : parts) impls.push_back(t.impl());
        auto ci = c.impl();
        tape->record([impls, ci, b, total_c, hw] {
            const double* dc = ci->grad_ref().data();
            std::size_t c_off = 0;
            for (const auto& pi : impls) {
                const std::size_t tc = pi->shape[1];
                if (pi->requires_grad) {
                    double* da = pi->grad_ref().data();
                    for (std::size_t bi = 0; bi < b; ++bi) {
                        const double* from = dc + (bi * total_c + c_off) * hw;
                        double* to = da + bi * tc * hw;
                        for (std::size_t i = 0; i < tc * hw; ++i) to[i] += from[i];
                    }
                }
                c_off += tc;
            }
        });
    }
    return c;
}

// Extract batch item `index` as a 1 x C x H x W map.
inline Tensor select_batch(const Tensor& a, std::size_t index) {
    detail::require_rank(a, 4, "select_batch");
    const Shape& s = a.shape();
    if (index >= s[0]) throw UsageError("select_batch: index out of range");
    const std::size_t item = s[1] * s[2] * s[3];
    Tensor c = Tensor::zeros({1, s[1], s[2], s[3]});
    std::copy(a.data().begin() + index * item, a.data().begin() + (index + 1) * item,
              c.mutable_data().begin());

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, index, item] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data() + index * item;
            for (std::size_t i = 0; i < item; ++i) da[i] += dc[i];
        });
    }
    return c;
}

inline Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw UsageError("stack_batch: no inputs");
    detail::require_rank(items[0], 4, "stack_batch");
    const Shape& s0 = items[0].shape();
    bool any_grad = false;
    for (const Tensor& t : items) {
        if (t.shape() != s0)
            throw ShapeError("stack_batch: shape mismatch, " + s0.str() + " vs " +
                             t.shape().str());
        any_grad = any_grad || t.requires_grad();
    }
    const std::size_t per = s0.numel();
    Tensor c = Tensor::zeros({items.size() * s0[0], s0[1], s0[2], s0[3]});
    double* dst = c.mutable_data().data();
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(items[i].data().begin(), items[i].data().end(), dst + i * per);

    Tape* tape = detail::recording_tape(any_grad);
    detail::mark_output(c, tape);
    if (tape) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        for (const Tensor& t : items) impls.push_back(t.impl());
        auto ci = c.impl();
        tape->record([impls, ci, per] {
            const double* dc = ci->grad_ref().data();
            for (std::size_t i = 0; i < impls.size(); ++i) {
                if (!impls[i]->requires_grad) continue;
                double* da = impls[i]->grad_ref().data();
                for (std::size_t j = 0; j < per; ++j) da[j] += dc[i * per + j];
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Reductions and row/column helpers (2-D)
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    Tensor c = Tensor::zeros({1});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    c.mutable_data()[0] = acc;

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci] {
            if (!ai->requires_grad) return;
            const double g = ci->grad_ref()[0];
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) da[i] += g;
        });
    }
    return c;
}

// Sum down each column of an N x M matrix; result is 1 x M.
inline Tensor column_sums(const Tensor& a) {
    detail::require_rank(a, 2, "column_sums");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    Tensor c = Tensor::zeros({1, m});
    const double* pa = a.data().data();
    double* pc = c.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) pc[j] += pa[i * m + j];

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, n, m] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) da[i * m + j] += dc[j];
        });
    }
    return c;
}

// Broadcast-add a 1 x M row vector to every row of an N x M matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    detail::require_rank(a, 2, "add_rowvec");
    detail::require_rank(v, 2, "add_rowvec");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (v.shape()[0] != 1 || v.shape()[1] != m)
        throw ShapeError("add_rowvec: want 1x" + std::to_string(m) + ", got " + v.shape().str());
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pv = v.data().data();
    double* pc = c.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) pc[i * m + j] = pa[i * m + j] + pv[j];

    Tape* tape = detail::recording_tape(a.requires_grad() || v.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), vi = v.impl(), ci = c.impl();
        tape->record([ai, vi, ci, n, m] {
            const double* dc = ci->grad_ref().data();
            if (ai->requires_grad) {
                double* da = ai->grad_ref().data();
                for (std::size_t i = 0; i < n * m; ++i) da[i] += dc[i];
            }
            if (vi->requires_grad) {
                double* dv = vi->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) dv[j] += dc[i * m + j];
            }
        });
    }
    return c;
}

// Divide row i of an N x M matrix by the scalar c[i] (an N x 1 column).
inline Tensor div_colvec(const Tensor& a, const Tensor& d) {
    detail::require_rank(a, 2, "div_colvec");
    detail::require_rank(d, 2, "div_colvec");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (d.shape()[0] != n || d.shape()[1] != 1)
        throw ShapeError("div_colvec: want " + std::to_string(n) + "x1, got " + d.shape().str());
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pd = d.data().data();
    double* pc = c.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double inv = 1.0 / pd[i];
        for (std::size_t j = 0; j < m; ++j) pc[i * m + j] = pa[i * m + j] * inv;
    }

    Tape* tape = detail::recording_tape(a.requires_grad() || d.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), di = d.impl(), ci = c.impl();
        tape->record([ai, di, ci, n, m] {
            const double* dc = ci->grad_ref().data();
            if (ai->requires_grad) {
                double* da = ai->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i) {
                    const double inv = 1.0 / di->data[i];
                    for (std::size_t j = 0; j < m; ++j) da[i * m + j] += dc[i * m + j] * inv;
                }
            }
            if (di->requires_grad) {
                double* dd = di->grad_ref().data();
                for (std::size_t i = 0; i < n; ++i) {
                    const double inv = 1.0 / di->data[i];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j)
                        acc += dc[i * m + j] * ci->data[i * m + j];
                    dd[i] -= acc * inv;
                }
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Row-wise softmax and L2 normalization (2-D)
// ---------------------------------------------------------------------------

// Numerically stable: subtracts the row maximum before exponentiation.
inline Tensor softmax_rows(const Tensor& a) {
    detail::require_rank(a, 2, "softmax_rows");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* pc = c.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = pa + i * m;
        double* out = pc + i * m;
        double mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            out[j] = std::exp(row[j] - mx);
            z += out[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < m; ++j) out[j] *= inv;
    }

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, n, m] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            const double* y = ci->data.data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) dot += dc[i * m + j] * y[i * m + j];
                for (std::size_t j = 0; j < m; ++j)
                    da[i * m + j] += y[i * m + j] * (dc[i * m + j] - dot);
            }
        });
    }
    return c;
}

// Row i of the output is x_i / (||x_i||_2 + eps). Zero rows map to zero rows.
inline Tensor l2_normalize_rows(const Tensor& a, double eps) {
    detail::require_rank(a, 2, "l2_normalize_rows");
    if (eps <= 0.0) throw UsageError("l2_normalize_rows: eps must be positive");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    Tensor c = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* pc = c.mutable_data().data();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = pa + i * m;
        double sq = 0.0;
        for (std::size_t j = 0; j < m; ++j) sq += row[j] * row[j];
        norms[i] = std::sqrt(sq);
        const double inv = 1.0 / (norms[i] + eps);
        for (std::size_t j = 0; j < m; ++j) pc[i * m + j] = row[j] * inv;
    }

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(c, tape);
    if (tape) {
        auto ai = a.impl(), ci = c.impl();
        tape->record([ai, ci, norms = std::move(norms), eps, n, m] {
            if (!ai->requires_grad) return;
            const double* dc = ci->grad_ref().data();
            const double* x = ai->data.data();
            double* da = ai->grad_ref().data();
            for (std::size_t i = 0; i < n; ++i) {
                const double nn = norms[i];
                const double s = nn + eps;
                if (nn == 0.0) {
                    for (std::size_t j = 0; j < m; ++j) da[i * m + j] += dc[i * m + j] / s;
                    continue;
                }
                double xd = 0.0;
                for (std::size_t j = 0; j < m; ++j) xd += x[i * m + j] * dc[i * m + j];
                const double coef = xd / (nn * s * s);
                for (std::size_t j = 0; j < m; ++j)
                    da[i * m + j] += dc[i * m + j] / s - x[i * m + j] * coef;
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling (B x C x H x W)
// ---------------------------------------------------------------------------

inline Tensor upsample_nearest2x(const Tensor& a) {
    detail::require_rank(a, 4, "upsample_nearest2x");
    const Shape& s = a.shape();
    const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
    Tensor out = Tensor::zeros({b, c, 2 * h, 2 * w});
    const double* src = a.data().data();
    double* dst = out.mutable_data().data();
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const double* plane = src + bc * h * w;
        double* oplane = dst + bc * 4 * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
            const double* irow = plane + (i / 2) * w;
            double* orow = oplane + i * 2 * w;
            for (std::size_t j = 0; j < 2 * w; ++j) orow[j] = irow[j / 2];
        }
    }

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(out, tape);
    if (tape) {
        auto ai = a.impl(), oi = out.impl();
        tape->record([ai, oi, b, c, h, w] {
            if (!ai->requires_grad) return;
            const double* dc = oi->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t bc = 0; bc < b * c; ++bc) {
                double* plane = da + bc * h * w;
                const double* oplane = dc + bc * 4 * h * w;
                for (std::size_t i = 0; i < 2 * h; ++i)
                    for (std::size_t j = 0; j < 2 * w; ++j)
                        plane[(i / 2) * w + j / 2] += oplane[i * 2 * w + j];
            }
        });
    }
    return out;
}

// 2x2 average pooling, stride 2. Requires even spatial extents; the exact
// counterpart of upsample_nearest2x for the downsampling pathway.
inline Tensor avgpool2x2(const Tensor& a) {
    detail::require_rank(a, 4, "avgpool2x2");
    const Shape& s = a.shape();
    const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
    if (h % 2 != 0 || w % 2 != 0)
        throw ConfigError("avgpool2x2: spatial extents must be even, got " + s.str());
    Tensor out = Tensor::zeros({b, c, h / 2, w / 2});
    const double* src = a.data().data();
    double* dst = out.mutable_data().data();
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const double* plane = src + bc * h * w;
        double* oplane = dst + bc * (h / 2) * (w / 2);
        for (std::size_t i = 0; i < h / 2; ++i)
            for (std::size_t j = 0; j < w / 2; ++j)
                oplane[i * (w / 2) + j] =
                    0.25 * (plane[(2 * i) * w + 2 * j] + plane[(2 * i) * w + 2 * j + 1] +
                            plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1]);
    }

    Tape* tape = detail::recording_tape(a.requires_grad());
    detail::mark_output(out, tape);
    if (tape) {
        auto ai = a.impl(), oi = out.impl();
        tape->record([ai, oi, b, c, h, w] {
            if (!ai->requires_grad) return;
            const double* dc = oi->grad_ref().data();
            double* da = ai->grad_ref().data();
            for (std::size_t bc = 0; bc < b * c; ++bc) {
                double* plane = da + bc * h * w;
                const double* oplane = dc + bc * (h / 2) * (w / 2);
                for (std::size_t i = 0; i < h / 2; ++i)
                    for (std::size_t j = 0; j < w / 2; ++j) {
                        const double g = 0.25 * oplane[i * (w / 2) + j];
                        plane[(2 * i) * w + 2 * j] += g;
                        plane[(2 * i) * w + 2 * j + 1] += g;
                        plane[(2 * i + 1) * w + 2 * j] += g;
                        plane[(2 * i + 1) * w + 2 * j + 1] += g;
                    }
            }
        });
    }
    return out;
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace a2fpn
