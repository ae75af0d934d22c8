#pragma once

#include <functional>
#include <string>
#include <vector>

#include "a2fpn/nn.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

enum class AttentionVariant { dot_product, kernel, linear };

struct AttentionConfig {
    std::size_t d_k = 32;
    std::size_t d_v = 64;
    AttentionVariant variant = AttentionVariant::linear;
    double eps = 1e-12;  // L2 normalization epsilon
};

// Query/key/value projection weights. W_q and W_k share their shape.
struct ProjectionWeights {
    Tensor w_q;  // D_x x D_k
    Tensor w_k;  // D_x x D_k
    Tensor w_v;  // D_x x D_v

    static ProjectionWeights init(std::size_t d_x, std::size_t d_k, std::size_t d_v, Rng& rng) {
        return {init_fan_in_uniform({d_x, d_k}, d_x, rng),
                init_fan_in_uniform({d_x, d_k}, d_x, rng),
                init_fan_in_uniform({d_x, d_v}, d_x, rng)};
    }
};

struct QkvMatrices {
    Tensor q;  // N x D_k
    Tensor k;  // N x D_k
    Tensor v;  // N x D_v
};

inline QkvMatrices project_qkv(const Tensor& x, const ProjectionWeights& w) {
    if (w.w_q.shape() != w.w_k.shape())
        throw ShapeError("project_qkv: W_q " + w.w_q.shape().str() + " and W_k " +
                         w.w_k.shape().str() + " must match");
    return {matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)};
}

namespace detail {

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
    require_rank(q, 2, op);
    require_rank(k, 2, op);
    require_rank(v, 2, op);
    if (q.shape()[1] != k.shape()[1])
        throw ShapeError(std::string(op) + ": query/key widths differ, " + q.shape().str() +
                         " vs " + k.shape().str());
    if (q.shape()[0] != k.shape()[0] || q.shape()[0] != v.shape()[0])
        throw ShapeError(std::string(op) + ": row counts differ, q " + q.shape().str() + ", k " +
                         k.shape().str() + ", v " + v.shape().str());
}

constexpr double kDegenerateDenominator = 1e-30;

inline void check_denominator(const Tensor& denom, const char* op) {
    const auto d = denom.data();
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d[i] <= kDegenerateDenominator)
            throw DegenerateKernelError(std::string(op) + ": degenerate denominator " +
                                        std::to_string(d[i]) + " at row " + std::to_string(i));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Softmax dot-product attention: softmax_rows(Q K^T) V. Materializes the
// N x N weight matrix; quadratic time and memory in N.
// ---------------------------------------------------------------------------
inline Tensor dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    detail::check_qkv(q, k, v, "dot_product_attention");
    Tensor weights = softmax_rows(matmul(q, transpose(k)));
    return matmul(weights, v);
}

// ---------------------------------------------------------------------------
// Generalized kernel attention with factorized similarity phi(q)^T psi(k).
// Computed in the reassociated order: psi(K)^T V and the psi column sums are
// built once, then left-multiplied by phi(Q); the per-row denominator
// phi(q_i) . sum_j psi(k_j) broadcasts across the output columns.
// ---------------------------------------------------------------------------
using FeatureMap = std::function<Tensor(const Tensor&)>;

inline Tensor kernel_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const FeatureMap& phi, const FeatureMap& psi) {
    detail::check_qkv(q, k, v, "kernel_attention");
    Tensor qf = phi(q);  // N x D'
    Tensor kf = psi(k);  // N x D'
    if (qf.shape()[1] != kf.shape()[1])
        throw ShapeError("kernel_attention: feature widths differ, " + qf.shape().str() + " vs " +
                         kf.shape().str());
    Tensor kv = matmul(transpose(kf), v);            // D' x D_v
    Tensor key_sum = transpose(column_sums(kf));     // D' x 1
    Tensor numerator = matmul(qf, kv);               // N x D_v
    Tensor denominator = matmul(qf, key_sum);        // N x 1
    detail::check_denominator(denominator, "kernel_attention");
    return div_colvec(numerator, denominator);
}

// ---------------------------------------------------------------------------
// Linear attention: similarity 1 + q_hat . k_hat after L2-normalizing query
// and key rows. The value sum, the key-value product K_hat^T V and the key
// sum are each built once and reused for every query row, so no N x N
// intermediate ever exists.
// ---------------------------------------------------------------------------
inline Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               double eps = 1e-12) {
    detail::check_qkv(q, k, v, "linear_attention");
    const std::size_t n = q.shape()[0];
    Tensor q_hat = l2_normalize_rows(q, eps);
    Tensor k_hat = l2_normalize_rows(k, eps);
    Tensor value_sum = column_sums(v);                         // 1 x D_v
    Tensor key_value = matmul(transpose(k_hat), v);            // D_k x D_v
    Tensor key_sum = transpose(column_sums(k_hat));            // D_k x 1
    Tensor numerator = add_rowvec(matmul(q_hat, key_value), value_sum);          // N x D_v
    Tensor denominator = add_scalar(matmul(q_hat, key_sum), static_cast<double>(n));  // N x 1
    detail::check_denominator(denominator, "linear_attention");
    Tensor out = div_colvec(numerator, denominator);
#ifdef A2FPN_FAULT_INJECT_LINEAR_ATTENTION
    // Fault-injection build: perturb one element so equivalence checks trip.
    out.mutable_data()[0] += 1e-6;
#endif
    return out;
}

// ---------------------------------------------------------------------------
// Row-wise quadratic reference for linear_attention: the explicit
// (i, j) double loop over pairwise weights 1 + q_hat . k_hat. Test-harness
// ground truth; O(N^2) time.
// ---------------------------------------------------------------------------
inline Tensor linear_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                                      double eps = 1e-12) {
    detail::check_qkv(q, k, v, "linear_attention_oracle");
    const std::size_t n = q.shape()[0], dk = q.shape()[1], dv = v.shape()[1];
    Tensor q_hat = l2_normalize_rows(q, eps);
    Tensor k_hat = l2_normalize_rows(k, eps);
    const double* pq = q_hat.data().data();
    const double* pk = k_hat.data().data();
    const double* pv = v.data().data();
    Tensor out = Tensor::zeros({n, dv});
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> num(dv, 0.0);
        double den = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double sim = 1.0;
            for (std::size_t d = 0; d < dk; ++d) sim += pq[i * dk + d] * pk[j * dk + d];
            den += sim;
            for (std::size_t d = 0; d < dv; ++d) num[d] += sim * pv[j * dv + d];
        }
        if (den <= detail::kDegenerateDenominator)
            throw DegenerateKernelError("linear_attention_oracle: degenerate denominator " +
                                        std::to_string(den) + " at row " + std::to_string(i));
        for (std::size_t d = 0; d < dv; ++d) po[i * dv + d] = num[d] / den;
    }
    return out;
}

// ---------------------------------------------------------------------------
// LAM block: linear attention over a flattened B x C x H x W feature map.
// Q and K come from 1x1 convolutions to C/2 channels, V keeps C channels;
// each batch item is attended independently and reshaped back.
// ---------------------------------------------------------------------------
struct LamWeights {
    Tensor w_q, b_q;  // C   -> C/2
    Tensor w_k, b_k;  // C   -> C/2
    Tensor w_v, b_v;  // C   -> C

    static LamWeights init(std::size_t channels, Rng& rng) {
        if (channels % 2 != 0)
            throw ConfigError("LamWeights: channel count must be even, got " +
                              std::to_string(channels));
        const std::size_t half = channels / 2;
        return {init_conv_weight(half, channels, 1, rng),     Tensor::zeros({half}, true),
                init_conv_weight(half, channels, 1, rng),     Tensor::zeros({half}, true),
                init_conv_weight(channels, channels, 1, rng), Tensor::zeros({channels}, true)};
    }
};

inline Tensor lam_block(const Tensor& f, const LamWeights& w, double eps = 1e-12) {
    detail::require_rank(f, 4, "lam_block");
    const Shape& s = f.shape();
    const std::size_t b = s[0], c = s[1], h = s[2], wd = s[3];
    if (c % 2 != 0)
        throw ConfigError("lam_block: channel count must be even, got " + std::to_string(c));
    const std::size_t half = c / 2;
    const std::size_t n = h * wd;

    Tensor qmap = conv2d(f, w.w_q, w.b_q, 1, 0);  // B x C/2 x H x W
    Tensor kmap = conv2d(f, w.w_k, w.b_k, 1, 0);
    Tensor vmap = conv2d(f, w.w_v, w.b_v, 1, 0);  // B x C x H x W

    std::vector<Tensor> outputs;
    outputs.reserve(b);
    for (std::size_t bi = 0; bi < b; ++bi) {
        // flatten the spatial grid to N rows
        Tensor q = reshape(permute4(select_batch(qmap, bi), {0, 2, 3, 1}), {n, half});
        Tensor k = reshape(permute4(select_batch(kmap, bi), {0, 2, 3, 1}), {n, half});
        Tensor v = reshape(permute4(select_batch(vmap, bi), {0, 2, 3, 1}), {n, c});
        Tensor attended = linear_attention(q, k, v, eps);
        outputs.push_back(permute4(reshape(attended, {1, h, wd, c}), {0, 3, 1, 2}));
    }
    return stack_batch(outputs);
}

}  // namespace a2fpn
