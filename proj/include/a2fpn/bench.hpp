#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "a2fpn/attention.hpp"
#include "a2fpn/rng.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

inline std::string variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::dot_product: return "dot_product";
        case AttentionVariant::kernel: return "kernel";
        case AttentionVariant::linear: return "linear";
    }
    return "linear";
}

// ---------------------------------------------------------------------------
// Analytic cost models. Exact functions of (N, D_k, D_v, variant) with no
// measurement noise. Counting convention: 1 MACC = 1 multiply + 1 add;
// softmax exponentials and per-element normalization each count as one
// MACC-equivalent. Q/K/V projection cost is identical for both variants and
// excluded; projection_macc reports it separately assuming input width
// D_x = D_v.
// ---------------------------------------------------------------------------

inline std::uint64_t macc_model(std::size_t n, std::size_t d_k, std::size_t d_v,
                                AttentionVariant variant) {
    if (n == 0 || d_k == 0 || d_v == 0) throw ConfigError("macc_model: dims must be positive");
    const std::uint64_t nn = n;
    switch (variant) {
        case AttentionVariant::dot_product:
            // similarity + weighting + softmax exp + softmax normalize
            return nn * nn * (d_k + d_v + 2);
        case AttentionVariant::linear:
            // key-value product + query product + key-sum terms
            // + numerator add/divide + L2 normalization of Q and K
            return 2 * nn * d_k * d_v + nn * d_k + nn * d_v + 2 * nn * d_k;
        case AttentionVariant::kernel:
            throw ConfigError("macc_model: kernel variant depends on the feature maps");
    }
    return 0;
}

inline std::uint64_t projection_macc(std::size_t n, std::size_t d_k, std::size_t d_v) {
    return static_cast<std::uint64_t>(n) * d_v * (2 * d_k + d_v);
}

// Peak intermediate storage in 64-bit elements, operands included. The
// dot-product peak carries the similarity matrix and its softmax (two N x N
// buffers live at once); linear attention keeps only the normalized copies,
// the D_k x D_v key-value product, the key/value sums and the N-row
// numerator, denominator and output.
inline std::uint64_t memory_model(std::size_t n, std::size_t d_k, std::size_t d_v,
                                  AttentionVariant variant) {
    if (n == 0 || d_k == 0 || d_v == 0) throw ConfigError("memory_model: dims must be positive");
    const std::uint64_t nn = n;
    const std::uint64_t operands = nn * (2 * d_k + d_v);
    switch (variant) {
        case AttentionVariant::dot_product:
            return 2 * nn * nn + nn * d_k + nn * d_v + operands;
        case AttentionVariant::linear:
            return 2 * nn * d_k + 2 * nn * d_v + nn + d_k * d_v + d_k + 2 * d_v + operands;
        case AttentionVariant::kernel:
            throw ConfigError("memory_model: kernel variant depends on the feature maps");
    }
    return 0;
}

// Smallest N at which the linear model beats the dot-product model.
inline std::size_t macc_crossover(std::size_t d_k, std::size_t d_v) {
    std::size_t n = 1;
    while (macc_model(n, d_k, d_v, AttentionVariant::linear) >=
           macc_model(n, d_k, d_v, AttentionVariant::dot_product))
        ++n;
    return n;
}

// ---------------------------------------------------------------------------
// Empirical timing. Runs the library's attention implementations themselves
// (there is no benchmark-special kernel) on seeded random inputs,
// single-threaded, and reports the median of `repetitions` runs after one
// discarded warmup.
// ---------------------------------------------------------------------------

struct TimingConfig {
    std::size_t d_k = 32;
    std::size_t d_v = 64;
    std::size_t repetitions = 5;
    std::uint64_t seed = 42;
    std::size_t dot_n_cap = 8192;  // N beyond this would allocate O(N^2); refuse
    int threads = 1;
};

struct CostRow {
    AttentionVariant variant = AttentionVariant::linear;
    std::size_t n = 0, d_k = 0, d_v = 0;
    std::uint64_t macc = 0;
    std::uint64_t proj_macc = 0;
    std::uint64_t peak_elements = 0;
    double median_ns = 0.0;
    bool failed = false;
    std::string note;
};

inline CostRow time_attention(AttentionVariant variant, std::size_t n, const TimingConfig& cfg) {
    if (cfg.threads != 1)
        throw ConfigError("time_attention: timing runs are strictly single-threaded");
    if (cfg.repetitions < 1) throw ConfigError("time_attention: need at least one repetition");
    if (variant == AttentionVariant::dot_product && n > cfg.dot_n_cap)
        throw CapacityError("time_attention: dot-product at N=" + std::to_string(n) +
                            " exceeds the configured cap " + std::to_string(cfg.dot_n_cap));

    CostRow row;
    row.variant = variant;
    row.n = n;
    row.d_k = cfg.d_k;
    row.d_v = cfg.d_v;
    row.macc = macc_model(n, cfg.d_k, cfg.d_v, variant);
    row.proj_macc = projection_macc(n, cfg.d_k, cfg.d_v);
    row.peak_elements = memory_model(n, cfg.d_k, cfg.d_v, variant);

    Rng rng(cfg.seed + n);
    Tensor q = Tensor::uniform({n, cfg.d_k}, rng, -1.0, 1.0);
    Tensor k = Tensor::uniform({n, cfg.d_k}, rng, -1.0, 1.0);
    Tensor v = Tensor::uniform({n, cfg.d_v}, rng, -1.0, 1.0);

    auto run_once = [&] {
        return variant == AttentionVariant::dot_product ? dot_product_attention(q, k, v)
                                                        : linear_attention(q, k, v);
    };
    run_once();  // warmup, discarded

    std::vector<double> times_ns;
    times_ns.reserve(cfg.repetitions);
    for (std::size_t r = 0; r < cfg.repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor out = run_once();
        const auto t1 = std::chrono::steady_clock::now();
        times_ns.push_back(
            static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
        if (out.numel() != n * cfg.d_v) throw UsageError("time_attention: unexpected output size");
    }
    std::sort(times_ns.begin(), times_ns.end());
    row.median_ns = times_ns[times_ns.size() / 2];
    return row;
}

inline std::vector<CostRow> run_timing(AttentionVariant variant, const std::vector<std::size_t>& n_values,
                                       const TimingConfig& cfg) {
    std::vector<CostRow> rows;
    rows.reserve(n_values.size());
    for (std::size_t n : n_values) {
        try {
            rows.push_back(time_attention(variant, n, cfg));
        } catch (const CapacityError& e) {
            CostRow row;
            row.variant = variant;
            row.n = n;
            row.d_k = cfg.d_k;
            row.d_v = cfg.d_v;
            row.failed = true;
            row.note = e.what();
            rows.push_back(row);
        }
    }
    return rows;
}

// CSV with one comment line documenting the counting convention, one header
// row, then one row per (variant, N). Rows that hit the capacity cap are
// skipped (their note is surfaced by the caller).
inline std::string emit_curves(const std::vector<CostRow>& rows) {
    if (rows.empty()) throw UsageError("emit_curves: no rows to emit");
    std::ostringstream os;
    os << "# 1 MACC = 1 multiply + 1 add; softmax exp/normalize count 1 MACC-equivalent per "
          "element; Q/K/V projection cost excluded from macc, reported as proj_macc with "
          "D_x = D_v\n";
    os << "variant,n,d_k,d_v,macc,proj_macc,peak_elements,median_ns\n";
    for (const CostRow& r : rows) {
        if (r.failed) continue;
        os << variant_name(r.variant) << ',' << r.n << ',' << r.d_k << ',' << r.d_v << ','
           << r.macc << ',' << r.proj_macc << ',' << r.peak_elements << ','
           << static_cast<std::uint64_t>(r.median_ns) << '\n';
    }
    return os.str();
}

}  // namespace a2fpn
