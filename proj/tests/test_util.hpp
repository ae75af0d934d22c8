#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "a2fpn/rng.hpp"
#include "a2fpn/tensor.hpp"

namespace testutil {

// Independent triple-loop matrix product, the ground truth for matmul.
inline std::vector<double> matmul_oracle(const std::vector<double>& a,
                                         const std::vector<double>& b, std::size_t m,
                                         std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

inline double max_abs_diff(const a2fpn::Tensor& a, const a2fpn::Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

inline double max_abs_diff(const a2fpn::Tensor& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b[i]));
    return worst;
}

}  // namespace testutil
