#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "a2fpn/rng.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

// Compares the taped gradient of a scalar-valued function against central
// finite differences. `build_loss` must recompute the loss from the current
// contents of `point` on every call (it runs once under a tape for the
// analytic gradient and twice per sampled coordinate without one).
//
// Returns max over sampled coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double finite_difference_check(const std::function<Tensor()>& build_loss, Tensor& point,
                                      double h = 1e-5, std::size_t max_coords = 20,
                                      std::uint64_t sample_seed = 42) {
    point.set_requires_grad(true);
    point.zero_grad();
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor loss = build_loss();
        tape.backward(loss);
    }
    std::vector<double> analytic(point.grad().begin(), point.grad().end());

    std::vector<std::size_t> coords(point.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > max_coords) {
        Rng rng(sample_seed);
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j =
                i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(coords.size() - 1 - i)));
            std::swap(coords[i], coords[j]);
        }
        coords.resize(max_coords);
    }

    double worst = 0.0;
    for (std::size_t idx : coords) {
        const double saved = point.data()[idx];
        point.mutable_data()[idx] = saved + h;
        const double up = build_loss().value();
        point.mutable_data()[idx] = saved - h;
        const double down = build_loss().value();
        point.mutable_data()[idx] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[idx]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[idx] - numeric) / denom);
    }
    return worst;
}

}  // namespace a2fpn
