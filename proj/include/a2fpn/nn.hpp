#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "a2fpn/labelmap.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

namespace detail {

// Gather k x k patches of one image plane-set into a (H'*W') x (Cin*k*k)
// row-major matrix. Out-of-bounds taps read zero.
inline void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
                   double* patches) {
    const std::size_t cols = cin * k * k;
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double* row = patches + (oy * ow + ox) * cols;
            std::size_t col = 0;
            for (std::size_t c = 0; c < cin; ++c) {
                const double* plane = x + c * h * w;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) -
                        static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kx = 0; kx < k; ++kx, ++col) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
                        row[col] = (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                                    ix < static_cast<std::ptrdiff_t>(w))
                                       ? plane[iy * w + ix]
                                       : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-add the patch-layout gradient back onto the input plane-set.
inline void col2im_add(const double* patches, std::size_t cin, std::size_t h, std::size_t w,
                       std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh,
                       std::size_t ow, double* dx) {
    const std::size_t cols = cin * k * k;
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* row = patches + (oy * ow + ox) * cols;
            std::size_t col = 0;
            for (std::size_t c = 0; c < cin; ++c) {
                double* plane = dx + c * h * w;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) -
                        static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kx = 0; kx < k; ++kx, ++col) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                            ix < static_cast<std::ptrdiff_t>(w))
                            plane[iy * w + ix] += row[col];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with bias, kernels 1x1 or 3x3.
//   x: B x Cin x H x W, w: Cout x Cin x k x k, b: Cout
// ---------------------------------------------------------------------------
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(w, 4, "conv2d");
    detail::require_rank(b, 1, "conv2d");
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const std::size_t k = ws[2];
    if (k != ws[3] || (k != 1 && k != 3))
        throw ConfigError("conv2d: kernel must be 1x1 or 3x3, got " + ws.str());
    if (ws[1] != xs[1])
        throw ShapeError("conv2d: input channels differ, x " + xs.str() + " vs w " + ws.str());
    if (b.shape()[0] != ws[0])
        throw ShapeError("conv2d: bias extent " + b.shape().str() + " vs w " + ws.str());
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    const std::size_t bsz = xs[0], cin = xs[1], h = xs[2], wd = xs[3], cout = ws[0];
    if (h + 2 * pad < k || wd + 2 * pad < k || (h + 2 * pad - k) % stride != 0 ||
        (wd + 2 * pad - k) % stride != 0)
        throw ConfigError("conv2d: non-integral output extent for input " + xs.str() +
                          ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                          ", pad " + std::to_string(pad));
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - k) / stride + 1;
    const std::size_t cols = cin * k * k;

    Tensor out = Tensor::zeros({bsz, cout, oh, ow});
    {
        std::vector<double> patches(oh * ow * cols);
        std::vector<double> rows(oh * ow * cout);
        std::vector<double> w_t(cols * cout);  // cols x cout layout feeds the fast kernel
        {
            const double* pw = w.data().data();
            for (std::size_t c = 0; c < cout; ++c)
                for (std::size_t p = 0; p < cols; ++p) w_t[p * cout + c] = pw[c * cols + p];
        }
        for (std::size_t bi = 0; bi < bsz; ++bi) {
            detail::im2col(x.data().data() + bi * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow,
                           patches.data());
            std::fill(rows.begin(), rows.end(), 0.0);
            // rows[(oy*ow+ox), cout] = patches * W^T
            detail::gemm_nn(patches.data(), w_t.data(), rows.data(), oh * ow, cols, cout);
            double* dst = out.mutable_data().data() + bi * cout * oh * ow;
            const double* bias = b.data().data();
            for (std::size_t c = 0; c < cout; ++c)
                for (std::size_t p = 0; p < oh * ow; ++p) dst[c * oh * ow + p] = rows[p * cout + c] + bias[c];
        }
    }

    Tape* tape =
        detail::recording_tape(x.requires_grad() || w.requires_grad() || b.requires_grad());
    detail::mark_output(out, tape);
    if (tape) {
        auto xi = x.impl(), wi = w.impl(), bi_ = b.impl(), oi = out.impl();
        tape->record([xi, wi, bi_, oi, bsz, cin, h, wd, cout, k, stride, pad, oh, ow, cols] {
            const double* dout = oi->grad_ref().data();
            std::vector<double> patches(oh * ow * cols);
            std::vector<double> drows(oh * ow * cout);
            std::vector<double> dpatches;
            for (std::size_t bidx = 0; bidx < bsz; ++bidx) {
                const double* dslice = dout + bidx * cout * oh * ow;
                // dout in row layout: (oy*ow+ox) x cout
                for (std::size_t c = 0; c < cout; ++c)
                    for (std::size_t p = 0; p < oh * ow; ++p)
                        drows[p * cout + c] = dslice[c * oh * ow + p];
                if (bi_->requires_grad) {
                    double* db = bi_->grad_ref().data();
                    for (std::size_t c = 0; c < cout; ++c) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < oh * ow; ++p) acc += dslice[c * oh * ow + p];
                        db[c] += acc;
                    }
                }
                if (wi->requires_grad || xi->requires_grad) {
                    detail::im2col(xi->data.data() + bidx * cin * h * wd, cin, h, wd, k, stride,
                                   pad, oh, ow, patches.data());
                }
                if (wi->requires_grad) {
                    // dW (cout x cols) += drows^T * patches
                    detail::gemm_tn(drows.data(), patches.data(), wi->grad_ref().data(), cout,
                                    oh * ow, cols);
                }
                if (xi->requires_grad) {
                    dpatches.assign(oh * ow * cols, 0.0);
                    // dpatches = drows * W
                    detail::gemm_nn(drows.data(), wi->data.data(), dpatches.data(), oh * ow, cout,
                                    cols);
                    detail::col2im_add(dpatches.data(), cin, h, wd, k, stride, pad, oh, ow,
                                       xi->grad_ref().data() + bidx * cin * h * wd);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over B x C x H x W with per-channel statistics.
// ---------------------------------------------------------------------------

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          BatchNormState& state, bool train) {
    detail::require_rank(x, 4, "batchnorm2d");
    const Shape& s = x.shape();
    const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
    if (gamma.shape()[0] != c || beta.shape()[0] != c || state.running_mean.size() != c)
        throw ShapeError("batchnorm2d: channel mismatch for input " + s.str());
    const std::size_t m = b * h * w;
    if (train && m < 2)
        throw ConfigError("batchnorm2d: train mode needs at least 2 samples per channel, got " +
                          std::to_string(m));

    std::vector<double> mean(c, 0.0), var(c, 0.0);
    const double* px = x.data().data();
    if (train) {
        for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
                const double* plane = px + (bi * c + ci) * h * w;
                for (std::size_t p = 0; p < h * w; ++p) acc += plane[p];
            }
            mean[ci] = acc / static_cast<double>(m);
            double sq = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
                const double* plane = px + (bi * c + ci) * h * w;
                for (std::size_t p = 0; p < h * w; ++p) {
                    const double d = plane[p] - mean[ci];
                    sq += d * d;
                }
            }
            var[ci] = sq / static_cast<double>(m);
            state.running_mean[ci] =
                (1.0 - state.momentum) * state.running_mean[ci] + state.momentum * mean[ci];
            state.running_var[ci] =
                (1.0 - state.momentum) * state.running_var[ci] + state.momentum * var[ci];
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    std::vector<double> inv_std(c);
    for (std::size_t ci = 0; ci < c; ++ci) inv_std[ci] = 1.0 / std::sqrt(var[ci] + state.eps);

    Tensor out = Tensor::zeros(s);
    double* po = out.mutable_data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double* plane = px + (bi * c + ci) * h * w;
            double* oplane = po + (bi * c + ci) * h * w;
            const double a = pg[ci] * inv_std[ci];
            const double off = pb[ci] - a * mean[ci];
            for (std::size_t p = 0; p < h * w; ++p) oplane[p] = a * plane[p] + off;
        }

    Tape* tape = detail::recording_tape(x.requires_grad() || gamma.requires_grad() ||
                                        beta.requires_grad());
    detail::mark_output(out, tape);
    if (tape) {
        auto xi = x.impl(), gi = gamma.impl(), bi_ = beta.impl(), oi = out.impl();
        tape->record([xi, gi, bi_, oi, mean = std::move(mean), inv_std = std::move(inv_std), b, c,
                      h, w, m, train] {
            const double* dy = oi->grad_ref().data();
            const double* px = xi->data.data();
            for (std::size_t ci = 0; ci < c; ++ci) {
                // per-channel reductions over the batch and spatial extents
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t bi2 = 0; bi2 < b; ++bi2) {
                    const double* dplane = dy + (bi2 * c + ci) * h * w;
                    const double* xplane = px + (bi2 * c + ci) * h * w;
                    for (std::size_t p = 0; p < h * w; ++p) {
                        const double xhat = (xplane[p] - mean[ci]) * inv_std[ci];
                        sum_dy += dplane[p];
                        sum_dy_xhat += dplane[p] * xhat;
                    }
                }
                if (gi->requires_grad) gi->grad_ref()[ci] += sum_dy_xhat;
                if (bi_->requires_grad) bi_->grad_ref()[ci] += sum_dy;
                if (xi->requires_grad) {
                    double* dx = xi->grad_ref().data();
                    const double g = gi->data[ci];
                    const double md = static_cast<double>(m);
                    for (std::size_t bi2 = 0; bi2 < b; ++bi2) {
                        const double* dplane = dy + (bi2 * c + ci) * h * w;
                        const double* xplane = px + (bi2 * c + ci) * h * w;
                        double* dxplane = dx + (bi2 * c + ci) * h * w;
                        for (std::size_t p = 0; p < h * w; ++p) {
                            if (train) {
                                const double xhat = (xplane[p] - mean[ci]) * inv_std[ci];
                                dxplane[p] += g * inv_std[ci] *
                                              (dplane[p] - sum_dy / md - xhat * sum_dy_xhat / md);
                            } else {
                                dxplane[p] += g * inv_std[ci] * dplane[p];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pixel-wise cross entropy: mean over non-ignored pixels of -log p[label].
// ---------------------------------------------------------------------------
inline Tensor cross_entropy_loss(const Tensor& logits, const LabelMap& labels,
                                 std::optional<std::int32_t> ignore_label = std::nullopt) {
    detail::require_rank(logits, 4, "cross_entropy_loss");
    const Shape& s = logits.shape();
    const std::size_t b = s[0], k = s[1], h = s[2], w = s[3];
    if (labels.batch != b || labels.height != h || labels.width != w)
        throw ShapeError("cross_entropy_loss: logits " + s.str() + " vs labels " +
                         std::to_string(labels.batch) + "x" + std::to_string(labels.height) + "x" +
                         std::to_string(labels.width));

    const double* pl = logits.data().data();
    std::vector<double> probs(logits.numel());
    double loss_acc = 0.0;
    std::size_t counted = 0;
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const std::int32_t label = labels.at(bi, i, j);
                const bool ignored = ignore_label.has_value() && label == *ignore_label;
                if (!ignored && (label < 0 || label >= static_cast<std::int32_t>(k)))
                    throw DataError("cross_entropy_loss: label " + std::to_string(label) +
                                    " out of range [0," + std::to_string(k) + ") at pixel (b=" +
                                    std::to_string(bi) + ", y=" + std::to_string(i) + ", x=" +
                                    std::to_string(j) + ")");
                const std::size_t base = ((bi * k) * h + i) * w + j;
                const std::size_t chan_stride = h * w;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, pl[base + c * chan_stride]);
                double z = 0.0;
                for (std::size_t c = 0; c < k; ++c) {
                    const double e = std::exp(pl[base + c * chan_stride] - mx);
                    probs[base + c * chan_stride] = e;
                    z += e;
                }
                const double inv = 1.0 / z;
                for (std::size_t c = 0; c < k; ++c) probs[base + c * chan_stride] *= inv;
                if (!ignored) {
                    loss_acc -= std::log(probs[base + static_cast<std::size_t>(label) * chan_stride]);
                    ++counted;
                }
            }
    if (counted == 0)
        throw DataError("cross_entropy_loss: every pixel carries the ignore label");

    Tensor loss = Tensor::scalar(loss_acc / static_cast<double>(counted));

    Tape* tape = detail::recording_tape(logits.requires_grad());
    detail::mark_output(loss, tape);
    if (tape) {
        auto li = logits.impl(), oi = loss.impl();
        tape->record([li, oi, probs = std::move(probs), labels, ignore_label, b, k, h, w,
                      counted] {
            if (!li->requires_grad) return;
            const double g = oi->grad_ref()[0] / static_cast<double>(counted);
            double* dl = li->grad_ref().data();
            const std::size_t chan_stride = h * w;
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) {
                        const std::int32_t label = labels.at(bi, i, j);
                        if (ignore_label.has_value() && label == *ignore_label) continue;
                        const std::size_t base = ((bi * k) * h + i) * w + j;
                        for (std::size_t c = 0; c < k; ++c) {
                            const double p = probs[base + c * chan_stride];
                            const double onehot =
                                (static_cast<std::int32_t>(c) == label) ? 1.0 : 0.0;
                            dl[base + c * chan_stride] += g * (p - onehot);
                        }
                    }
        });
    }
    return loss;
}

// Fan-in scaled uniform initialization, bound = sqrt(6 / fan_in).
inline Tensor init_fan_in_uniform(Shape s, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::uniform(s, rng, -bound, bound, true);
}

inline Tensor init_conv_weight(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    return init_fan_in_uniform({cout, cin, k, k}, cin * k * k, rng);
}

}  // namespace a2fpn
