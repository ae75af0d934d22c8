#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "a2fpn/attention.hpp"
#include "a2fpn/bench.hpp"
#include "a2fpn/data.hpp"
#include "a2fpn/gradcheck.hpp"
#include "a2fpn/metrics.hpp"
#include "a2fpn/model.hpp"
#include "a2fpn/nn.hpp"

namespace a2fpn {

struct PropertyResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;  // the measured error (or deviation) of the property
    double bound = 0.0;     // the bound it must stay under
};

namespace detail {

// Max per-element difference relative to the reference magnitudes, floored
// at the matrix scale so cancellation at near-zero elements does not mask
// exact-algebra agreement.
inline double max_rel_error(const Tensor& a, const Tensor& b) {
    double scale = 1e-300;
    for (double v : b.data()) scale = std::max(scale, std::abs(v));
    double worst = 0.0;
    const auto pa = a.data();
    const auto pb = b.data();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const double denom = std::max({std::abs(pa[i]), std::abs(pb[i]), scale});
        worst = std::max(worst, std::abs(pa[i] - pb[i]) / denom);
    }
    return worst;
}

// Smallest row denominator sum_j (1 + q_hat . k_hat) relative to N. Both
// attention routes lose all precision when this collapses toward the
// normalization eps (conditioning, not algebra), so equivalence harnesses
// resample such instances.
inline double min_denominator_ratio(const Tensor& q, const Tensor& k, double eps = 1e-12) {
    Tensor qh = l2_normalize_rows(q, eps);
    Tensor kh = l2_normalize_rows(k, eps);
    const std::size_t n = q.shape()[0], dk = q.shape()[1];
    std::vector<double> key_sum(dk, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t d = 0; d < dk; ++d) key_sum[d] += kh.data()[j * dk + d];
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dk; ++d) dot += qh.data()[i * dk + d] * key_sum[d];
        worst = std::min(worst, (static_cast<double>(n) + dot) / static_cast<double>(n));
    }
    return worst;
}

inline ModelConfig tiny_model_config(VariantKind kind) {
    ModelConfig cfg;
    cfg.kind = kind;
    cfg.num_classes = 3;
    cfg.backbone.stem_channels = 4;
    cfg.backbone.stage_channels = {4, 4, 6, 8};
    cfg.backbone.blocks_per_stage = 1;
    cfg.backbone.pyramid_channels = 4;
    return cfg;
}

}  // namespace detail

// Oracle suite behind `selftest`: the algebraic equivalence of the linear
// attention reassociation, gradient checks for the attention stack, the
// metric counting oracles, the TTA expansion and the end-to-end shape chain.
inline std::vector<PropertyResult> run_selftest_properties() {
    std::vector<PropertyResult> results;

    {  // reassociated linear attention == row-wise quadratic reference
        PropertyResult r{"linear-attention-equivalence", false, 0.0, 1e-12};
        Rng rng(2024);
        double worst = 0.0;
        int accepted = 0;
        while (accepted < 100) {
            const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 64));
            const std::size_t dk = static_cast<std::size_t>(rng.uniform_int(1, 16));
            const std::size_t dv = static_cast<std::size_t>(rng.uniform_int(1, 16));
            Tensor q = Tensor::uniform({n, dk}, rng, -2.0, 2.0);
            Tensor k = Tensor::uniform({n, dk}, rng, -2.0, 2.0);
            Tensor v = Tensor::uniform({n, dv}, rng, -2.0, 2.0);
            // resample instances in the near-degenerate-denominator regime
            if (detail::min_denominator_ratio(q, k) < 1e-3) continue;
            ++accepted;
            worst = std::max(worst, detail::max_rel_error(linear_attention(q, k, v),
                                                          linear_attention_oracle(q, k, v)));
        }
        r.measured = worst;
        r.pass = worst <= r.bound;
        results.push_back(r);
    }

    {  // kernel attention with the normalize-plus-one map reproduces linear
        PropertyResult r{"kernel-attention-specialization", false, 0.0, 1e-14};
        Rng rng(77);
        const FeatureMap lift = [](const Tensor& m) {
            // rows [x] -> [1, x / (||x|| + eps)]: inner products become 1 + x_hat . y_hat
            Tensor normalized = l2_normalize_rows(m, 1e-12);
            const std::size_t n = m.shape()[0], d = m.shape()[1];
            Tensor out = Tensor::zeros({n, d + 1});
            for (std::size_t i = 0; i < n; ++i) {
                out.mutable_data()[i * (d + 1)] = 1.0;
                for (std::size_t j = 0; j < d; ++j)
                    out.mutable_data()[i * (d + 1) + 1 + j] = normalized.data()[i * d + j];
            }
            return out;
        };
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 32));
            Tensor q = Tensor::uniform({n, 6}, rng, -1.5, 1.5);
            Tensor k = Tensor::uniform({n, 6}, rng, -1.5, 1.5);
            Tensor v = Tensor::uniform({n, 5}, rng, -1.5, 1.5);
            worst = std::max(worst, detail::max_rel_error(kernel_attention(q, k, v, lift, lift),
                                                          linear_attention(q, k, v)));
        }
        r.measured = worst;
        r.pass = worst <= r.bound;
        results.push_back(r);
    }

    auto gradient_property = [&](const std::string& name, auto&& build_point,
                                 auto&& build_loss_factory) {
        PropertyResult r{name, false, 0.0, 1e-4};
        double worst = 0.0;
        for (std::uint64_t point = 0; point < 5; ++point) {
            Rng rng(42 + point);
            Tensor x = build_point(rng);
            auto loss_fn = build_loss_factory(x, rng);
            worst = std::max(worst, finite_difference_check(loss_fn, x, 1e-5, 20, 42 + point));
        }
        r.measured = worst;
        r.pass = worst < r.bound;
        results.push_back(r);
    };

    gradient_property(
        "gradient-dot-product-attention",
        [](Rng& rng) { return Tensor::uniform({6, 4}, rng, -1.0, 1.0, true); },
        [](Tensor& x, Rng& rng) {
            Tensor k = Tensor::uniform({6, 4}, rng, -1.0, 1.0);
            Tensor v = Tensor::uniform({6, 5}, rng, -1.0, 1.0);
            return [&x, k, v] {
                Tensor out = dot_product_attention(x, k, v);
                return sum_all(mul(out, out));
            };
        });

    gradient_property(
        "gradient-linear-attention",
        [](Rng& rng) { return Tensor::uniform({6, 4}, rng, -1.0, 1.0, true); },
        [](Tensor& x, Rng& rng) {
            Tensor k = Tensor::uniform({6, 4}, rng, -1.0, 1.0);
            Tensor v = Tensor::uniform({6, 5}, rng, -1.0, 1.0);
            return [&x, k, v] {
                Tensor out = linear_attention(x, k, v);
                return sum_all(mul(out, out));
            };
        });

    gradient_property(
        "gradient-lam-block",
        [](Rng& rng) { return Tensor::uniform({1, 4, 3, 3}, rng, -1.0, 1.0, true); },
        [](Tensor& x, Rng& rng) {
            auto weights = std::make_shared<LamWeights>(LamWeights::init(4, rng));
            return [&x, weights] {
                Tensor out = lam_block(x, *weights);
                return sum_all(mul(out, out));
            };
        });

    gradient_property(
        "gradient-aam",
        [](Rng& rng) { return Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0, true); },
        [](Tensor& x, Rng& rng) {
            auto aam = std::make_shared<AamModule>(4, rng);
            Tensor s3 = Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
            Tensor s4 = Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
            Tensor s5 = Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
            return [&x, aam, s3, s4, s5] {
                Tensor out = aam_forward({x, s3, s4, s5}, *aam);
                return sum_all(mul(out, out));
            };
        });

    gradient_property(
        "gradient-full-model",
        [](Rng& rng) { return Tensor::uniform({1, 3, 64, 64}, rng, 0.0, 1.0, true); },
        [](Tensor& x, Rng& rng) {
            auto model = std::make_shared<SegModel>(
                detail::tiny_model_config(VariantKind::a2fpn), rng.next_u64());
            LabelMap labels(1, 64, 64);
            Rng lrng(rng.next_u64());
            for (auto& v : labels.values) v = static_cast<std::int32_t>(lrng.uniform_int(0, 2));
            return [&x, model, labels] {
                return cross_entropy_loss(model->forward(x, true), labels);
            };
        });

    {  // metric counting oracles
        PropertyResult r{"metric-counting-oracle", false, 0.0, 1e-9};
        ConfusionMatrix cm(2);
        cm.at(0, 0) = 3;
        cm.at(0, 1) = 1;
        cm.at(1, 0) = 2;
        cm.at(1, 1) = 4;
        double worst = std::abs(overall_accuracy(cm) - 0.7);
        worst = std::max(worst, std::abs(mean_iou(cm) - (3.0 / 6.0 + 4.0 / 7.0) / 2.0));
        const double f1_0 = 2.0 * (0.6 * 0.75) / (0.6 + 0.75);
        const double f1_1 = 2.0 * (0.8 * (4.0 / 6.0)) / (0.8 + 4.0 / 6.0);
        worst = std::max(worst, std::abs(f1_scores(cm).mean - (f1_0 + f1_1) / 2.0));
        ConfusionMatrix perfect(3);
        perfect.at(0, 0) = 10;
        perfect.at(1, 1) = 20;
        perfect.at(2, 2) = 30;
        worst = std::max(worst, std::abs(overall_accuracy(perfect) - 1.0));
        worst = std::max(worst, std::abs(mean_iou(perfect) - 1.0));
        worst = std::max(worst, std::abs(f1_scores(perfect).mean - 1.0));
        r.measured = worst;
        r.pass = worst <= r.bound;
        results.push_back(r);
    }

    {  // TTA equals the explicit 8-transform expansion
        PropertyResult r{"tta-expansion", false, 0.0, 1e-9};
        Rng rng(5);
        SegModel model(detail::tiny_model_config(VariantKind::a2fpn), 99);
        Tensor image = Tensor::uniform({3, 32, 32}, rng, 0.0, 1.0);
        ModelFn fn = [&](const Tensor& img) {
            Tensor logits = model.forward(
                reshape(img, {1, img.shape()[0], img.shape()[1], img.shape()[2]}), false);
            const Shape& ls = logits.shape();
            return reshape(logits, {ls[1], ls[2], ls[3]});
        };
        Tensor fast = tta_predict(fn, image);
        Tensor manual;
        for (int flip = 0; flip < 2; ++flip)
            for (int rot = 0; rot < 4; ++rot) {
                Tensor t = flip ? flip_image(image, true) : image;
                t = rotate90_image(t, rot);
                Tensor p = softmax_channels(fn(t));
                p = rotate90_image(p, 4 - rot);
                if (flip) p = flip_image(p, true);
                manual = manual.defined() ? add(manual, p) : p;
            }
        manual = scale(manual, 1.0 / 8.0);
        double worst = 0.0;
        for (std::size_t i = 0; i < fast.numel(); ++i)
            worst = std::max(worst, std::abs(fast.data()[i] - manual.data()[i]));
        r.measured = worst;
        r.pass = worst <= r.bound;
        results.push_back(r);
    }

    {  // shape chain through every variant
        PropertyResult r{"shape-chain", false, 0.0, 0.0};
        bool ok = true;
        Rng rng(8);
        Tensor x = Tensor::uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
        for (VariantKind kind :
             {VariantKind::baseline, VariantKind::fpn, VariantKind::a2fpn}) {
            SegModel model(detail::tiny_model_config(kind), 7);
            Tensor logits = model.forward(x, false);
            ok = ok && logits.shape() == Shape{2, 3, 64, 64} && all_finite(logits);
        }
        r.measured = ok ? 0.0 : 1.0;
        r.pass = ok;
        results.push_back(r);
    }

    return results;
}

inline constexpr std::size_t kSelftestPropertyCount = 10;

}  // namespace a2fpn
