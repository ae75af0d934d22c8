#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "a2fpn/labelmap.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

// K x K count table, rows = ground truth class, columns = predicted class.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes)
        : k_(num_classes), counts_(num_classes * num_classes, 0) {}

    std::size_t num_classes() const { return k_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * k_ + pred]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (std::uint64_t c : counts_) t += c;
        return t;
    }

    // Parallel per-tile accumulation merges by element-wise addition.
    ConfusionMatrix& merge(const ConfusionMatrix& other) {
        if (other.k_ != k_) throw ShapeError("ConfusionMatrix::merge: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
        return *this;
    }

    std::uint64_t true_positive(std::size_t c) const { return at(c, c); }
    std::uint64_t false_positive(std::size_t c) const {
        std::uint64_t fp = 0;
        for (std::size_t g = 0; g < k_; ++g)
            if (g != c) fp += at(g, c);
        return fp;
    }
    std::uint64_t false_negative(std::size_t c) const {
        std::uint64_t fn = 0;
        for (std::size_t p = 0; p < k_; ++p)
            if (p != c) fn += at(c, p);
        return fn;
    }

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

inline void confusion_update(ConfusionMatrix& cm, const LabelMap& predictions,
                             const LabelMap& labels,
                             std::optional<std::int32_t> ignore_label = std::nullopt) {
    if (predictions.batch != labels.batch || predictions.height != labels.height ||
        predictions.width != labels.width)
        throw ShapeError("confusion_update: prediction/label extents differ");
    const std::int32_t k = static_cast<std::int32_t>(cm.num_classes());
    for (std::size_t i = 0; i < labels.values.size(); ++i) {
        const std::int32_t gt = labels.values[i];
        if (ignore_label.has_value() && gt == *ignore_label) continue;
        const std::int32_t pred = predictions.values[i];
        if (gt < 0 || gt >= k)
            throw DataError("confusion_update: ground-truth class " + std::to_string(gt) +
                            " out of range [0," + std::to_string(k) + ")");
        if (pred < 0 || pred >= k)
            throw DataError("confusion_update: predicted class " + std::to_string(pred) +
                            " out of range [0," + std::to_string(k) + ")");
        ++cm.at(static_cast<std::size_t>(gt), static_cast<std::size_t>(pred));
    }
}

// Per-pixel argmax over the class channel of B x K x H x W logits.
// Ties break toward the lowest class index.
inline LabelMap argmax_predictions(const Tensor& logits) {
    detail::require_rank(logits, 4, "argmax_predictions");
    const Shape& s = logits.shape();
    const std::size_t b = s[0], k = s[1], h = s[2], w = s[3];
    LabelMap out(b, h, w);
    const double* p = logits.data().data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                std::size_t best = 0;
                double best_v = p[((bi * k) * h + i) * w + j];
                for (std::size_t c = 1; c < k; ++c) {
                    const double v = p[((bi * k + c) * h + i) * w + j];
                    if (v > best_v) {
                        best_v = v;
                        best = c;
                    }
                }
                out.at(bi, i, j) = static_cast<std::int32_t>(best);
            }
    return out;
}

// Overall pixel accuracy: trace / total.
inline double overall_accuracy(const ConfusionMatrix& cm) {
    const std::uint64_t total = cm.total();
    if (total == 0) throw DataError("overall_accuracy: empty confusion matrix");
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < cm.num_classes(); ++c) diag += cm.true_positive(c);
    return static_cast<double>(diag) / static_cast<double>(total);
}

// Per-class intersection over union; nullopt for classes absent from both
// ground truth and predictions.
inline std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
    std::vector<std::optional<double>> out(cm.num_classes());
    for (std::size_t c = 0; c < cm.num_classes(); ++c) {
        const std::uint64_t tp = cm.true_positive(c);
        const std::uint64_t denom = tp + cm.false_positive(c) + cm.false_negative(c);
        if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return out;
}

// Mean IoU over classes that appear in ground truth or predictions.
inline double mean_iou(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw DataError("mean_iou: empty confusion matrix");
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& iou : iou_per_class(cm))
        if (iou.has_value()) {
            sum += *iou;
            ++counted;
        }
    if (counted == 0) throw DataError("mean_iou: all classes empty");
    return sum / static_cast<double>(counted);
}

struct F1Report {
    // Per-class F1; entries for classes absent from both maps carry no value
    // and are excluded from the mean.
    std::vector<std::optional<double>> per_class;
    double mean = 0.0;
};

inline double precision_of(const ConfusionMatrix& cm, std::size_t c) {
    const std::uint64_t tp = cm.true_positive(c), fp = cm.false_positive(c);
    return (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

inline double recall_of(const ConfusionMatrix& cm, std::size_t c) {
    const std::uint64_t tp = cm.true_positive(c), fn = cm.false_negative(c);
    return (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

inline F1Report f1_scores(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw DataError("f1_scores: empty confusion matrix");
    F1Report report;
    report.per_class.resize(cm.num_classes());
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < cm.num_classes(); ++c) {
        const std::uint64_t tp = cm.true_positive(c);
        const std::uint64_t fp = cm.false_positive(c);
        const std::uint64_t fn = cm.false_negative(c);
        if (tp + fp + fn == 0) continue;  // entirely absent class
        const double p = precision_of(cm, c);
        const double r = recall_of(cm, c);
        const double f1 = (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
        report.per_class[c] = f1;
        sum += f1;
        ++counted;
    }
    report.mean = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
    return report;
}

// CSV report: one row per class (class, precision, recall, f1, iou) plus
// summary rows for OA, mean F1 and mIoU. Fixed 9-decimal formatting keeps
// repeated runs byte-identical.
inline std::string metrics_csv(const ConfusionMatrix& cm) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(9);
    os << "class,precision,recall,f1,iou\n";
    const F1Report f1 = f1_scores(cm);
    const auto ious = iou_per_class(cm);
    for (std::size_t c = 0; c < cm.num_classes(); ++c) {
        os << c << ',' << precision_of(cm, c) << ',' << recall_of(cm, c) << ','
           << f1.per_class[c].value_or(0.0) << ',' << ious[c].value_or(0.0) << '\n';
    }
    os << "oa," << overall_accuracy(cm) << ",,,\n";
    os << "mean_f1," << f1.mean << ",,,\n";
    os << "miou," << mean_iou(cm) << ",,,\n";
    return os.str();
}

}  // namespace a2fpn
