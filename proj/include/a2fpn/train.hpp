#pragma once

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "a2fpn/data.hpp"
#include "a2fpn/metrics.hpp"
#include "a2fpn/model.hpp"
#include "a2fpn/nn.hpp"
#include "a2fpn/optim.hpp"

namespace a2fpn {

struct Sample {
    Tensor image;     // 3 x H x W
    LabelMap labels;  // 1 x H x W
};

inline std::vector<Sample> load_split(const CorpusManifest& manifest, const std::string& split) {
    std::vector<Sample> out;
    for (const ManifestEntry& e : manifest.split(split)) {
        const auto dir = std::filesystem::path(manifest.directory);
        out.push_back({read_ppm((dir / e.image_path).string()),
                       read_pgm((dir / e.label_path).string())});
    }
    return out;
}

struct TrainConfig {
    std::uint64_t seed = 42;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    double lr = 3e-4;
    AugmentationPolicy augmentation;
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_miou = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_val_miou = 0.0;
    std::size_t best_epoch = 0;
};

inline Tensor batch_images(const std::vector<Sample>& samples,
                           const std::vector<std::size_t>& indices, std::size_t first,
                           std::size_t count) {
    std::vector<Tensor> items;
    items.reserve(count);
    for (std::size_t i = first; i < first + count; ++i) {
        const Tensor& img = samples[indices[i]].image;
        const Shape& s = img.shape();
        items.push_back(reshape(img, {1, s[0], s[1], s[2]}));
    }
    return stack_batch(items);
}

// Accumulate the confusion matrix of a model over a sample set, optionally
// with dihedral test-time augmentation.
inline ConfusionMatrix evaluate(const SegModel& model, const std::vector<Sample>& samples,
                                bool use_tta) {
    ConfusionMatrix cm(model.cfg.num_classes);
    for (const Sample& s : samples) {
        const Shape& sh = s.image.shape();
        LabelMap pred;
        if (use_tta) {
            ModelFn fn = [&](const Tensor& img) {
                Tensor logits =
                    model.forward(reshape(img, {1, img.shape()[0], img.shape()[1], img.shape()[2]}),
                                  false);
                const Shape& ls = logits.shape();
                return reshape(logits, {ls[1], ls[2], ls[3]});
            };
            Tensor probs = tta_predict(fn, s.image);
            const Shape& ps = probs.shape();
            pred = argmax_predictions(reshape(probs, {1, ps[0], ps[1], ps[2]}));
        } else {
            Tensor logits = model.forward(reshape(s.image, {1, sh[0], sh[1], sh[2]}), false);
            pred = argmax_predictions(logits);
        }
        confusion_update(cm, pred, s.labels);
    }
    return cm;
}

// Cross-entropy + Adam training loop. Saves the best-validation-mIoU
// checkpoint (the initial weights when epochs == 0). Fully deterministic
// given (model seed, config seed, corpus).
inline TrainResult train_model(SegModel& model, const std::vector<Sample>& train_set,
                               const std::vector<Sample>& val_set, const TrainConfig& cfg,
                               const std::string& checkpoint_path = "",
                               std::ostream* log = nullptr) {
    if (train_set.empty()) throw UsageError("train_model: empty training set");
    Rng rng(cfg.seed);
    Adam optimizer(cfg.lr);
    std::vector<NamedParam> params = model.parameters();

    TrainResult result;
    result.best_val_miou = -1.0;
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model);

    std::vector<std::size_t> indices(train_set.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fisher-Yates shuffle from the run RNG
        for (std::size_t i = indices.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(indices[i - 1], indices[j]);
        }

        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < indices.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, indices.size() - start);
            std::vector<Tensor> imgs;
            std::vector<LabelMap> labs;
            imgs.reserve(count);
            labs.reserve(count);
            for (std::size_t i = start; i < start + count; ++i) {
                const Sample& s = train_set[indices[i]];
                auto [img, lab] = augment(s.image, s.labels, cfg.augmentation, rng);
                const Shape& is = img.shape();
                imgs.push_back(reshape(img, {1, is[0], is[1], is[2]}));
                labs.push_back(lab);
            }
            Tensor x = stack_batch(imgs);
            LabelMap y = stack_labels(labs);

            zero_grads(params);
            Tape tape;
            double loss_value = 0.0;
            {
                Tape::Scope scope(tape);
                Tensor logits = model.forward(x, true);
                Tensor loss = cross_entropy_loss(logits, y);
                loss_value = loss.value();
                if (!std::isfinite(loss_value))
                    throw DataError("training diverged: non-finite loss at epoch " +
                                    std::to_string(epoch) + ", step " +
                                    std::to_string(start / cfg.batch_size));
                tape.backward(loss);
            }
            optimizer.step(params);
            loss_sum += loss_value * static_cast<double>(count);
            seen += count;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(seen);
        stats.val_miou = val_set.empty() ? 0.0 : mean_iou(evaluate(model, val_set, false));
        result.history.push_back(stats);
        if (log)
            (*log) << "epoch " << epoch << " train_loss " << std::setprecision(6)
                   << stats.train_loss << " val_miou " << stats.val_miou << "\n";

        if (stats.val_miou >= result.best_val_miou) {
            result.best_val_miou = stats.val_miou;
            result.best_epoch = epoch;
            if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model);
        }
    }
    return result;
}

inline std::string history_csv(const TrainResult& result) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(9);
    os << "epoch,train_loss,val_miou\n";
    for (const EpochStats& s : result.history)
        os << s.epoch << ',' << s.train_loss << ',' << s.val_miou << '\n';
    return os.str();
}

}  // namespace a2fpn
