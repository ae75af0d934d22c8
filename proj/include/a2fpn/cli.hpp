#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>

#include "a2fpn/bench.hpp"
#include "a2fpn/data.hpp"
#include "a2fpn/metrics.hpp"
#include "a2fpn/model.hpp"
#include "a2fpn/selftest.hpp"
#include "a2fpn/train.hpp"

namespace a2fpn {

// Fully-resolved run configuration. Precedence is handled by the flag
// parser (flags > config file > these defaults); whatever a command ends up
// using is persisted next to its outputs.
struct RunConfig {
    std::uint64_t seed = 42;
    std::size_t image_size = 64;
    std::size_t num_classes = 4;
    std::size_t pyramid_channels = 64;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    double lr = 3e-4;
    std::string variant = "a2fpn";
    std::string corpus_dir = "corpus";
    std::string checkpoint;  // empty: <out>/model.ckpt
    std::string out_dir = "out";
    bool tta = false;
    bool save_predictions = false;
    std::size_t train_count = 200;
    std::size_t val_count = 20;
    std::size_t test_count = 80;
    double noise_sigma = 0.05;
};

inline std::string resolved_config_text(const RunConfig& cfg, const std::string& command) {
    std::ostringstream os;
    os << "command = " << command << '\n'
       << "seed = " << cfg.seed << '\n'
       << "image_size = " << cfg.image_size << '\n'
       << "num_classes = " << cfg.num_classes << '\n'
       << "pyramid_channels = " << cfg.pyramid_channels << '\n'
       << "epochs = " << cfg.epochs << '\n'
       << "batch_size = " << cfg.batch_size << '\n'
       << "lr = " << std::setprecision(17) << cfg.lr << '\n'
       << "variant = " << cfg.variant << '\n'
       << "corpus_dir = " << cfg.corpus_dir << '\n'
       << "checkpoint = " << cfg.checkpoint << '\n'
       << "out_dir = " << cfg.out_dir << '\n'
       << "tta = " << (cfg.tta ? "true" : "false") << '\n'
       << "save_predictions = " << (cfg.save_predictions ? "true" : "false") << '\n'
       << "train_count = " << cfg.train_count << '\n'
       << "val_count = " << cfg.val_count << '\n'
       << "test_count = " << cfg.test_count << '\n'
       << "noise_sigma = " << std::setprecision(17) << cfg.noise_sigma << '\n';
    return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << text;
    if (!out) throw FormatError("short write: " + path);
}

inline void write_resolved_config(const RunConfig& cfg, const std::string& command,
                                  const std::string& dir) {
    write_text_file((std::filesystem::path(dir) / "run-config.txt").string(),
                    resolved_config_text(cfg, command));
}

namespace detail {

inline ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig mc;
    mc.kind = variant_from_string(cfg.variant);
    mc.num_classes = cfg.num_classes;
    mc.backbone.pyramid_channels = cfg.pyramid_channels;
    return mc;
}

inline std::string checkpoint_path_of(const RunConfig& cfg) {
    return cfg.checkpoint.empty()
               ? (std::filesystem::path(cfg.out_dir) / "model.ckpt").string()
               : cfg.checkpoint;
}

inline std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline CorpusManifest open_corpus(const RunConfig& cfg) {
    const std::string manifest_path =
        (std::filesystem::path(cfg.corpus_dir) / "manifest.tsv").string();
    if (!std::filesystem::exists(manifest_path))
        throw UsageError("corpus manifest not found: " + manifest_path +
                         " (run the gen command first)");
    return load_manifest(manifest_path);
}

}  // namespace detail

// --- gen: synthesize the corpus and print its checksum --------------------
inline int cmd_gen(const RunConfig& cfg, std::ostream& out) {
    SceneSpec spec;
    spec.seed = cfg.seed;
    spec.size = cfg.image_size;
    spec.num_classes = cfg.num_classes;
    spec.noise_sigma = cfg.noise_sigma;
    const CorpusManifest manifest =
        make_corpus(spec, {cfg.train_count, cfg.val_count, cfg.test_count}, cfg.corpus_dir);
    write_resolved_config(cfg, "gen", cfg.corpus_dir);
    out << "manifest " << (std::filesystem::path(cfg.corpus_dir) / "manifest.tsv").string()
        << "\n";
    out << "pairs " << manifest.entries.size() << "\n";
    out << "checksum " << detail::hex64(corpus_checksum(manifest)) << "\n";
    return kExitOk;
}

// --- train: fit the selected variant, save best checkpoint + metrics ------
inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
    const CorpusManifest manifest = detail::open_corpus(cfg);
    const std::vector<Sample> train_set = load_split(manifest, "train");
    const std::vector<Sample> val_set = load_split(manifest, "val");
    if (train_set.empty()) throw UsageError("corpus has no training split");

    SegModel model(detail::model_config_from(cfg), cfg.seed);
    TrainConfig tc;
    tc.seed = cfg.seed;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;

    std::filesystem::create_directories(cfg.out_dir);
    const std::string ckpt = detail::checkpoint_path_of(cfg);
    const TrainResult result = train_model(model, train_set, val_set, tc, ckpt, &out);

    write_text_file((std::filesystem::path(cfg.out_dir) / "train-metrics.csv").string(),
                    history_csv(result));
    write_resolved_config(cfg, "train", cfg.out_dir);
    out << "checkpoint " << ckpt << "\n";
    out << "best_val_miou " << std::fixed << std::setprecision(9) << result.best_val_miou
        << "\n";
    return kExitOk;
}

// --- eval: run inference over the test split and emit the metrics CSV -----
inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
    const CorpusManifest manifest = detail::open_corpus(cfg);
    const std::string ckpt = detail::checkpoint_path_of(cfg);
    if (!std::filesystem::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt);

    const ModelConfig stored = read_checkpoint_config(ckpt);
    if (stored.num_classes != cfg.num_classes)
        throw ConfigError("checkpoint has " + std::to_string(stored.num_classes) +
                          " classes, run requests " + std::to_string(cfg.num_classes));
    if (stored.backbone.pyramid_channels != cfg.pyramid_channels)
        throw ConfigError("checkpoint has pyramid width " +
                          std::to_string(stored.backbone.pyramid_channels) +
                          ", run requests " + std::to_string(cfg.pyramid_channels));
    SegModel model = load_checkpoint(ckpt);

    const std::vector<Sample> test_set = load_split(manifest, "test");
    if (test_set.empty()) throw UsageError("corpus has no test split");
    const ConfusionMatrix cm = evaluate(model, test_set, cfg.tta);

    std::filesystem::create_directories(cfg.out_dir);
    write_text_file((std::filesystem::path(cfg.out_dir) / "eval-metrics.csv").string(),
                    metrics_csv(cm));
    write_resolved_config(cfg, "eval", cfg.out_dir);

    if (cfg.save_predictions) {
        const std::string pred_dir = (std::filesystem::path(cfg.out_dir) / "predictions").string();
        std::filesystem::create_directories(pred_dir);
        const auto entries = manifest.split("test");
        for (std::size_t i = 0; i < test_set.size(); ++i) {
            const Sample& s = test_set[i];
            const Shape& sh = s.image.shape();
            Tensor logits = model.forward(reshape(s.image, {1, sh[0], sh[1], sh[2]}), false);
            write_pgm((std::filesystem::path(pred_dir) / entries[i].label_path).string(),
                      argmax_predictions(logits));
        }
    }

    out << std::fixed << std::setprecision(9);
    out << "oa " << overall_accuracy(cm) << "\n";
    out << "mean_f1 " << f1_scores(cm).mean << "\n";
    out << "miou " << mean_iou(cm) << "\n";
    return kExitOk;
}

// --- bench-attention: cost-model and timing curves -------------------------
inline int cmd_bench(const RunConfig& cfg, std::ostream& out) {
    TimingConfig tc;
    tc.seed = cfg.seed;
    std::vector<std::size_t> dot_ns, linear_ns;
    for (std::size_t n = 256; n <= 8192; n *= 2) dot_ns.push_back(n);
    for (std::size_t n = 256; n <= 65536; n *= 2) linear_ns.push_back(n);

    std::vector<CostRow> rows = run_timing(AttentionVariant::dot_product, dot_ns, tc);
    std::vector<CostRow> linear_rows = run_timing(AttentionVariant::linear, linear_ns, tc);
    rows.insert(rows.end(), linear_rows.begin(), linear_rows.end());
    for (const CostRow& r : rows)
        if (r.failed) out << "note: " << r.note << "\n";

    std::filesystem::create_directories(cfg.out_dir);
    const std::string csv_path =
        (std::filesystem::path(cfg.out_dir) / "attention-curves.csv").string();
    write_text_file(csv_path, emit_curves(rows));
    write_resolved_config(cfg, "bench-attention", cfg.out_dir);
    out << "curves " << csv_path << "\n";
    out << "macc_crossover_n " << macc_crossover(tc.d_k, tc.d_v) << "\n";
    return kExitOk;
}

// --- selftest: oracle suite with one report row per property ---------------
inline int cmd_selftest(const RunConfig&, std::ostream& out) {
    const std::vector<PropertyResult> results = run_selftest_properties();
    bool all_pass = true;
    for (const PropertyResult& r : results) {
        out << (r.pass ? "PASS" : "FAIL") << ' ' << r.name << " measured=" << std::scientific
            << std::setprecision(3) << r.measured << " bound=" << r.bound << "\n";
        all_pass = all_pass && r.pass;
    }
    out << (all_pass ? "selftest ok" : "selftest FAILED") << " (" << results.size()
        << " properties)\n";
    return all_pass ? kExitOk : kExitPropertyFailure;
}

}  // namespace a2fpn
