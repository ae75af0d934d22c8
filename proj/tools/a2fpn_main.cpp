// Command-line front end: corpus generation, training, evaluation,
// attention benchmarking and the selftest oracle suite.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "a2fpn/cli.hpp"

namespace {

void add_common_options(CLI::App* cmd, a2fpn::RunConfig& cfg) {
    cmd->set_config("--config")->configurable(false);
    cmd->add_option("--seed", cfg.seed, "Master seed");
    cmd->add_option("--image-size", cfg.image_size, "Scene extent (64 or 128)");
    cmd->add_option("--classes", cfg.num_classes, "Number of classes including background");
    cmd->add_option("--pyramid-channels", cfg.pyramid_channels, "Pyramid width d_p");
    cmd->add_option("--epochs", cfg.epochs, "Training epochs");
    cmd->add_option("--batch-size", cfg.batch_size, "Minibatch size");
    cmd->add_option("--lr", cfg.lr, "Adam learning rate");
    cmd->add_option("--variant", cfg.variant, "Model variant: baseline|fpn|a2fpn");
    cmd->add_option("--corpus", cfg.corpus_dir, "Corpus directory");
    cmd->add_option("--checkpoint", cfg.checkpoint, "Checkpoint path");
    cmd->add_option("--out", cfg.out_dir, "Output directory");
    cmd->add_flag("--tta,!--no-tta", cfg.tta, "Dihedral test-time augmentation");
    cmd->add_flag("--save-predictions", cfg.save_predictions, "Write predicted label rasters");
    cmd->add_option("--train-count", cfg.train_count, "Training split size");
    cmd->add_option("--val-count", cfg.val_count, "Validation split size");
    cmd->add_option("--test-count", cfg.test_count, "Test split size");
    cmd->add_option("--noise-sigma", cfg.noise_sigma, "Scene noise level");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Linear-attention feature pyramid segmentation toolkit"};
    app.require_subcommand(1);

    a2fpn::RunConfig cfg;
    CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
    CLI::App* train = app.add_subcommand("train", "Train a model variant");
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    CLI::App* bench = app.add_subcommand("bench-attention", "Attention cost and timing curves");
    CLI::App* selftest = app.add_subcommand("selftest", "Run the oracle property suite");
    for (CLI::App* cmd : {gen, train, eval, bench, selftest}) add_common_options(cmd, cfg);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return a2fpn::kExitUsage;
    }

    try {
        if (gen->parsed()) return a2fpn::cmd_gen(cfg, std::cout);
        if (train->parsed()) return a2fpn::cmd_train(cfg, std::cout);
        if (eval->parsed()) return a2fpn::cmd_eval(cfg, std::cout);
        if (bench->parsed()) return a2fpn::cmd_bench(cfg, std::cout);
        if (selftest->parsed()) return a2fpn::cmd_selftest(cfg, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return a2fpn::exit_code_for(e);
    }
    return a2fpn::kExitUsage;
}
