#include <CLI11.hpp>
#include <iostream>

#include "mmdit/harness.hpp"

using namespace mmdit;

int main(int argc, char** argv) {
    CLI::App app{"desk-scale joint audio-video diffusion transformer"};
    app.require_subcommand(1);

    std::string config_path, out_path, checkpoint_path, task, inject_fault;
    uint64_t seed = 0;
    int64_t steps = 0;
    bool seed_set = false, steps_set = false;

    auto add_common = [&](CLI::App* cmd, bool with_task) {
        cmd->add_option("--config", config_path, "harness config file");
        cmd->add_option("--seed", seed, "rng seed override")->each([&](const std::string&) { seed_set = true; });
        cmd->add_option("--out", out_path, "output path");
        cmd->add_option("--checkpoint", checkpoint_path, "checkpoint path");
        cmd->add_option("--steps", steps, "step count override")->each([&](const std::string&) { steps_set = true; });
        if (with_task) cmd->add_option("--task", task, "t2v|i2v|extend|startend|edit");
    };

    CLI::App* train = app.add_subcommand("train", "run the flow-matching training loop");
    add_common(train, true);
    CLI::App* sample = app.add_subcommand("sample", "generate latents with the Euler sampler");
    add_common(sample, true);
    CLI::App* verify = app.add_subcommand("verify", "run the invariant suite");
    verify->add_option("--inject-fault", inject_fault, "flip a known-good path (text-cross-sign)");
    CLI::App* bench = app.add_subcommand("bench", "emit the sparse-attention FLOP ledger");
    add_common(bench, false);

    CLI11_PARSE(app, argc, argv);

    TrainOverrides overrides;
    if (seed_set) overrides.seed = seed;
    if (steps_set) overrides.steps = steps;
    if (!task.empty()) overrides.task = task;

    try {
        if (train->parsed()) {
            HarnessConfig cfg = config_path.empty() ? HarnessConfig{} : HarnessConfig::parse_file(config_path);
            std::string metrics = out_path.empty() ? "metrics.csv" : out_path;
            return cmd_train(cfg, metrics, checkpoint_path, overrides, std::cout);
        }
        if (sample->parsed()) {
            HarnessConfig cfg = config_path.empty() ? HarnessConfig{} : HarnessConfig::parse_file(config_path);
            if (checkpoint_path.empty()) {
                std::cerr << "sample needs --checkpoint\n";
                return 2;
            }
            std::string out = out_path.empty() ? "latents.mmdt" : out_path;
            return cmd_sample(cfg, checkpoint_path, out, overrides, std::cout);
        }
        if (verify->parsed()) return cmd_verify(inject_fault, std::cout);
        if (bench->parsed()) {
            std::string out = out_path.empty() ? "bench.csv" : out_path;
            return cmd_bench(out, std::cout);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
