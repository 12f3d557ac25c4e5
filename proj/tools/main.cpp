// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "grpolab/config.hpp"
#include "grpolab/errors.hpp"
#include "grpolab/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir;
    std::vector<std::string> overrides;
    bool emit_plot_data = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "run configuration file (JSON, // comments ok)")
        ->required();
    cmd->add_option("--seed", args.seed, "override the top-level seed");
    cmd->add_option("--out-dir", args.out_dir, "override the output directory");
    cmd->add_option("--set", args.overrides, "override a config value, e.g. --set rl.lr=1e-4");
    cmd->add_flag("--emit-plot-data", args.emit_plot_data, "also write CSVs shaped for plotting");
}

grpolab::RunConfig resolve_config(const CommonArgs& args) {
    grpolab::RunConfig cfg = grpolab::load_run_config(args.config_path);
    nlohmann::json doc = cfg.raw;
    for (const auto& ov : args.overrides) grpolab::apply_override(doc, ov);
    if (args.seed) doc["seed"] = *args.seed;
    if (args.out_dir) doc["out_dir"] = *args.out_dir;
    return grpolab::parse_run_config(doc);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"grpolab: two-stage post-training laboratory (cold-start SFT + GRPO) "
                 "on synthetic verifiable tasks"};
    app.require_subcommand(1);

    const std::vector<std::string> stages = {"synth", "sft", "rl", "eval", "analyze"};
    std::map<std::string, CommonArgs> stage_args;
    for (const auto& s : stages) {
        auto* cmd = app.add_subcommand(s, "run the " + s + " stage");
        add_common(cmd, stage_args[s]);
    }
    CommonArgs ablate_args;
    auto* ablate_cmd = app.add_subcommand("ablate", "expand the config grid into child runs");
    add_common(ablate_cmd, ablate_args);

    CLI11_PARSE(app, argc, argv);

    const std::string sub = app.get_subcommands().front()->get_name();
    try {
        if (sub == "ablate") {
            grpolab::run_ablate(resolve_config(ablate_args), ablate_args.emit_plot_data);
        } else {
            const CommonArgs& args = stage_args[sub];
            grpolab::run_stage(resolve_config(args), sub, args.emit_plot_data);
        }
    } catch (const grpolab::ConfigError& e) {
        std::cerr << "error: CONFIG " << e.what() << "\n";
        return grpolab::kExitConfigError;
    } catch (const grpolab::DependencyError& e) {
        std::cerr << "error: DEPENDENCY " << e.what() << "\n";
        return grpolab::kExitDependencyError;
    } catch (const grpolab::DataError& e) {
        std::cerr << "error: DATA " << e.what() << "\n";
        return grpolab::kExitDependencyError;
    } catch (const grpolab::NumericError& e) {
        std::cerr << "error: NUMERIC " << e.what() << "\n";
        return grpolab::kExitNumericError;
    } catch (const grpolab::FormatError& e) {
        std::cerr << "error: FORMAT " << e.what() << "\n";
        return grpolab::kExitDependencyError;
    } catch (const std::exception& e) {
        std::cerr << "error: INTERNAL " << e.what() << "\n";
        return 1;
    }
    return 0;
}
