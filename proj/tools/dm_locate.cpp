// dm-locate: runs the localization experiment stage by stage.
//
// Exit codes: 0 success, 2 config error, 3 stage failure, 4 corruption.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "dmloc/pipeline.hpp"
#include "dmloc/util.hpp"

namespace {

using namespace dmloc;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string variant;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (YAML)");
    cmd->add_option("--seed", c.seed, "global seed (overrides the config)");
    cmd->add_option("--out", c.out, "experiment directory (overrides the config)");
    cmd->add_option("--variant", c.variant, "base | base+align | base+align+dm | base+align+pdm");
}

ExperimentConfig make_config(const Common& c) {
    auto cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    if (!c.variant.empty()) cfg.variant = variant_from_string(c.variant);
    return cfg;
}

int run_stage(const Common& c, std::optional<Stage> until) {
    const auto cfg = make_config(c);
    const auto start = std::chrono::steady_clock::now();
    RunOptions opt;
    opt.until = until;
    opt.log = [&](const std::string& msg) {
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::fprintf(stderr, "[%7.1fs] %s\n", t, msg.c_str());
    };
    const auto result = run_pipeline(cfg, opt);
    if (result.accuracy) std::cout << read_text(cfg.out / "summary.txt");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weakly supervised disease localization with disease-mask attention"};
    app.require_subcommand(1);

    Common common;
    const std::vector<std::pair<const char*, Stage>> stages{
        {"synth", Stage::synth},           {"train-align", Stage::train_align}, {"align", Stage::align},
        {"train", Stage::train},           {"build-masks", Stage::build_masks}, {"evaluate", Stage::evaluate}};
    std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
    for (const auto& [name, stage] : stages) {
        auto* cmd = app.add_subcommand(name, std::string("run the chain up to ") + name);
        add_common(cmd, common);
        stage_cmds.emplace_back(cmd, stage);
    }
    auto* run = app.add_subcommand("run", "run every stage of the variant");
    add_common(run, common);

    std::string split = "test";
    std::size_t count = 8;
    auto* overlay = app.add_subcommand("overlay", "draw CAM overlays with predicted and ground-truth boxes");
    add_common(overlay, common);
    overlay->add_option("--split", split, "split to draw from");
    overlay->add_option("--count", count, "number of overlays");

    std::vector<std::string> dirs;
    std::string report;
    auto* compare = app.add_subcommand("compare", "compare completed experiments on the same corpus");
    compare->add_option("dirs", dirs, "experiment directories")->required();
    compare->add_option("--report", report, "also write the table to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        for (const auto& [cmd, stage] : stage_cmds) {
            if (cmd->parsed()) return run_stage(common, stage);
        }
        if (run->parsed()) return run_stage(common, std::nullopt);
        if (overlay->parsed()) {
            const auto dir = common.out.empty() ? make_config(common).out : std::filesystem::path(common.out);
            const auto m = emit_overlays(dir, split, count);
            for (const auto& w : m.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
            std::printf("%zu overlays in %s\n", m.images.size(), (dir / "overlays").string().c_str());
            return 0;
        }
        if (compare->parsed()) {
            std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
            const auto cmp = compare_variants(paths);
            std::cout << cmp.text;
            if (!report.empty()) write_text(report, cmp.text);
            return 0;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CorruptionError& e) {
        std::fprintf(stderr, "corrupt artifact: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    }
    return 0;
}
