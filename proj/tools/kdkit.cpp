#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kdkit/experiments.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_dir, "output directory (overrides out_dir)");
    cmd->add_option("overrides", args.overrides, "key=value overrides applied after the file");
}

kd::RunConfig build_config(const CommonArgs& args) {
    kd::RunConfig cfg = args.config_path.empty() ? kd::default_config()
                                                 : kd::parse_config_file(args.config_path);
    for (const std::string& token : args.overrides) kd::apply_override_token(cfg, token);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    kd::finalize_config(cfg);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"channel-wise feature distillation experiment kit"};
    app.require_subcommand(1);

    CommonArgs train_args, ablate_args, sweep_args, collapse_args, diag_args;
    CLI::App* train = app.add_subcommand(
        "train", "pretrain teacher, train baseline and distilled students");
    add_common(train, train_args);
    CLI::App* ablate = app.add_subcommand(
        "ablate", "run the transform ablation with per-arm L2 distance reports");
    add_common(ablate, ablate_args);
    CLI::App* sweep = app.add_subcommand("sweep-alpha", "metric vs alpha over a grid");
    add_common(sweep, sweep_args);
    CLI::App* collapse = app.add_subcommand(
        "collapse", "student-only vs both-sides transform feature-loss curves");
    add_common(collapse, collapse_args);
    CLI::App* diag = app.add_subcommand(
        "diag-l2", "before/after transform distances and channel attention profiles");
    add_common(diag, diag_args);
    CLI::App* defaults = app.add_subcommand("defaults", "print every config key and its default");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::fprintf(stderr, "error: config: %s\n", e.what());
        return 2;
    }

    try {
        if (train->parsed()) kd::cmd_train(build_config(train_args));
        if (ablate->parsed()) kd::cmd_ablate(build_config(ablate_args));
        if (sweep->parsed()) kd::cmd_sweep_alpha(build_config(sweep_args));
        if (collapse->parsed()) kd::cmd_collapse(build_config(collapse_args));
        if (diag->parsed()) kd::cmd_diag_l2(build_config(diag_args));
        if (defaults->parsed()) std::fputs(kd::config_reference().c_str(), stdout);
    } catch (const kd::ConfigError& e) {
        std::fprintf(stderr, "error: config: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: runtime: %s\n", e.what());
        return 3;
    }
    return 0;
}
