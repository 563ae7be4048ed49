#pragma once

#include <string>
#include <vector>

#include "kdkit/config.hpp"
#include "kdkit/diag.hpp"
#include "kdkit/report.hpp"

namespace kd {

// Loads the cached teacher for this config if present, otherwise pretrains
// and caches it. The returned model is frozen.
Model prepare_teacher(const RunConfig& cfg, const std::vector<SyntheticSample>& train_set,
                      const std::vector<SyntheticSample>& val_set, bool quiet = false);

// Transforms for the configured taps: student tap channels -> teacher tap
// channels, one module per tap.
std::vector<TransformModule> make_transforms(const RunConfig& cfg);

// Subcommands. Each writes its ReportBundle (report.json, CSVs, SVGs where
// applicable) under cfg.out_dir and prints a short summary per arm.
void cmd_train(RunConfig cfg);
void cmd_ablate(RunConfig cfg);
void cmd_sweep_alpha(RunConfig cfg);
void cmd_collapse(RunConfig cfg);
void cmd_diag_l2(RunConfig cfg);

}  // namespace kd
