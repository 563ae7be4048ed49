#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "kdkit/train.hpp"

namespace kd {

// Fully resolved experiment recipe: dataset, teacher/student specs, training
// schedule, distillation settings, sweep grid, output directory.
struct RunConfig {
    Task task = Task::classify;
    DatasetSpec data;
    ModelSpec teacher;
    ModelSpec student;
    bool heterogeneous = false;  // convenience switch to the narrow student
    TrainConfig train;
    DistillConfig distill;       // applied when a command distills
    std::vector<double> sweep_alphas;
    double attention_temperature = 1.0;
    std::string out_dir = "out";
};

RunConfig default_config();

// Line-oriented `key = value` text, '#' comments, dotted keys. Later keys
// override earlier ones. Unknown keys, bad types and bad enum values raise
// ConfigError.
RunConfig parse_config_file(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// single "key=value" token
void apply_override_token(RunConfig& cfg, const std::string& token);

// Resolves derived fields (task propagation, tap defaults, alpha presets).
void finalize_config(RunConfig& cfg);

// Flat dotted-key echo of every setting, in canonical parseable form.
nlohmann::json config_echo(const RunConfig& cfg);

// Documented defaults, one "key = value" line each.
std::string config_reference();

}  // namespace kd
