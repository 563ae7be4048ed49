#include "kdkit/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace kd {

RunConfig default_config() {
    RunConfig cfg;
    cfg.task = Task::classify;

    cfg.data.task = Task::classify;
    cfg.data.image_size = 16;
    cfg.data.num_train = 2048;
    cfg.data.num_val = 1024;
    cfg.data.noise_std = 0.1;
    cfg.data.seed = 1;

    cfg.teacher.stage_channels = {16, 32, 32};
    cfg.teacher.tap = -1;
    cfg.teacher.seed = 11;

    cfg.student.stage_channels = {8, 16, 32};
    cfg.student.tap = -1;
    cfg.student.seed = 22;

    cfg.train.epochs = 30;
    cfg.train.batch_size = 32;
    cfg.train.base_lr = 0.05;
    cfg.train.momentum = 0.9;
    cfg.train.weight_decay = 1e-4;
    cfg.train.lr_decay_epochs = {15, 25};
    cfg.train.lr_decay_factor = 0.1;
    cfg.train.seed = 1;

    cfg.distill.transform = TransformKind::mlp;
    cfg.distill.loss = LossKind::l2;
    cfg.distill.alpha = -1.0;  // preset per task and loss
    cfg.distill.side = TransformSide::student_only;
    cfg.distill.temperature = 4.0;
    cfg.distill.hidden = 0;
    cfg.distill.seed = 33;
    cfg.distill.weight_decay = -1.0;

    cfg.attention_temperature = 1.0;
    cfg.out_dir = "out";
    return cfg;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string fmt_double_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += fmt_double(v[i]);
    }
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void type_error(const std::string& key, const std::string& value,
                             const char* expected) {
    throw ConfigError("key '" + key + "' expects " + expected + ", got '" + value + "'");
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) type_error(key, value, "an integer");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        type_error(key, value, "an integer");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) type_error(key, value, "a non-negative integer");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        type_error(key, value, "a non-negative integer");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) type_error(key, value, "a real number");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        type_error(key, value, "a real number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    type_error(key, value, "a boolean (true/false)");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    if (trim(value).empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
    return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    if (trim(value).empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& key_registry() {
    static const std::map<std::string, Setter> registry = {
        {"task",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             auto t = task_from_string(v);
             if (!t) throw ConfigError("unknown value '" + v + "' for key '" + k +
                                       "'; valid: classify, segment");
             c.task = *t;
         }},
        {"out_dir",
         [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
        {"data.image_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.image_size = parse_int(k, v);
         }},
        {"data.num_train",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.num_train = parse_int(k, v);
         }},
        {"data.num_val",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.num_val = parse_int(k, v);
         }},
        {"data.noise_std",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.noise_std = parse_double(k, v);
         }},
        {"data.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.data.seed = parse_u64(k, v);
         }},
        {"teacher.stage_channels",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.teacher.stage_channels = parse_int_list(k, v);
         }},
        {"teacher.tap",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.teacher.tap = parse_int(k, v);
         }},
        {"teacher.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.teacher.seed = parse_u64(k, v);
         }},
        {"student.stage_channels",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.student.stage_channels = parse_int_list(k, v);
         }},
        {"student.tap",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.student.tap = parse_int(k, v);
         }},
        {"student.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.student.seed = parse_u64(k, v);
         }},
        {"student.heterogeneous",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.heterogeneous = parse_bool(k, v);
             c.student.stage_channels = c.heterogeneous ? std::vector<int>{8, 16, 16}
                                                        : std::vector<int>{8, 16, 32};
         }},
        {"train.epochs",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.epochs = parse_int(k, v);
         }},
        {"train.batch_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.batch_size = parse_int(k, v);
         }},
        {"train.base_lr",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.base_lr = parse_double(k, v);
         }},
        {"train.momentum",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.momentum = parse_double(k, v);
         }},
        {"train.weight_decay",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.weight_decay = parse_double(k, v);
         }},
        {"train.lr_decay_epochs",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.lr_decay_epochs = parse_int_list(k, v);
         }},
        {"train.lr_decay_factor",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.lr_decay_factor = parse_double(k, v);
         }},
        {"train.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.seed = parse_u64(k, v);
         }},
        {"distill.transform",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             auto t = transform_from_string(v);
             if (!t) throw ConfigError("unknown value '" + v + "' for key '" + k +
                                       "'; valid: " + kTransformKindNames);
             c.distill.transform = *t;
         }},
        {"distill.loss",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             auto l = loss_from_string(v);
             if (!l) throw ConfigError("unknown value '" + v + "' for key '" + k +
                                       "'; valid: l2, kl, cwd");
             c.distill.loss = *l;
         }},
        {"distill.alpha",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.distill.alpha = parse_double(k, v);
             if (c.distill.alpha < 0.0)
                 throw ConfigError("key '" + k + "' must be >= 0, got '" + v + "'");
         }},
        {"distill.taps",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.distill.taps = parse_int_list(k, v);
         }},
        {"distill.side",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             auto s = side_from_string(v);
             if (!s) throw ConfigError("unknown value '" + v + "' for key '" + k +
                                       "'; valid: student_only, both_sides");
             c.distill.side = *s;
         }},
        {"distill.cwd_temperature",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.distill.temperature = parse_double(k, v);
         }},
        {"distill.hidden",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.distill.hidden = parse_int(k, v);
         }},
        {"distill.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.distill.seed = parse_u64(k, v);
         }},
        {"distill.weight_decay",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.distill.weight_decay = parse_double(k, v);
         }},
        {"sweep.alphas",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.sweep_alphas = parse_double_list(k, v);
         }},
        {"diag.attention_temperature",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.attention_temperature = parse_double(k, v);
         }},
    };
    return registry;
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    // `alpha` is accepted as shorthand for the single tunable hyperparameter
    const std::string canonical = key == "alpha" ? "distill.alpha" : key;
    auto it = key_registry().find(canonical);
    if (it == key_registry().end()) throw ConfigError("unknown key '" + key + "'");
    it->second(cfg, canonical, value);
}

void apply_override_token(RunConfig& cfg, const std::string& token) {
    const std::size_t eq = token.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + token + "' is not of the form key=value");
    apply_override(cfg, trim(token.substr(0, eq)), trim(token.substr(eq + 1)));
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    RunConfig cfg = default_config();
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        try {
            apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

void finalize_config(RunConfig& cfg) {
    cfg.data.task = cfg.task;
    cfg.teacher.task = cfg.task;
    cfg.student.task = cfg.task;
    cfg.teacher.num_classes = cfg.data.num_classes();
    cfg.student.num_classes = cfg.data.num_classes();
    cfg.heterogeneous = false;
    if (!cfg.teacher.stage_channels.empty() && !cfg.student.stage_channels.empty()) {
        const int ct = cfg.teacher.stage_channels[static_cast<std::size_t>(
            cfg.teacher.resolved_tap())];
        const int cs = cfg.student.stage_channels[static_cast<std::size_t>(
            cfg.student.resolved_tap())];
        cfg.heterogeneous = ct != cs;
    }
    if (cfg.distill.alpha < 0.0) cfg.distill.alpha = cfg.distill.resolved_alpha(cfg.task);
    if (cfg.sweep_alphas.empty()) {
        // one order of magnitude centered on the tuned alpha
        const double a = cfg.distill.alpha;
        for (double e : {-0.5, -0.25, 0.0, 0.25, 0.5})
            cfg.sweep_alphas.push_back(a * std::pow(10.0, e));
    }
}

nlohmann::json config_echo(const RunConfig& cfg) {
    nlohmann::json j;
    j["task"] = to_string(cfg.task);
    j["out_dir"] = cfg.out_dir;
    j["data.image_size"] = std::to_string(cfg.data.image_size);
    j["data.num_train"] = std::to_string(cfg.data.num_train);
    j["data.num_val"] = std::to_string(cfg.data.num_val);
    j["data.noise_std"] = fmt_double(cfg.data.noise_std);
    j["data.seed"] = std::to_string(cfg.data.seed);
    j["teacher.stage_channels"] = fmt_int_list(cfg.teacher.stage_channels);
    j["teacher.tap"] = std::to_string(cfg.teacher.tap);
    j["teacher.seed"] = std::to_string(cfg.teacher.seed);
    j["student.stage_channels"] = fmt_int_list(cfg.student.stage_channels);
    j["student.tap"] = std::to_string(cfg.student.tap);
    j["student.seed"] = std::to_string(cfg.student.seed);
    j["train.epochs"] = std::to_string(cfg.train.epochs);
    j["train.batch_size"] = std::to_string(cfg.train.batch_size);
    j["train.base_lr"] = fmt_double(cfg.train.base_lr);
    j["train.momentum"] = fmt_double(cfg.train.momentum);
    j["train.weight_decay"] = fmt_double(cfg.train.weight_decay);
    j["train.lr_decay_epochs"] = fmt_int_list(cfg.train.lr_decay_epochs);
    j["train.lr_decay_factor"] = fmt_double(cfg.train.lr_decay_factor);
    j["train.seed"] = std::to_string(cfg.train.seed);
    j["distill.transform"] = to_string(cfg.distill.transform);
    j["distill.loss"] = to_string(cfg.distill.loss);
    j["distill.alpha"] = fmt_double(cfg.distill.alpha);
    j["distill.taps"] = fmt_int_list(cfg.distill.taps);
    j["distill.side"] = to_string(cfg.distill.side);
    j["distill.cwd_temperature"] = fmt_double(cfg.distill.temperature);
    j["distill.hidden"] = std::to_string(cfg.distill.hidden);
    j["distill.seed"] = std::to_string(cfg.distill.seed);
    j["distill.weight_decay"] = fmt_double(cfg.distill.weight_decay);
    j["sweep.alphas"] = fmt_double_list(cfg.sweep_alphas);
    j["diag.attention_temperature"] = fmt_double(cfg.attention_temperature);
    return j;
}

std::string config_reference() {
    RunConfig cfg = default_config();
    finalize_config(cfg);
    const nlohmann::json j = config_echo(cfg);
    std::string out;
    for (const auto& [key, value] : j.items())
        out += key + " = " + value.get<std::string>() + "\n";
    return out;
}

}  // namespace kd
