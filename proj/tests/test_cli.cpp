#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kdkit/experiments.hpp"

using namespace kd;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    os << content;
}

RunConfig tiny_config(const std::string& out) {
    RunConfig cfg = default_config();
    cfg.data.num_train = 48;
    cfg.data.num_val = 16;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.lr_decay_epochs = {};
    cfg.teacher.stage_channels = {6, 8};
    cfg.student.stage_channels = {4, 8};
    cfg.distill.alpha = 1e-3;
    cfg.out_dir = out;
    finalize_config(cfg);
    return cfg;
}

}  // namespace

TEST_CASE("empty config file parses to defaults") {
    const std::string path = "test_cli_empty.cfg";
    write_file(path, "");
    RunConfig cfg = parse_config_file(path);
    RunConfig def = default_config();
    CHECK(cfg.data.num_train == def.data.num_train);
    CHECK(cfg.train.epochs == def.train.epochs);
    std::remove(path.c_str());
}

TEST_CASE("config file parsing with comments and overrides") {
    const std::string path = "test_cli_basic.cfg";
    write_file(path,
               "# experiment recipe\n"
               "task = segment\n"
               "alpha = 7e-5\n"
               "train.epochs = 12   # short run\n"
               "train.epochs = 9\n"
               "student.stage_channels = 4, 8, 8\n");
    RunConfig cfg = parse_config_file(path);
    CHECK(cfg.task == Task::segment);
    CHECK(cfg.distill.alpha == 7e-5);
    CHECK(cfg.train.epochs == 9);  // later keys override earlier
    CHECK(cfg.student.stage_channels == std::vector<int>{4, 8, 8});
    std::remove(path.c_str());
}

TEST_CASE("config errors name the key and expectations") {
    RunConfig cfg = default_config();
    CHECK_THROWS_AS(apply_override(cfg, "no.such.key", "1"), ConfigError);
    try {
        apply_override(cfg, "no.such.key", "1");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("no.such.key") != std::string::npos);
    }
    try {
        apply_override(cfg, "train.epochs", "banana");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("integer") != std::string::npos);
    }
    try {
        apply_override(cfg, "distill.transform", "warp");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        for (const char* kind : {"identity", "linear", "mlp", "conv3x3", "nonlocal"})
            CHECK(msg.find(kind) != std::string::npos);
    }
    CHECK_THROWS_AS(apply_override_token(cfg, "not-a-pair"), ConfigError);
    CHECK_THROWS_AS(parse_config_file("missing_file.cfg"), ConfigError);
}

TEST_CASE("finalize propagates task and resolves presets") {
    RunConfig cfg = default_config();
    apply_override(cfg, "task", "segment");
    finalize_config(cfg);
    CHECK(cfg.data.task == Task::segment);
    CHECK(cfg.teacher.task == Task::segment);
    CHECK(cfg.student.num_classes == 3);
    CHECK(cfg.distill.alpha >= 0.0);  // preset materialized
    CHECK(cfg.sweep_alphas.size() == 5);
    CHECK(cfg.sweep_alphas[2] == doctest::Approx(cfg.distill.alpha).epsilon(1e-12));
    // one order of magnitude end to end
    CHECK(cfg.sweep_alphas.back() / cfg.sweep_alphas.front() == doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("heterogeneous switch") {
    RunConfig cfg = default_config();
    apply_override(cfg, "student.heterogeneous", "true");
    finalize_config(cfg);
    CHECK(cfg.student.stage_channels == std::vector<int>{8, 16, 16});
    CHECK(cfg.heterogeneous);
}

TEST_CASE("config echo round-trips") {
    RunConfig cfg = default_config();
    apply_override(cfg, "task", "segment");
    apply_override(cfg, "distill.loss", "cwd");
    apply_override(cfg, "train.base_lr", "0.0375");
    finalize_config(cfg);
    nlohmann::json echo = config_echo(cfg);

    RunConfig rebuilt = default_config();
    for (const auto& [k, v] : echo.items()) apply_override(rebuilt, k, v.get<std::string>());
    finalize_config(rebuilt);
    CHECK(config_echo(rebuilt) == echo);
}

TEST_CASE("cmd_train writes the full bundle") {
    const std::string out = "test_cli_train_out";
    std::filesystem::remove_all(out);
    cmd_train(tiny_config(out));

    auto report = nlohmann::json::parse(slurp(out + "/report.json"));
    CHECK(report.contains("teacher_metric"));
    CHECK(report.contains("baseline_metric"));
    CHECK(report.contains("distilled_metric"));
    CHECK(report["config"].contains("distill.alpha"));

    const std::string csv = slurp(out + "/epochs_distilled.csv");
    CHECK(csv.rfind("epoch,lr,task_loss,feat_loss,val_metric\n", 0) == 0);
    // header + one row per epoch
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("\r") == std::string::npos);

    // rerun reuses the cached teacher and reproduces the report byte for byte
    const std::string first = slurp(out + "/report.json");
    cmd_train(tiny_config(out));
    CHECK(slurp(out + "/report.json") == first);
    std::filesystem::remove_all(out);
}

TEST_CASE("cmd_sweep_alpha emits csv and svg") {
    const std::string out = "test_cli_sweep_out";
    std::filesystem::remove_all(out);
    RunConfig cfg = tiny_config(out);
    cfg.sweep_alphas = {0.0, 1e-3};
    cmd_sweep_alpha(cfg);

    auto report = nlohmann::json::parse(slurp(out + "/report.json"));
    REQUIRE(report["metrics"].size() == 2);
    // alpha = 0 equals the baseline metric exactly
    CHECK(report["metrics"][0].get<double>() == report["baseline_metric"].get<double>());

    const std::string svg = slurp(out + "/sweep.svg");
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(std::count(svg.begin(), svg.end(), '<') > 10);
    // one polyline per series (metric + baseline reference)
    std::size_t polylines = 0, pos = 0;
    while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
        ++polylines;
        pos += 9;
    }
    CHECK(polylines == 2);

    const std::string csv = slurp(out + "/sweep.csv");
    CHECK(csv.rfind("alpha,val_metric\n", 0) == 0);
    std::filesystem::remove_all(out);
}

TEST_CASE("cmd_collapse emits the two-curve csv") {
    const std::string out = "test_cli_collapse_out";
    std::filesystem::remove_all(out);
    cmd_collapse(tiny_config(out));
    const std::string csv = slurp(out + "/collapse.csv");
    CHECK(csv.rfind("epoch,feat_loss_student_only,feat_loss_both_sides\n", 0) == 0);
    auto report = nlohmann::json::parse(slurp(out + "/report.json"));
    CHECK(report.contains("final_feat_both_sides"));
    std::filesystem::remove_all(out);
}

TEST_CASE("cmd_ablate table has six arms on matching channels") {
    const std::string out = "test_cli_ablate_out";
    std::filesystem::remove_all(out);
    cmd_ablate(tiny_config(out));
    const std::string csv = slurp(out + "/ablate.csv");
    CHECK(csv.rfind("arm,val_metric,l2_before,l2_after\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);  // header + 6 arms
    for (const char* arm : {"baseline", "identity", "linear", "mlp", "conv3x3", "nonlocal"})
        CHECK(csv.find(arm) != std::string::npos);

    // identity keeps before == after
    auto report = nlohmann::json::parse(slurp(out + "/report.json"));
    for (const auto& row : report["rows"])
        if (row["arm"] == "identity")
            CHECK(row["l2_before"].get<double>() == row["l2_after"].get<double>());
    std::filesystem::remove_all(out);
}

TEST_CASE("cmd_diag_l2 emits profiles that sum to one") {
    const std::string out = "test_cli_diag_out";
    std::filesystem::remove_all(out);
    cmd_diag_l2(tiny_config(out));
    auto report = nlohmann::json::parse(slurp(out + "/report.json"));
    for (const char* key : {"attention_teacher", "attention_student", "attention_transformed"}) {
        double sum = 0.0;
        for (const auto& v : report[key]) sum += v.get<double>();
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(report["l2_after"].is_number());
    std::filesystem::remove_all(out);
}

#ifdef KDKIT_BIN
TEST_CASE("binary exit codes") {
    const std::string bin = KDKIT_BIN;
    CHECK(std::system((bin + " defaults > /dev/null").c_str()) == 0);
    // config error -> exit 2
    int rc = std::system((bin + " train bogus.key=1 --out test_cli_rc 2>/dev/null").c_str());
    CHECK(WEXITSTATUS(rc) == 2);
    rc = std::system((bin + " train distill.transform=warp --out test_cli_rc 2>/dev/null").c_str());
    CHECK(WEXITSTATUS(rc) == 2);
    std::filesystem::remove_all("test_cli_rc");
}
#endif
