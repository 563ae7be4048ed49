#include "kdkit/experiments.hpp"

#include "kdkit/rng.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>

namespace kd {

namespace {

std::string metric_name(Task task) { return task == Task::classify ? "top-1" : "mIoU"; }

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
    return h;
}

// Everything that determines the pretrained teacher: task, data, teacher
// spec, schedule. Student/distill keys deliberately excluded.
std::string teacher_cache_key(const RunConfig& cfg) {
    const nlohmann::json echo = config_echo(cfg);
    std::string key;
    for (const auto& [k, v] : echo.items())
        if (k == "task" || k.rfind("data.", 0) == 0 || k.rfind("teacher.", 0) == 0 ||
            k.rfind("train.", 0) == 0)
            key += k + "=" + v.get<std::string>() + ";";
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(key)));
    return buf;
}

struct TapPair {
    int student_tap, teacher_tap;
    int c_in, c_out;
};

std::vector<TapPair> tap_pairs(const RunConfig& cfg) {
    std::vector<TapPair> out;
    if (cfg.distill.taps.empty()) {
        const int st = cfg.student.resolved_tap();
        const int tt = cfg.teacher.resolved_tap();
        out.push_back({st, tt, cfg.student.stage_channels[static_cast<std::size_t>(st)],
                       cfg.teacher.stage_channels[static_cast<std::size_t>(tt)]});
    } else {
        for (int t : cfg.distill.taps) {
            if (t < 0 || t >= static_cast<int>(cfg.student.stage_channels.size()) ||
                t >= static_cast<int>(cfg.teacher.stage_channels.size()))
                throw ConfigError("distill.taps entry " + std::to_string(t) +
                                  " out of range for the model stages");
            out.push_back({t, t, cfg.student.stage_channels[static_cast<std::size_t>(t)],
                           cfg.teacher.stage_channels[static_cast<std::size_t>(t)]});
        }
    }
    return out;
}

nlohmann::json base_report(const RunConfig& cfg, const char* command) {
    nlohmann::json j;
    j["command"] = command;
    j["metric"] = metric_name(cfg.task);
    j["config"] = config_echo(cfg);
    return j;
}

void write_report(const RunConfig& cfg, const nlohmann::json& j) {
    write_json_file(cfg.out_dir + "/report.json", j);
}

ExperimentReport run_baseline(const RunConfig& cfg, Model& student,
                              const std::vector<SyntheticSample>& train_set,
                              const std::vector<SyntheticSample>& val_set) {
    TrainConfig tc = cfg.train;
    tc.distill.reset();
    return train_run(student, train_set, val_set, cfg.task, tc);
}

struct DistillRun {
    Model student;
    std::vector<TransformModule> transforms;
    ExperimentReport report;
};

DistillRun run_distilled(const RunConfig& cfg, const Model& teacher,
                         const std::vector<SyntheticSample>& train_set,
                         const std::vector<SyntheticSample>& val_set) {
    DistillRun run{Model::build(cfg.student), make_transforms(cfg), {}};
    TrainConfig tc = cfg.train;
    tc.distill = cfg.distill;
    run.report = train_run(run.student, train_set, val_set, cfg.task, tc, &teacher,
                           &run.transforms);
    return run;
}

void print_arm(const RunConfig& cfg, const std::string& arm, double metric, double seconds) {
    std::printf("%-12s %s %.4f  (%.1fs)\n", arm.c_str(), metric_name(cfg.task).c_str(), metric,
                seconds);
    std::fflush(stdout);
}

}  // namespace

std::vector<TransformModule> make_transforms(const RunConfig& cfg) {
    std::vector<TransformModule> out;
    Rng seeds(cfg.distill.seed);
    std::size_t i = 0;
    for (const TapPair& tp : tap_pairs(cfg))
        out.push_back(TransformModule::make(cfg.distill.transform, tp.c_in, tp.c_out,
                                            cfg.distill.hidden, seeds.fork(i++).next_u64()));
    return out;
}

Model prepare_teacher(const RunConfig& cfg, const std::vector<SyntheticSample>& train_set,
                      const std::vector<SyntheticSample>& val_set, bool quiet) {
    std::filesystem::create_directories(cfg.out_dir);
    const std::string path = cfg.out_dir + "/teacher_" + teacher_cache_key(cfg) + ".ckpt";
    if (std::filesystem::exists(path)) {
        Model teacher = load_model(path);
        teacher.set_trainable(false);
        if (!quiet)
            print_arm(cfg, "teacher*", eval_metrics(teacher, val_set, cfg.task), 0.0);
        return teacher;
    }
    Model teacher = Model::build(cfg.teacher);
    TrainConfig tc = cfg.train;
    tc.distill.reset();
    ExperimentReport r = train_run(teacher, train_set, val_set, cfg.task, tc);
    save_model(path, teacher);
    teacher.set_trainable(false);
    if (!quiet) print_arm(cfg, "teacher", r.final_metric, r.wall_time_s);
    return teacher;
}

void cmd_train(RunConfig cfg) {
    finalize_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    auto [train_set, val_set] = gen_dataset(cfg.data);

    Model teacher = prepare_teacher(cfg, train_set, val_set);
    const double teacher_metric = eval_metrics(teacher, val_set, cfg.task);

    Model baseline = Model::build(cfg.student);
    ExperimentReport rb = run_baseline(cfg, baseline, train_set, val_set);
    write_text_file(cfg.out_dir + "/epochs_baseline.csv", epochs_csv(rb).to_string());
    print_arm(cfg, "baseline", rb.final_metric, rb.wall_time_s);

    DistillRun rd = run_distilled(cfg, teacher, train_set, val_set);
    write_text_file(cfg.out_dir + "/epochs_distilled.csv", epochs_csv(rd.report).to_string());
    print_arm(cfg, "distilled", rd.report.final_metric, rd.report.wall_time_s);

    nlohmann::json j = base_report(cfg, "train");
    j["teacher_metric"] = teacher_metric;
    j["baseline_metric"] = rb.final_metric;
    j["distilled_metric"] = rd.report.final_metric;
    write_report(cfg, j);
}

void cmd_ablate(RunConfig cfg) {
    finalize_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    auto [train_set, val_set] = gen_dataset(cfg.data);
    Model teacher = prepare_teacher(cfg, train_set, val_set);

    CsvTable table;
    table.header = {"arm", "val_metric", "l2_before", "l2_after"};
    nlohmann::json rows = nlohmann::json::array();

    const TapPair tp = tap_pairs(cfg)[0];
    const bool channels_match = tp.c_in == tp.c_out;

    // baseline row: raw student distances, no transform involved
    {
        Model student = Model::build(cfg.student);
        ExperimentReport r = run_baseline(cfg, student, train_set, val_set);
        write_text_file(cfg.out_dir + "/epochs_baseline.csv", epochs_csv(r).to_string());
        DistanceReport d = channels_match
                               ? l2_distance_report(teacher, student, nullptr, val_set)
                               : DistanceReport{std::nan(""), std::nan(""), false,
                                                TransformKind::identity};
        table.add_row({"baseline", fmt_metric(r.final_metric), fmt_metric(d.before),
                       fmt_metric(d.after)});
        rows.push_back({{"arm", "baseline"},
                        {"val_metric", r.final_metric},
                        {"l2_before", d.before_defined ? nlohmann::json(d.before) : nullptr},
                        {"l2_after", d.before_defined ? nlohmann::json(d.after) : nullptr}});
        print_arm(cfg, "baseline", r.final_metric, r.wall_time_s);
    }

    for (TransformKind kind : {TransformKind::identity, TransformKind::linear,
                               TransformKind::mlp, TransformKind::conv3x3,
                               TransformKind::nonlocal}) {
        if ((kind == TransformKind::identity || kind == TransformKind::nonlocal) &&
            !channels_match) {
            std::fprintf(stderr,
                         "warning: skipping %s arm, student tap has %d channels vs teacher %d\n",
                         to_string(kind), tp.c_in, tp.c_out);
            continue;
        }
        RunConfig arm_cfg = cfg;
        arm_cfg.distill.transform = kind;
        DistillRun run = run_distilled(arm_cfg, teacher, train_set, val_set);
        write_text_file(cfg.out_dir + "/epochs_" + to_string(kind) + ".csv",
                        epochs_csv(run.report).to_string());
        DistanceReport d = l2_distance_report(teacher, run.student, &run.transforms[0], val_set);
        table.add_row({to_string(kind), fmt_metric(run.report.final_metric),
                       fmt_metric(d.before), fmt_metric(d.after)});
        rows.push_back({{"arm", to_string(kind)},
                        {"val_metric", run.report.final_metric},
                        {"l2_before", d.before_defined ? nlohmann::json(d.before) : nullptr},
                        {"l2_after", d.after}});
        print_arm(cfg, to_string(kind), run.report.final_metric, run.report.wall_time_s);
    }

    write_text_file(cfg.out_dir + "/ablate.csv", table.to_string());
    nlohmann::json j = base_report(cfg, "ablate");
    j["rows"] = rows;
    write_report(cfg, j);
}

void cmd_sweep_alpha(RunConfig cfg) {
    finalize_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    for (double a : cfg.sweep_alphas)
        if (a < 0.0) throw ConfigError("sweep.alphas entries must be >= 0");
    auto [train_set, val_set] = gen_dataset(cfg.data);
    Model teacher = prepare_teacher(cfg, train_set, val_set);

    Model baseline = Model::build(cfg.student);
    ExperimentReport rb = run_baseline(cfg, baseline, train_set, val_set);
    print_arm(cfg, "baseline", rb.final_metric, rb.wall_time_s);

    CsvTable table;
    table.header = {"alpha", "val_metric"};
    std::vector<double> metrics;
    for (double alpha : cfg.sweep_alphas) {
        RunConfig arm_cfg = cfg;
        arm_cfg.distill.alpha = alpha;
        DistillRun run = run_distilled(arm_cfg, teacher, train_set, val_set);
        table.add_row({fmt_metric(alpha), fmt_metric(run.report.final_metric)});
        metrics.push_back(run.report.final_metric);
        print_arm(cfg, "alpha " + fmt_metric(alpha), run.report.final_metric,
                  run.report.wall_time_s);
    }
    write_text_file(cfg.out_dir + "/sweep.csv", table.to_string());

    SvgSeries series{"distilled " + metric_name(cfg.task), cfg.sweep_alphas, metrics};
    SvgSeries base_line{"baseline", cfg.sweep_alphas,
                        std::vector<double>(cfg.sweep_alphas.size(), rb.final_metric)};
    write_text_file(cfg.out_dir + "/sweep.svg",
                    render_svg_lines("metric vs alpha", "alpha", metric_name(cfg.task),
                                     {series, base_line}));

    nlohmann::json j = base_report(cfg, "sweep-alpha");
    j["alphas"] = cfg.sweep_alphas;
    j["metrics"] = metrics;
    j["baseline_metric"] = rb.final_metric;
    write_report(cfg, j);
}

void cmd_collapse(RunConfig cfg) {
    finalize_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    auto [train_set, val_set] = gen_dataset(cfg.data);
    Model teacher = prepare_teacher(cfg, train_set, val_set);

    TrainConfig tc = cfg.train;
    tc.distill = cfg.distill;
    CollapseResult result =
        collapse_experiment(teacher, cfg.student, train_set, val_set, cfg.task, tc);

    CsvTable table;
    table.header = {"epoch", "feat_loss_student_only", "feat_loss_both_sides"};
    std::vector<double> xs;
    for (std::size_t e = 0; e < result.feat_student_only.size(); ++e) {
        table.add_row({std::to_string(e), fmt_metric(result.feat_student_only[e]),
                       fmt_metric(result.feat_both_sides[e])});
        xs.push_back(static_cast<double>(e));
    }
    write_text_file(cfg.out_dir + "/collapse.csv", table.to_string());
    write_text_file(
        cfg.out_dir + "/collapse.svg",
        render_svg_lines("feature loss by transform side", "epoch", "feat_loss",
                         {{"student_only", xs, result.feat_student_only},
                          {"both_sides", xs, result.feat_both_sides}}));

    print_arm(cfg, "student_only", result.metric_student_only, 0.0);
    print_arm(cfg, "both_sides", result.metric_both_sides, 0.0);
    std::printf("final feat_loss: student_only %.6g, both_sides %.6g\n",
                result.feat_student_only.back(), result.feat_both_sides.back());

    nlohmann::json j = base_report(cfg, "collapse");
    j["final_feat_student_only"] = result.feat_student_only.back();
    j["final_feat_both_sides"] = result.feat_both_sides.back();
    j["metric_student_only"] = result.metric_student_only;
    j["metric_both_sides"] = result.metric_both_sides;
    write_report(cfg, j);
}

void cmd_diag_l2(RunConfig cfg) {
    finalize_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    auto [train_set, val_set] = gen_dataset(cfg.data);
    Model teacher = prepare_teacher(cfg, train_set, val_set);

    DistillRun run = run_distilled(cfg, teacher, train_set, val_set);
    print_arm(cfg, "distilled", run.report.final_metric, run.report.wall_time_s);
    DistanceReport d = l2_distance_report(teacher, run.student, &run.transforms[0], val_set);

    // channel attention profiles over a fixed validation slice
    std::vector<int> idx;
    for (int i = 0; i < std::min<int>(128, static_cast<int>(val_set.size())); ++i)
        idx.push_back(i);
    Tensor x = stack_images(val_set, idx);
    Tensor t_tap = teacher_forward_frozen(teacher, x);
    Tensor s_tap = run.student.forward_with_tap(x).second;
    Tensor s_tr = run.transforms[0].forward(s_tap);
    const double temp = cfg.attention_temperature;

    CsvTable table;
    table.header = {"transform", "l2_before", "l2_after"};
    table.add_row({to_string(run.transforms[0].kind), fmt_metric(d.before), fmt_metric(d.after)});
    write_text_file(cfg.out_dir + "/diag_l2.csv", table.to_string());

    nlohmann::json j = base_report(cfg, "diag-l2");
    j["transform"] = to_string(run.transforms[0].kind);
    j["l2_before"] = d.before_defined ? nlohmann::json(d.before) : nullptr;
    j["l2_after"] = d.after;
    j["distilled_metric"] = run.report.final_metric;
    j["attention_teacher"] = channel_attention_profile(t_tap, temp);
    j["attention_student"] = channel_attention_profile(s_tap, temp);
    j["attention_transformed"] = channel_attention_profile(s_tr, temp);
    write_report(cfg, j);

    std::printf("l2 distance: before %s, after %.6g\n",
                d.before_defined ? fmt_metric(d.before).c_str() : "undefined", d.after);
}

}  // namespace kd
