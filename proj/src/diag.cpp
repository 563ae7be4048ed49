#include "kdkit/diag.hpp"

#include <cmath>
#include <limits>

#include "kdkit/rng.hpp"

namespace kd {

namespace {

// sqrt(sum of squared differences) / element count, one value per sample
double per_sample_distance(const Tensor& a, const Tensor& b, int sample) {
    const std::size_t stride = a.size() / static_cast<std::size_t>(a.extent(0));
    const std::size_t off = static_cast<std::size_t>(sample) * stride;
    double sum = 0.0;
    for (std::size_t i = 0; i < stride; ++i) {
        const double d = a.values()[off + i] - b.values()[off + i];
        sum += d * d;
    }
    return std::sqrt(sum) / static_cast<double>(stride);
}

}  // namespace

DistanceReport l2_distance_report(const Model& teacher, const Model& student,
                                  const TransformModule* transform,
                                  const std::vector<SyntheticSample>& val) {
    if (val.empty()) throw ValueError("l2_distance_report: empty validation set");
    DistanceReport report;
    report.transform = transform ? transform->kind : TransformKind::identity;

    const int chunk = 64;
    double before_sum = 0.0, after_sum = 0.0;
    std::size_t count = 0;
    bool before_defined = true;

    for (std::size_t start = 0; start < val.size(); start += chunk) {
        std::vector<int> idx;
        for (std::size_t i = start; i < std::min(val.size(), start + chunk); ++i)
            idx.push_back(static_cast<int>(i));
        Tensor x = stack_images(val, idx);
        Tensor t_tap = teacher_forward_frozen(teacher, x);
        Tensor s_tap = student.forward_with_tap(x).second;
        Tensor s_tr = transform ? transform->forward(s_tap) : s_tap;

        if (s_tap.shape() != t_tap.shape()) before_defined = false;
        if (s_tr.shape() != t_tap.shape())
            throw ShapeError("l2_distance_report: transformed tap " + shape_str(s_tr.shape()) +
                             " does not match teacher tap " + shape_str(t_tap.shape()));
        for (int i = 0; i < static_cast<int>(idx.size()); ++i) {
            if (before_defined) before_sum += per_sample_distance(s_tap, t_tap, i);
            after_sum += per_sample_distance(s_tr, t_tap, i);
            ++count;
        }
    }

    report.before_defined = before_defined;
    report.before = before_defined ? before_sum / static_cast<double>(count)
                                   : std::numeric_limits<double>::quiet_NaN();
    report.after = after_sum / static_cast<double>(count);
    return report;
}

CollapseResult collapse_experiment(const Model& teacher, const ModelSpec& student_spec,
                                   const std::vector<SyntheticSample>& train_set,
                                   const std::vector<SyntheticSample>& val_set, Task task,
                                   const TrainConfig& cfg) {
    if (!cfg.distill)
        throw ContractError("collapse_experiment: config must carry a distill recipe");
    if (teacher.trainable())
        throw ContractError("collapse_experiment: teacher must be frozen");

    const int tap_t = teacher.spec().resolved_tap();
    const int tap_s = student_spec.resolved_tap();
    const int c_t = teacher.spec().stage_channels[static_cast<std::size_t>(tap_t)];
    const int c_s = student_spec.stage_channels[static_cast<std::size_t>(tap_s)];

    CollapseResult result;
    for (TransformSide side : {TransformSide::student_only, TransformSide::both_sides}) {
        TrainConfig run_cfg = cfg;
        run_cfg.distill->side = side;
        Model student = Model::build(student_spec);
        std::vector<TransformModule> transforms{TransformModule::make(
            run_cfg.distill->transform, c_s, c_t, run_cfg.distill->hidden,
            run_cfg.distill->seed)};
        std::vector<TransformModule> teacher_transforms;
        if (side == TransformSide::both_sides)
            teacher_transforms.push_back(TransformModule::make(
                TransformKind::mlp, c_t, c_t, run_cfg.distill->hidden,
                Rng(run_cfg.distill->seed).fork(0x7c0).next_u64()));
        ExperimentReport report = train_run(
            student, train_set, val_set, task, run_cfg, &teacher, &transforms,
            side == TransformSide::both_sides ? &teacher_transforms : nullptr);
        auto& curve = side == TransformSide::student_only ? result.feat_student_only
                                                          : result.feat_both_sides;
        for (const auto& e : report.epochs) curve.push_back(e.feat_loss);
        (side == TransformSide::student_only ? result.metric_student_only
                                             : result.metric_both_sides) = report.final_metric;
    }
    return result;
}

std::vector<double> channel_attention_profile(const Tensor& feature, double temperature) {
    if (temperature <= 0.0)
        throw ValueError("channel_attention_profile: temperature must be positive");
    if (feature.rank() != 4)
        throw ShapeError("channel_attention_profile expects NCHW, got " +
                         shape_str(feature.shape()));
    const int n = feature.extent(0), c = feature.extent(1);
    const int hw = feature.extent(2) * feature.extent(3);

    std::vector<double> mean_abs(static_cast<std::size_t>(c), 0.0);
    for (int nn = 0; nn < n; ++nn)
        for (int cc = 0; cc < c; ++cc) {
            const std::size_t off = (static_cast<std::size_t>(nn) * c + cc) * hw;
            for (int i = 0; i < hw; ++i)
                mean_abs[static_cast<std::size_t>(cc)] += std::abs(feature.values()[off + i]);
        }
    const double inv = 1.0 / (static_cast<double>(n) * hw);
    double m = -std::numeric_limits<double>::infinity();
    for (double& v : mean_abs) {
        v *= inv;
        m = std::max(m, v);
    }
    double sum = 0.0;
    std::vector<double> profile(static_cast<std::size_t>(c));
    for (int cc = 0; cc < c; ++cc) {
        profile[static_cast<std::size_t>(cc)] =
            std::exp((mean_abs[static_cast<std::size_t>(cc)] - m) / temperature);
        sum += profile[static_cast<std::size_t>(cc)];
    }
    for (double& v : profile) v /= sum;
    return profile;
}

}  // namespace kd
