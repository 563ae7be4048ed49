#pragma once

#include <vector>

#include "kdkit/train.hpp"

namespace kd {

// Mean over validation samples of the per-element-normalized L2 distance
// between student and teacher taps, before and after the transform.
// `before` is undefined when the raw channel counts differ.
struct DistanceReport {
    double before = 0.0;
    double after = 0.0;
    bool before_defined = true;
    TransformKind transform = TransformKind::identity;
};

DistanceReport l2_distance_report(const Model& teacher, const Model& student,
                                  const TransformModule* transform,
                                  const std::vector<SyntheticSample>& val);

// Paired runs differing only in transform_side. The teacher backbone stays
// frozen in both; both_sides additionally trains an independent MLP on the
// teacher tap.
struct CollapseResult {
    std::vector<double> feat_student_only;
    std::vector<double> feat_both_sides;
    double metric_student_only = 0.0;
    double metric_both_sides = 0.0;
};

CollapseResult collapse_experiment(const Model& teacher, const ModelSpec& student_spec,
                                   const std::vector<SyntheticSample>& train_set,
                                   const std::vector<SyntheticSample>& val_set, Task task,
                                   const TrainConfig& cfg);

// Per-channel mean absolute activation over N, H, W, softmaxed over channels
// at the given temperature. Sums to 1.
std::vector<double> channel_attention_profile(const Tensor& feature, double temperature);

}  // namespace kd
