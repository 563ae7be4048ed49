#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kdkit/models.hpp"
#include "kdkit/nn.hpp"
#include "kdkit/tensor.hpp"

namespace kd {

enum class LossKind { l2, kl, cwd };
enum class TransformSide { student_only, both_sides };

const char* to_string(LossKind k);
std::optional<LossKind> loss_from_string(const std::string& s);
const char* to_string(TransformSide s);
std::optional<TransformSide> side_from_string(const std::string& s);

// One distillation recipe. alpha < 0 means "use the task/loss preset".
struct DistillConfig {
    TransformKind transform = TransformKind::mlp;
    LossKind loss = LossKind::l2;
    double alpha = -1.0;
    std::vector<int> taps;  // empty -> student/teacher last stage
    TransformSide side = TransformSide::student_only;
    double temperature = 4.0;  // softmax temperature for the KL and CWD losses
    int hidden = 0;            // transform hidden width, 0 -> max(c_in, c_out)
    std::uint64_t seed = 0;    // transform init stream, independent of training
    double weight_decay = -1.0;  // transform weight decay, < 0 -> follow the optimizer
    double lr_scale = 1.0;       // transform learning-rate multiplier

    double resolved_alpha(Task task) const;
};

struct LossBreakdown {
    Tensor task_loss;
    Tensor feat_loss;
    Tensor total;
    double alpha = 0.0;
};

// Batch-averaged squared distance: sum over all elements of
// (student_transformed - teacher)^2 divided by the batch size N only.
Tensor feat_l2_loss(const Tensor& student_transformed, const Tensor& teacher);

// KL(teacher || student) between per-sample softmax distributions over the
// flattened C*H*W axis, averaged over the batch, scaled by temperature^2.
Tensor feat_kl_loss(const Tensor& student_transformed, const Tensor& teacher,
                    double temperature);

// Channel-wise variant: per (n, c) softmax over the H*W positions,
// KL(teacher || student) summed over channels, averaged over N, scaled by T^2.
Tensor feat_cwd_loss(const Tensor& student_transformed, const Tensor& teacher,
                     double temperature);

Tensor feature_loss(LossKind kind, const Tensor& student_transformed, const Tensor& teacher,
                    double temperature);

LossBreakdown total_loss(const Tensor& task_loss, const Tensor& feat_loss, double alpha);

// Tap of a frozen teacher, guaranteed off-tape. Throws ContractError if any
// teacher parameter is still trainable.
Tensor teacher_forward_frozen(const Model& teacher, const Tensor& x);
std::vector<Tensor> teacher_forward_frozen_taps(const Model& teacher, const Tensor& x,
                                                const std::vector<int>& taps);

}  // namespace kd
