#include "kdkit/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kd {

const char* to_string(LossKind k) {
    switch (k) {
        case LossKind::l2: return "l2";
        case LossKind::kl: return "kl";
        case LossKind::cwd: return "cwd";
    }
    return "?";
}

std::optional<LossKind> loss_from_string(const std::string& s) {
    if (s == "l2") return LossKind::l2;
    if (s == "kl") return LossKind::kl;
    if (s == "cwd") return LossKind::cwd;
    return std::nullopt;
}

const char* to_string(TransformSide s) {
    return s == TransformSide::student_only ? "student_only" : "both_sides";
}

std::optional<TransformSide> side_from_string(const std::string& s) {
    if (s == "student_only") return TransformSide::student_only;
    if (s == "both_sides") return TransformSide::both_sides;
    return std::nullopt;
}

double DistillConfig::resolved_alpha(Task task) const {
    if (alpha >= 0.0) return alpha;
    // Desk-scale presets, tuned with the alpha sweep on the default tasks.
    if (task == Task::classify) {
        switch (loss) {
            case LossKind::l2: return 2e-3;
            case LossKind::kl: return 2.0;
            case LossKind::cwd: return 2.0;
        }
    }
    switch (loss) {
        case LossKind::l2: return 5e-5;
        case LossKind::kl: return 2.0;
        case LossKind::cwd: return 2.0;
    }
    return 0.0;
}

namespace {

void require_paired(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": feature shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// Tape-free softmax and log-softmax of the target feature along contiguous
// lines of length `len` starting at every multiple of `len`.
void target_distribution(std::span<const double> v, std::size_t len, double temperature,
                         std::vector<double>& probs, std::vector<double>& log_probs) {
    probs.resize(v.size());
    log_probs.resize(v.size());
    for (std::size_t base = 0; base < v.size(); base += len) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < len; ++i) m = std::max(m, v[base + i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) sum += std::exp((v[base + i] - m) / temperature);
        const double lse = std::log(sum);
        for (std::size_t i = 0; i < len; ++i) {
            const double lp = (v[base + i] - m) / temperature - lse;
            log_probs[base + i] = lp;
            probs[base + i] = std::exp(lp);
        }
    }
}

}  // namespace

Tensor feat_l2_loss(const Tensor& student_transformed, const Tensor& teacher) {
    require_paired("feat_l2_loss", student_transformed, teacher);
    if (teacher.requires_grad())
        throw ContractError("feat_l2_loss: teacher feature must not require gradient");
    const int n = student_transformed.extent(0);
    Tensor diff = sub(student_transformed, teacher);
    return scale(reduce_sum(mul(diff, diff)), 1.0 / static_cast<double>(n));
}

Tensor feat_kl_loss(const Tensor& student_transformed, const Tensor& teacher,
                    double temperature) {
    require_paired("feat_kl_loss", student_transformed, teacher);
    if (temperature <= 0.0) throw ValueError("feat_kl_loss: temperature must be positive");
    const int n = student_transformed.extent(0);
    const int d = static_cast<int>(student_transformed.size()) / n;

    std::vector<double> p, lp;
    target_distribution(teacher.values(), static_cast<std::size_t>(d), temperature, p, lp);
    Tensor target_p = Tensor::from({n, d}, std::move(p));
    Tensor target_lp = Tensor::from({n, d}, std::move(lp));

    Tensor student_lq = log_softmax(reshape(student_transformed, {n, d}), 1, temperature);
    Tensor kl = reduce_sum(mul(target_p, sub(target_lp, student_lq)));
    return scale(kl, temperature * temperature / static_cast<double>(n));
}

Tensor feat_cwd_loss(const Tensor& student_transformed, const Tensor& teacher,
                     double temperature) {
    require_paired("feat_cwd_loss", student_transformed, teacher);
    if (temperature <= 0.0) throw ValueError("feat_cwd_loss: temperature must be positive");
    if (student_transformed.rank() != 4)
        throw ShapeError("feat_cwd_loss expects NCHW features, got " +
                         shape_str(student_transformed.shape()));
    const int n = student_transformed.extent(0);
    const int c = student_transformed.extent(1);
    const int hw = student_transformed.extent(2) * student_transformed.extent(3);

    std::vector<double> p, lp;
    target_distribution(teacher.values(), static_cast<std::size_t>(hw), temperature, p, lp);
    Tensor target_p = Tensor::from({n, c, hw}, std::move(p));
    Tensor target_lp = Tensor::from({n, c, hw}, std::move(lp));

    Tensor student_lq = log_softmax(reshape(student_transformed, {n, c, hw}), 2, temperature);
    Tensor kl = reduce_sum(mul(target_p, sub(target_lp, student_lq)));
    return scale(kl, temperature * temperature / static_cast<double>(n));
}

Tensor feature_loss(LossKind kind, const Tensor& student_transformed, const Tensor& teacher,
                    double temperature) {
    switch (kind) {
        case LossKind::l2: return feat_l2_loss(student_transformed, teacher);
        case LossKind::kl: return feat_kl_loss(student_transformed, teacher, temperature);
        case LossKind::cwd: return feat_cwd_loss(student_transformed, teacher, temperature);
    }
    throw ValueError("unknown feature loss kind");
}

LossBreakdown total_loss(const Tensor& task_loss, const Tensor& feat_loss, double alpha) {
    if (task_loss.size() != 1 || feat_loss.size() != 1)
        throw ShapeError("total_loss expects scalar losses");
    LossBreakdown out;
    out.task_loss = task_loss;
    out.feat_loss = feat_loss;
    out.alpha = alpha;
    out.total = add(task_loss, scale(feat_loss, alpha));
    return out;
}

Tensor teacher_forward_frozen(const Model& teacher, const Tensor& x) {
    return teacher_forward_frozen_taps(teacher, x, {teacher.spec().resolved_tap()})[0];
}

std::vector<Tensor> teacher_forward_frozen_taps(const Model& teacher, const Tensor& x,
                                                const std::vector<int>& taps) {
    if (teacher.trainable())
        throw ContractError("teacher_forward_frozen: teacher has trainable parameters");
    const Tensor input = x.requires_grad() ? x.detach() : x;
    return teacher.forward_with_taps(input, taps).second;
}

}  // namespace kd
