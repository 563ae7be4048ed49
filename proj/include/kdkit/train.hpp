#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kdkit/data.hpp"
#include "kdkit/distill.hpp"
#include "kdkit/models.hpp"

namespace kd {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double base_lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<int> lr_decay_epochs{15, 25};
    double lr_decay_factor = 0.1;
    std::uint64_t seed = 0;
    std::optional<DistillConfig> distill;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double task_loss = 0.0;
    double feat_loss = 0.0;
    double val_metric = 0.0;
};

struct ExperimentReport {
    std::vector<EpochRecord> epochs;
    double final_metric = 0.0;
    double wall_time_s = 0.0;  // informational only, never serialized into reports
};

// SGD with momentum: v <- momentum*v + grad + wd*param; param -= lr*v.
// Parameters may carry per-group weight decay. step() zeroes gradients.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum, double weight_decay);
    void add_params(const std::vector<Tensor>& params);
    void add_params(const std::vector<Tensor>& params, double weight_decay, double lr_scale = 1.0);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    void step();

private:
    struct Slot {
        Tensor param;
        std::vector<double> velocity;
        double weight_decay;
        double lr_scale;
    };
    std::vector<Slot> slots_;
    double lr_, momentum_, default_wd_;
};

// base_lr * factor^(number of decay epochs <= epoch)
double lr_at(const TrainConfig& cfg, int epoch);

// classify: top-1 accuracy; segment: mIoU with classes absent from both
// prediction and truth excluded from the mean. Returns a fraction in [0,1].
double eval_metrics(const Model& model, const std::vector<SyntheticSample>& val, Task task);

// One full training run. With cfg.distill set, `teacher` and `transforms`
// (one per tap) must be provided; `teacher_transforms` is only used by the
// both_sides collapse experiment. Student and transform parameters train
// jointly; the teacher never does. Deterministic given the config.
ExperimentReport train_run(Model& student, const std::vector<SyntheticSample>& train_set,
                           const std::vector<SyntheticSample>& val_set, Task task,
                           const TrainConfig& cfg, const Model* teacher = nullptr,
                           std::vector<TransformModule>* transforms = nullptr,
                           std::vector<TransformModule>* teacher_transforms = nullptr);

// Checkpoint file: magic "SDKM", spec echo, then named parameter tensors as
// little-endian f64. Bit-exact round-trip.
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace kd
