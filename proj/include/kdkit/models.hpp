#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kdkit/nn.hpp"
#include "kdkit/task.hpp"
#include "kdkit/tensor.hpp"

namespace kd {

// Backbone description. Stages are conv3x3(pad 1) -> ReLU blocks; classify
// stages downsample with stride 2, segment stages keep resolution. The tap
// is the stage whose post-ReLU activation feeds the distillation loss.
struct ModelSpec {
    Task task = Task::classify;
    std::vector<int> stage_channels;
    int num_classes = 4;
    int tap = -1;  // -1 means last stage
    std::uint64_t seed = 0;
    int in_channels = 1;

    int resolved_tap() const {
        return tap < 0 ? static_cast<int>(stage_channels.size()) - 1 : tap;
    }
};

class Model {
public:
    static Model build(const ModelSpec& spec);

    const ModelSpec& spec() const { return spec_; }
    int stage_count() const { return static_cast<int>(stages_.size()); }
    int tap_channels(int stage) const;

    Tensor forward(const Tensor& x) const;  // logits only
    std::pair<Tensor, Tensor> forward_with_tap(const Tensor& x) const;
    std::pair<Tensor, std::vector<Tensor>> forward_with_taps(const Tensor& x,
                                                             const std::vector<int>& taps) const;

    std::vector<std::pair<std::string, Tensor>>& named_parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
    std::vector<Tensor> parameters() const;
    void set_trainable(bool trainable);
    bool trainable() const;

    // exact number of scalar parameters
    std::size_t parameter_count() const;

private:
    struct Stage {
        Tensor w, b;
        int stride;
    };
    ModelSpec spec_;
    std::vector<Stage> stages_;
    Tensor head_w, head_b;  // 1x1 conv to num_classes; classify applies it after GAP
    std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace kd
