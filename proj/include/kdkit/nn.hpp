#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kdkit/tensor.hpp"

namespace kd {

enum class TransformKind { identity, linear, mlp, conv3x3, nonlocal };

const char* to_string(TransformKind k);
std::optional<TransformKind> transform_from_string(const std::string& s);
extern const char* const kTransformKindNames;  // "identity, linear, mlp, conv3x3, nonlocal"

// Kaiming-style init for a conv weight [c_out, c_in, k, k]: zero-mean normal
// with variance 2/(c_in*k^2), zero bias. Deterministic per seed.
std::pair<Tensor, Tensor> init_conv_params(int c_in, int c_out, int k, std::uint64_t seed);

// Feature transformation applied to a tap before the distillation loss.
// Channel mapping is c_in -> c_out; N, H, W are always preserved.
struct TransformModule {
    TransformKind kind = TransformKind::identity;
    int c_in = 0;
    int c_out = 0;
    int hidden = 0;  // mlp/conv3x3 only
    std::vector<std::pair<std::string, Tensor>> params;

    // hidden == 0 picks the default max(c_in, c_out)
    static TransformModule make(TransformKind kind, int c_in, int c_out, int hidden,
                                std::uint64_t seed);

    Tensor forward(const Tensor& feature) const;
    std::vector<Tensor> parameters() const;
    const Tensor& param(const std::string& name) const;
    void set_trainable(bool trainable);
};

Tensor mlp_transform(const Tensor& feature, const TransformModule& m);
Tensor nonlocal_block(const Tensor& feature, const TransformModule& m);

}  // namespace kd
