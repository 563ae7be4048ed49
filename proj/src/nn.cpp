#include "kdkit/nn.hpp"

#include <cmath>

#include "kdkit/rng.hpp"

namespace kd {

const char* const kTransformKindNames = "identity, linear, mlp, conv3x3, nonlocal";

const char* to_string(TransformKind k) {
    switch (k) {
        case TransformKind::identity: return "identity";
        case TransformKind::linear: return "linear";
        case TransformKind::mlp: return "mlp";
        case TransformKind::conv3x3: return "conv3x3";
        case TransformKind::nonlocal: return "nonlocal";
    }
    return "?";
}

std::optional<TransformKind> transform_from_string(const std::string& s) {
    if (s == "identity") return TransformKind::identity;
    if (s == "linear") return TransformKind::linear;
    if (s == "mlp") return TransformKind::mlp;
    if (s == "conv3x3") return TransformKind::conv3x3;
    if (s == "nonlocal") return TransformKind::nonlocal;
    return std::nullopt;
}

std::pair<Tensor, Tensor> init_conv_params(int c_in, int c_out, int k, std::uint64_t seed) {
    if (c_in < 1 || c_out < 1) throw ValueError("init_conv_params: channel counts must be >= 1");
    if (k != 1 && k != 3) throw ValueError("init_conv_params: kernel must be 1 or 3");
    const double stddev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    Rng rng(seed);
    std::vector<double> w(static_cast<std::size_t>(c_out) * c_in * k * k);
    for (double& v : w) v = stddev * rng.normal();
    Tensor weight = Tensor::param({c_out, c_in, k, k}, std::move(w));
    Tensor bias = Tensor::param({c_out}, std::vector<double>(static_cast<std::size_t>(c_out), 0.0));
    return {weight, bias};
}

TransformModule TransformModule::make(TransformKind kind, int c_in, int c_out, int hidden,
                                      std::uint64_t seed) {
    if (c_in < 1 || c_out < 1)
        throw ValueError("transform: channel counts must be >= 1");
    TransformModule m;
    m.kind = kind;
    m.c_in = c_in;
    m.c_out = c_out;
    Rng streams(seed);
    switch (kind) {
        case TransformKind::identity:
            if (c_in != c_out)
                throw ShapeError("identity transform requires equal channels, got " +
                                 std::to_string(c_in) + " vs " + std::to_string(c_out));
            break;
        case TransformKind::linear: {
            auto [w, b] = init_conv_params(c_in, c_out, 1, streams.fork(1).next_u64());
            m.params = {{"w", w}, {"b", b}};
            break;
        }
        case TransformKind::mlp: {
            m.hidden = hidden > 0 ? hidden : std::max(c_in, c_out);
            auto [w1, b1] = init_conv_params(c_in, m.hidden, 1, streams.fork(1).next_u64());
            auto [w2, b2] = init_conv_params(m.hidden, c_out, 1, streams.fork(2).next_u64());
            m.params = {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
            break;
        }
        case TransformKind::conv3x3: {
            m.hidden = hidden > 0 ? hidden : std::max(c_in, c_out);
            auto [w1, b1] = init_conv_params(c_in, m.hidden, 3, streams.fork(1).next_u64());
            auto [w2, b2] = init_conv_params(m.hidden, c_out, 3, streams.fork(2).next_u64());
            m.params = {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
            break;
        }
        case TransformKind::nonlocal: {
            if (c_in != c_out)
                throw ShapeError("nonlocal transform requires equal channels, got " +
                                 std::to_string(c_in) + " vs " + std::to_string(c_out));
            const int embed = std::max(1, c_in / 2);
            m.hidden = embed;
            auto [wt, bt] = init_conv_params(c_in, embed, 1, streams.fork(1).next_u64());
            auto [wp, bp] = init_conv_params(c_in, embed, 1, streams.fork(2).next_u64());
            auto [wg, bg] = init_conv_params(c_in, embed, 1, streams.fork(3).next_u64());
            auto [wo, bo] = init_conv_params(embed, c_out, 1, streams.fork(4).next_u64());
            (void)bp;  // a phi bias shifts every score in a softmax row equally,
                       // so the attention is exactly invariant to it; omit it
            m.params = {{"w_theta", wt}, {"b_theta", bt}, {"w_phi", wp},
                        {"w_g", wg},     {"b_g", bg},     {"w_out", wo}, {"b_out", bo}};
            break;
        }
    }
    return m;
}

std::vector<Tensor> TransformModule::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
}

const Tensor& TransformModule::param(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw ValueError("transform has no parameter '" + name + "'");
}

void TransformModule::set_trainable(bool trainable) {
    for (auto& [name, t] : params) t.set_requires_grad(trainable);
}

namespace {

void require_channels(const Tensor& feature, int c_in, const char* what) {
    if (feature.rank() != 4)
        throw ShapeError(std::string(what) + " expects NCHW input, got " +
                         shape_str(feature.shape()));
    if (feature.extent(1) != c_in)
        throw ShapeError(std::string(what) + ": input has " + std::to_string(feature.extent(1)) +
                         " channels, transform expects " + std::to_string(c_in));
}

}  // namespace

Tensor mlp_transform(const Tensor& feature, const TransformModule& m) {
    require_channels(feature, m.c_in, "mlp_transform");
    Tensor h = relu(conv2d(feature, m.param("w1"), m.param("b1"), 1, 0));
    return conv2d(h, m.param("w2"), m.param("b2"), 1, 0);
}

Tensor nonlocal_block(const Tensor& feature, const TransformModule& m) {
    require_channels(feature, m.c_in, "nonlocal_block");
    const int n = feature.extent(0), h = feature.extent(2), w = feature.extent(3);
    const int embed = m.hidden;
    const int hw = h * w;

    Tensor theta = conv2d(feature, m.param("w_theta"), m.param("b_theta"), 1, 0);
    Tensor phi = conv2d(feature, m.param("w_phi"), 1, 0);
    Tensor g = conv2d(feature, m.param("w_g"), m.param("b_g"), 1, 0);

    // embedded Gaussian: attention[i, j] = softmax_j(theta_i . phi_j)
    Tensor theta_rows = transpose_last2(reshape(theta, {n, embed, hw}));  // [N, HW, E]
    Tensor phi_cols = reshape(phi, {n, embed, hw});                       // [N, E, HW]
    Tensor scores = batched_matmul(theta_rows, phi_cols);                 // [N, HW, HW]
    Tensor attention = softmax(scores, 2);

    Tensor g_rows = transpose_last2(reshape(g, {n, embed, hw}));  // [N, HW, E]
    Tensor mixed = batched_matmul(attention, g_rows);             // [N, HW, E]
    Tensor y = reshape(transpose_last2(mixed), {n, embed, h, w});
    return add(feature, conv2d(y, m.param("w_out"), m.param("b_out"), 1, 0));
}

Tensor TransformModule::forward(const Tensor& feature) const {
    switch (kind) {
        case TransformKind::identity:
            require_channels(feature, c_in, "identity transform");
            return feature;
        case TransformKind::linear:
            require_channels(feature, c_in, "linear transform");
            return conv2d(feature, param("w"), param("b"), 1, 0);
        case TransformKind::mlp:
            return mlp_transform(feature, *this);
        case TransformKind::conv3x3: {
            require_channels(feature, c_in, "conv3x3 transform");
            Tensor h = relu(conv2d(feature, param("w1"), param("b1"), 1, 1));
            return conv2d(h, param("w2"), param("b2"), 1, 1);
        }
        case TransformKind::nonlocal:
            return nonlocal_block(feature, *this);
    }
    throw ValueError("unknown transform kind");
}

}  // namespace kd
