#include "kdkit/models.hpp"

#include "kdkit/rng.hpp"

namespace kd {

Model Model::build(const ModelSpec& spec) {
    if (spec.stage_channels.empty())
        throw ValueError("model spec needs at least one stage");
    for (int c : spec.stage_channels)
        if (c < 1) throw ValueError("model spec: non-positive stage channel count");
    if (spec.num_classes < 2) throw ValueError("model spec: num_classes must be >= 2");
    if (spec.resolved_tap() < 0 || spec.resolved_tap() >= static_cast<int>(spec.stage_channels.size()))
        throw ValueError("model spec: tap " + std::to_string(spec.tap) + " out of range for " +
                         std::to_string(spec.stage_channels.size()) + " stages");
    if (spec.in_channels < 1) throw ValueError("model spec: in_channels must be >= 1");

    Model m;
    m.spec_ = spec;
    Rng streams(spec.seed);
    const int stride = spec.task == Task::classify ? 2 : 1;
    int c_prev = spec.in_channels;
    for (std::size_t i = 0; i < spec.stage_channels.size(); ++i) {
        const int c = spec.stage_channels[i];
        auto [w, b] = init_conv_params(c_prev, c, 3, streams.fork(i + 1).next_u64());
        m.stages_.push_back(Stage{w, b, stride});
        const std::string prefix = "stage" + std::to_string(i);
        m.params_.emplace_back(prefix + ".w", w);
        m.params_.emplace_back(prefix + ".b", b);
        c_prev = c;
    }
    auto [hw, hb] = init_conv_params(c_prev, spec.num_classes, 1, streams.fork(101).next_u64());
    m.head_w = hw;
    m.head_b = hb;
    m.params_.emplace_back("head.w", hw);
    m.params_.emplace_back("head.b", hb);
    return m;
}

int Model::tap_channels(int stage) const {
    if (stage < 0 || stage >= stage_count())
        throw ValueError("tap stage " + std::to_string(stage) + " out of range");
    return spec_.stage_channels[static_cast<std::size_t>(stage)];
}

namespace {

Tensor classify_head(const Tensor& features, const Tensor& w, const Tensor& b) {
    const int n = features.extent(0), c = features.extent(1);
    const int k = w.extent(0);
    Tensor pooled = global_avg_pool(features);                    // [N, C]
    Tensor as_image = reshape(pooled, {n, c, 1, 1});
    return reshape(conv2d(as_image, w, b, 1, 0), {n, k});         // [N, K]
}

}  // namespace

std::pair<Tensor, std::vector<Tensor>> Model::forward_with_taps(
    const Tensor& x, const std::vector<int>& taps) const {
    if (x.rank() != 4 || x.extent(1) != spec_.in_channels)
        throw ShapeError("model expects [N," + std::to_string(spec_.in_channels) +
                         ",H,W] input, got " + shape_str(x.shape()));
    for (int t : taps)
        if (t < 0 || t >= stage_count())
            throw ValueError("tap stage " + std::to_string(t) + " out of range");

    std::vector<Tensor> tapped(taps.size());
    Tensor h = x;
    for (int i = 0; i < stage_count(); ++i) {
        const Stage& s = stages_[static_cast<std::size_t>(i)];
        h = relu(conv2d(h, s.w, s.b, s.stride, 1));
        for (std::size_t t = 0; t < taps.size(); ++t)
            if (taps[t] == i) tapped[t] = h;
    }
    Tensor logits = spec_.task == Task::classify ? classify_head(h, head_w, head_b)
                                                 : conv2d(h, head_w, head_b, 1, 0);
    return {logits, std::move(tapped)};
}

std::pair<Tensor, Tensor> Model::forward_with_tap(const Tensor& x) const {
    auto [logits, taps] = forward_with_taps(x, {spec_.resolved_tap()});
    return {logits, taps[0]};
}

Tensor Model::forward(const Tensor& x) const {
    return forward_with_taps(x, {}).first;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(t);
    return out;
}

void Model::set_trainable(bool trainable) {
    for (auto& [name, t] : params_) t.set_requires_grad(trainable);
}

bool Model::trainable() const {
    for (const auto& [name, t] : params_)
        if (t.requires_grad()) return true;
    return false;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

}  // namespace kd
