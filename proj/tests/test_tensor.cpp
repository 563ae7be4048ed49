#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "kdkit/rng.hpp"
#include "kdkit/tensor.hpp"

using namespace kd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("elementwise values") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    Tensor s = add(a, b);
    CHECK(s.values()[0] == 4.0);
    CHECK(s.values()[1] == 6.0);

    Tensor z = scale(Tensor::from({3}, {1, 2, 3}), 0.0);
    for (double x : z.values()) CHECK(x == 0.0);

    Tensor d = sub(b, a);
    CHECK(d.values()[0] == 2.0);
    Tensor m = mul(a, b);
    CHECK(m.values()[0] == 3.0);
    CHECK(m.values()[1] == 8.0);

    CHECK_THROWS_AS(add(a, Tensor::from({3}, {1, 2, 3})), ShapeError);
    try {
        add(a, Tensor::from({3}, {1, 2, 3}));
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2]") != std::string::npos);
        CHECK(msg.find("[3]") != std::string::npos);
    }
}

TEST_CASE("mul gradient matches finite differences") {
    Tensor b = Tensor::from({1}, {5.0});
    auto f = [&](const Tensor& a) { return reduce_sum(mul(a, b)); };
    Tensor a = Tensor::from({1}, {2.0});
    CHECK(grad_check(f, a, 1e-5) < 1e-9);

    // and the analytic value itself: d(a*b)/da = b = 5
    Tensor ap = Tensor::param({1}, {2.0});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(reduce_sum(mul(ap, b)));
    }
    CHECK(ap.grad()[0] == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("matmul") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.values()[i] == m.values()[i]);

    Tensor row = Tensor::from({1, 2}, {1, 0});
    Tensor col = Tensor::from({2, 1}, {0, 1});
    CHECK(matmul(row, col).item() == 0.0);

    CHECK_THROWS_AS(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({3, 1}, {1, 2, 3})),
                    ShapeError);

    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum(matmul(t, b)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum(matmul(a, t)); }, b) < 1e-4);
}

TEST_CASE("batched matmul and transpose") {
    Rng rng(11);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 4, 2}, rng);
    Tensor out = batched_matmul(a, b);
    CHECK(out.shape() == Shape{2, 3, 2});
    // spot-check against per-batch matmul
    for (int bb = 0; bb < 2; ++bb) {
        std::vector<double> av(a.values().begin() + bb * 12, a.values().begin() + (bb + 1) * 12);
        std::vector<double> bv(b.values().begin() + bb * 8, b.values().begin() + (bb + 1) * 8);
        Tensor single = matmul(Tensor::from({3, 4}, av), Tensor::from({4, 2}, bv));
        for (int i = 0; i < 6; ++i)
            CHECK(out.values()[bb * 6 + i] == doctest::Approx(single.values()[i]).epsilon(1e-14));
    }
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum(batched_matmul(t, b)); }, a) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum(batched_matmul(a, t)); }, b) < 1e-4);

    Tensor tr = transpose_last2(a);
    CHECK(tr.shape() == Shape{2, 4, 3});
    CHECK(tr.at({1, 2, 1}) == a.at({1, 1, 2}));
    CHECK(grad_check(
              [&](const Tensor& t) {
                  return reduce_sum(mul(transpose_last2(t), transpose_last2(t)));
              },
              a) < 1e-4);
}

TEST_CASE("conv2d 1x1 identity over channels") {
    Rng rng(3);
    Tensor x = random_tensor({1, 3, 4, 4}, rng);
    // identity channel-mixing kernel
    std::vector<double> wv(9, 0.0);
    for (int c = 0; c < 3; ++c) wv[static_cast<std::size_t>(c) * 3 + c] = 1.0;
    Tensor w = Tensor::from({3, 3, 1, 1}, wv);
    Tensor y = conv2d(x, w, 1, 0);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d all-ones 3x3 on constant field") {
    const double c = 0.7;
    Tensor x = Tensor::full({1, 1, 5, 5}, c);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, w, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 5, 5});
    // interior pixels see the full 3x3 stencil
    for (int i = 1; i < 4; ++i)
        for (int j = 1; j < 4; ++j)
            CHECK(y.at({0, 0, i, j}) == doctest::Approx(9.0 * c).epsilon(1e-14));
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(4.0 * c).epsilon(1e-14));
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng(17);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    auto loss_x = [&](const Tensor& t) { return reduce_sum(conv2d(t, w, b, 1, 1)); };
    auto loss_w = [&](const Tensor& t) { return reduce_sum(conv2d(x, t, b, 1, 1)); };
    auto loss_b = [&](const Tensor& t) { return reduce_sum(conv2d(x, w, t, 1, 1)); };
    CHECK(loss_x(x).item() != 0.0);
    CHECK(grad_check(loss_x, x) < 1e-4);
    CHECK(grad_check(loss_w, w) < 1e-4);
    CHECK(grad_check(loss_b, b) < 1e-4);

    // stride-2 path
    auto loss_s2 = [&](const Tensor& t) { return reduce_sum(conv2d(t, w, b, 2, 1)); };
    CHECK(grad_check(loss_s2, x) < 1e-4);
}

TEST_CASE("conv2d errors") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({3, 2, 5, 5}), 1, 0), ValueError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({3, 4, 3, 3}), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0),
                    ShapeError);
}

TEST_CASE("conv2d 1x1 equals per-position channel matmul") {
    Rng rng(23);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor w = random_tensor({5, 3, 1, 1}, rng);
    Tensor y = conv2d(x, w, 1, 0);
    for (int n = 0; n < 2; ++n)
        for (int h = 0; h < 4; ++h)
            for (int ww = 0; ww < 4; ++ww) {
                // brute-force channel mix at one spatial position
                for (int o = 0; o < 5; ++o) {
                    double acc = 0.0;
                    for (int c = 0; c < 3; ++c)
                        acc += x.at({n, c, h, ww}) * w.at({o, c, 0, 0});
                    CHECK(y.at({n, o, h, ww}) == doctest::Approx(acc).epsilon(1e-13));
                }
            }
}

TEST_CASE("relu") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.values()[0] == 0.0);
    CHECK(y.values()[1] == 0.0);
    CHECK(y.values()[2] == 2.0);

    Tensor neg = Tensor::param({4}, {-1, -2, -3, -4});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(reduce_sum(relu(neg)));
    }
    for (double g : neg.grad()) CHECK(g == 0.0);

    Tensor p = Tensor::param({2}, {3, -3});
    Tape tape2;
    {
        TapeScope scope(tape2);
        backward(reduce_sum(relu(p)));
    }
    CHECK(p.grad()[0] == 1.0);
    CHECK(p.grad()[1] == 0.0);
}

TEST_CASE("global average pool") {
    Tensor c5 = Tensor::full({2, 3, 4, 4}, 5.0);
    Tensor y = global_avg_pool(c5);
    CHECK(y.shape() == Shape{2, 3});
    for (double v : y.values()) CHECK(v == doctest::Approx(5.0).epsilon(1e-14));

    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(x).item() == doctest::Approx(2.5).epsilon(1e-14));

    Tensor p = Tensor::param({1, 2, 2, 2}, std::vector<double>(8, 1.0));
    Tape tape;
    {
        TapeScope scope(tape);
        backward(reduce_sum(global_avg_pool(p)));
    }
    for (double g : p.grad()) CHECK(g == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("softmax") {
    Tensor u = softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(u.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(u.values()[1] == doctest::Approx(0.5).epsilon(1e-12));

    Tensor big = softmax(Tensor::from({2}, {1000, 1000}), 0);
    CHECK(big.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(std::isfinite(big.values()[1]));

    Tensor r = softmax(Tensor::from({2}, {0, std::log(3.0)}), 0);
    CHECK(r.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r.values()[1] == doctest::Approx(0.75).epsilon(1e-12));

    CHECK_THROWS_AS(softmax(u, 0, 0.0), ValueError);
    CHECK_THROWS_AS(softmax(u, 3), ShapeError);

    // sums to one along the reduced axis
    Rng rng(5);
    Tensor x = random_tensor({2, 3, 4, 4}, rng, -30.0, 30.0);
    for (int axis = 0; axis < 4; ++axis) {
        Tensor y = softmax(x, axis, 2.0);
        Tensor sums = reduce_sum(y, {axis});
        for (double s : sums.values()) CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("reduce") {
    CHECK(reduce_sum(Tensor::from({3}, {1, 2, 3})).item() == 6.0);

    Tensor v = Tensor::from({4, 2}, {3, 7, 3, 7, 3, 7, 3, 7});
    Tensor m = reduce_mean(v, {0});
    CHECK(m.shape() == Shape{2});
    CHECK(m.values()[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(m.values()[1] == doctest::Approx(7.0).epsilon(1e-14));

    Tensor p = Tensor::param({2, 3}, {1, 2, 3, 4, 5, 6});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(reduce_sum(p));
    }
    for (double g : p.grad()) CHECK(g == 1.0);

    CHECK_THROWS_AS(reduce_sum(p, {2}), ShapeError);

    Rng rng(9);
    Tensor x = random_tensor({2, 3, 2, 2}, rng);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum(reduce_mean(t, {1, 3})); }, x) <
          1e-4);
}

TEST_CASE("cross entropy") {
    Tensor l = Tensor::from({1, 2}, {0, 0});
    CHECK(cross_entropy(l, {0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor onehot = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
    CHECK(cross_entropy(onehot, {0}).item() < 1e-10);

    // direct formula oracle on random logits
    Rng rng(31);
    Tensor logits = random_tensor({2, 3}, rng, -2.0, 2.0);
    std::vector<int> labels{2, 0};
    double expect = 0.0;
    for (int n = 0; n < 2; ++n) {
        double denom = 0.0;
        for (int c = 0; c < 3; ++c) denom += std::exp(logits.at({n, c}));
        expect += -std::log(std::exp(logits.at({n, labels[static_cast<std::size_t>(n)]})) / denom);
    }
    expect /= 2.0;
    CHECK(cross_entropy(logits, labels).item() == doctest::Approx(expect).epsilon(1e-10));

    CHECK(grad_check([&](const Tensor& t) { return cross_entropy(t, labels); }, logits) < 1e-4);

    CHECK_THROWS_AS(cross_entropy(logits, {5, 0}), ValueError);
    CHECK_THROWS_AS(cross_entropy(logits, {0}), ShapeError);

    // dense variant with ignore label
    Tensor dense = random_tensor({1, 3, 2, 2}, rng);
    std::vector<int> dl{0, 1, 2, -1};
    Tensor loss = cross_entropy(dense, dl, -1);
    CHECK(std::isfinite(loss.item()));
    CHECK(grad_check([&](const Tensor& t) { return cross_entropy(t, dl, -1); }, dense) < 1e-4);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::param({2, 3}, {1, -2, 3, -4, 5, -6});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(reduce_sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);

    // sum(relu(-x)) with x > 0 has zero gradient
    Tensor pos = Tensor::param({3}, {1, 2, 3});
    Tape tape2;
    {
        TapeScope scope(tape2);
        backward(reduce_sum(relu(scale(pos, -1.0))));
    }
    for (double g : pos.grad()) CHECK(g == 0.0);

    CHECK_THROWS_AS(backward(Tensor::from({2}, {1, 2})), ShapeError);
    CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("backward accumulates additively") {
    Tensor x = Tensor::param({3}, {1, 2, 3});
    Tape tape;
    TapeScope scope(tape);
    Tensor y = reduce_sum(mul(x, x));
    backward(y);
    std::vector<double> once(x.grad().begin(), x.grad().end());
    backward(y);
    for (std::size_t i = 0; i < once.size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-14));
}

TEST_CASE("composite chain matches finite differences") {
    Rng rng(101);
    Tensor x = random_tensor({1, 2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b = random_tensor({3}, rng, -0.1, 0.1);
    auto f = [&](const Tensor& t) {
        return reduce_sum(global_avg_pool(relu(conv2d(t, w, b, 1, 1))));
    };
    CHECK(grad_check(f, x) < 1e-4);
    auto fw = [&](const Tensor& t) {
        return reduce_sum(global_avg_pool(relu(conv2d(x, t, b, 1, 1))));
    };
    CHECK(grad_check(fw, w) < 1e-4);
}

TEST_CASE("grad_check reference behaviour") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    CHECK(grad_check([](const Tensor& t) { return reduce_sum(t); }, x) < 1e-9);

    // sum of squares: analytic [2, 4]
    auto sq = [](const Tensor& t) { return reduce_sum(mul(t, t)); };
    CHECK(grad_check(sq, x, 1e-5) < 1e-7);
    Tensor p = Tensor::param({2}, {1.0, 2.0});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(sq(p));
    }
    CHECK(p.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(p.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("gradient suite over all core ops, 3 seeds") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        Rng rng(seed);
        Tensor x = random_tensor({2, 4, 8, 8}, rng);
        Tensor w3 = random_tensor({3, 4, 3, 3}, rng, -0.4, 0.4);
        Tensor w1 = random_tensor({3, 4, 1, 1}, rng, -0.7, 0.7);
        Tensor bias = random_tensor({3}, rng, -0.2, 0.2);
        Tensor other = random_tensor({2, 4, 8, 8}, rng);

        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(add(t, other)); }, x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(sub(t, other)); }, x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(mul(t, other)); }, x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(scale(t, -1.7)); }, x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(conv2d(t, w3, bias, 1, 1)); },
                         x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(conv2d(t, w1, bias, 1, 0)); },
                         x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(relu(t)); }, x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_sum(global_avg_pool(t)); }, x) <
              1e-4);
        CHECK(grad_check(
                  [&](const Tensor& t) { return reduce_sum(mul(softmax(t, 1, 2.0), other)); },
                  x) < 1e-4);
        CHECK(grad_check(
                  [&](const Tensor& t) { return reduce_sum(mul(log_softmax(t, 1, 2.0), other)); },
                  x) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return reduce_mean(t); }, x) < 1e-4);

        Tensor logits = random_tensor({2, 4}, rng, -2.0, 2.0);
        std::vector<int> labels{1, 3};
        CHECK(grad_check([&](const Tensor& t) { return cross_entropy(t, labels); }, logits) <
              1e-4);
    }
}

TEST_CASE("ops are bitwise deterministic") {
    Rng rng(77);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor y1 = conv2d(x, w, b, 1, 1);
    Tensor y2 = conv2d(x, w, b, 1, 1);
    CHECK(std::memcmp(y1.values().data(), y2.values().data(),
                      y1.size() * sizeof(double)) == 0);

    Tensor s1 = softmax(x, 1, 3.0);
    Tensor s2 = softmax(x, 1, 3.0);
    CHECK(std::memcmp(s1.values().data(), s2.values().data(),
                      s1.size() * sizeof(double)) == 0);
}

TEST_CASE("tensors without requires_grad never accumulate") {
    Tensor x = Tensor::param({2}, {1, 2});
    Tensor frozen = Tensor::from({2}, {3, 4});
    Tape tape;
    {
        TapeScope scope(tape);
        backward(reduce_sum(mul(x, frozen)));
    }
    CHECK(x.has_grad());
    CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("reshape keeps flat order and gradients") {
    Rng rng(13);
    Tensor x = random_tensor({2, 6}, rng);
    Tensor r = reshape(x, {3, 4});
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.values()[i] == x.values()[i]);
    CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
    CHECK(grad_check(
              [](const Tensor& t) { return reduce_sum(mul(reshape(t, {12}), reshape(t, {12}))); },
              x) < 1e-4);
}
