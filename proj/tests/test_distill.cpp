#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "kdkit/distill.hpp"
#include "kdkit/rng.hpp"

using namespace kd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("feat_l2_loss basics") {
    Rng rng(1);
    Tensor f = random_tensor({2, 3, 4, 4}, rng);
    CHECK(feat_l2_loss(f, f).item() == 0.0);

    // all-ones difference on 2x1x2x2: sum 8, divided by N=2
    Tensor t = Tensor::zeros({2, 1, 2, 2});
    Tensor s = Tensor::full({2, 1, 2, 2}, 1.0);
    CHECK(feat_l2_loss(s, t).item() == doctest::Approx(4.0).epsilon(1e-14));

    CHECK_THROWS_AS(feat_l2_loss(s, Tensor::zeros({2, 1, 2, 3})), ShapeError);
    Tensor trainable = Tensor::zeros({2, 1, 2, 2});
    trainable.set_requires_grad(true);
    CHECK_THROWS_AS(feat_l2_loss(s, trainable), ContractError);
}

TEST_CASE("feat_l2_loss matches explicit loop oracle") {
    Rng rng(2);
    Tensor s = random_tensor({3, 2, 4, 4}, rng);
    Tensor t = random_tensor({3, 2, 4, 4}, rng);
    double expect = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double d = s.values()[i] - t.values()[i];
        expect += d * d;
    }
    expect /= 3.0;
    CHECK(feat_l2_loss(s, t).item() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("feat_l2_loss strictly positive away from the target") {
    Rng rng(3);
    Tensor t = random_tensor({1, 2, 2, 2}, rng);
    Tensor s = t.clone();
    s.values()[5] += 1e-3;
    CHECK(feat_l2_loss(s, t).item() > 0.0);
}

TEST_CASE("feat_kl_loss identities") {
    Rng rng(4);
    Tensor f = random_tensor({2, 3, 2, 2}, rng);
    CHECK(std::abs(feat_kl_loss(f, f, 2.0).item()) < 1e-12);

    // softmax shift invariance: uniform teacher and uniform student at
    // different constants both give uniform distributions
    Tensor tu = Tensor::full({2, 2, 2, 2}, 0.3);
    Tensor su = Tensor::full({2, 2, 2, 2}, -1.7);
    CHECK(std::abs(feat_kl_loss(su, tu, 1.0).item()) < 1e-12);

    CHECK_THROWS_AS(feat_kl_loss(f, f, 0.0), ValueError);
    CHECK_THROWS_AS(feat_kl_loss(f, random_tensor({2, 3, 2, 3}, rng), 1.0), ShapeError);
}

TEST_CASE("feat_kl_loss two-bin closed form") {
    Tensor t = Tensor::from({1, 2, 1, 1}, {0.0, std::log(3.0)});
    Tensor s = Tensor::from({1, 2, 1, 1}, {0.0, 0.0});
    // teacher [1/4, 3/4], student [1/2, 1/2]
    const double expect = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    CHECK(feat_kl_loss(s, t, 1.0).item() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.1308).epsilon(1e-3));
}

TEST_CASE("feat_cwd_loss identities") {
    Rng rng(5);
    Tensor f = random_tensor({2, 3, 2, 2}, rng);
    CHECK(std::abs(feat_cwd_loss(f, f, 4.0).item()) < 1e-12);

    // adding a per-channel constant to the student leaves the spatial
    // softmax unchanged
    Tensor shifted = f.clone();
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int h = 0; h < 2; ++h)
                for (int w = 0; w < 2; ++w)
                    shifted.at({n, c, h, w}) += 0.37 * (c + 1) - 0.11 * n;
    CHECK(std::abs(feat_cwd_loss(shifted, f, 4.0).item()) < 1e-10);
}

TEST_CASE("feat_cwd_loss two-bin closed form") {
    Tensor t = Tensor::from({1, 1, 1, 2}, {0.0, std::log(3.0)});
    Tensor s = Tensor::from({1, 1, 1, 2}, {0.0, 0.0});
    const double expect = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    CHECK(feat_cwd_loss(s, t, 1.0).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("feature losses are non-negative") {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor s = random_tensor({2, 3, 3, 3}, rng, -3.0, 3.0);
        Tensor t = random_tensor({2, 3, 3, 3}, rng, -3.0, 3.0);
        CHECK(feat_l2_loss(s, t).item() >= 0.0);
        CHECK(feat_kl_loss(s, t, 2.5).item() >= -1e-12);
        CHECK(feat_cwd_loss(s, t, 2.5).item() >= -1e-12);
    }
}

TEST_CASE("feature losses pass grad_check w.r.t. the student side") {
    Rng rng(7);
    Tensor t = random_tensor({2, 3, 3, 3}, rng);
    Tensor s = random_tensor({2, 3, 3, 3}, rng);
    CHECK(grad_check([&](const Tensor& x) { return feat_l2_loss(x, t); }, s) < 1e-4);
    CHECK(grad_check([&](const Tensor& x) { return feat_kl_loss(x, t, 2.0); }, s) < 1e-4);
    CHECK(grad_check([&](const Tensor& x) { return feat_cwd_loss(x, t, 2.0); }, s) < 1e-4);
}

TEST_CASE("total_loss") {
    Tensor task = Tensor::scalar(1.0);
    Tensor feat = Tensor::scalar(2.0);

    LossBreakdown zero = total_loss(task, feat, 0.0);
    CHECK(zero.total.item() == task.item());

    LossBreakdown paper = total_loss(task, feat, 7e-5);
    CHECK(paper.total.item() == doctest::Approx(1.00014).epsilon(1e-12));
    CHECK(std::abs(paper.total.item() - (paper.task_loss.item() + paper.alpha * paper.feat_loss.item())) <
          1e-12);
}

TEST_CASE("total_loss gradient decomposes linearly in alpha") {
    Rng rng(8);
    Tensor t = random_tensor({1, 2, 2, 2}, rng);
    auto run = [&](double alpha) {
        Tensor x = Tensor::param({1, 2, 2, 2},
                                 {t.values().begin(), t.values().end()});
        for (double& v : x.values()) v += 0.25;
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor task = reduce_mean(mul(x, x));
            Tensor feat = feat_l2_loss(x, t);
            backward(total_loss(task, feat, alpha).total);
        }
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    auto g0 = run(0.0);
    auto g1 = run(0.5);
    auto g2 = run(1.0);
    for (std::size_t i = 0; i < g0.size(); ++i) {
        const double feat_part1 = g1[i] - g0[i];
        const double feat_part2 = g2[i] - g0[i];
        CHECK(feat_part2 == doctest::Approx(2.0 * feat_part1).epsilon(1e-9));
    }
}

TEST_CASE("teacher_forward_frozen") {
    ModelSpec spec{Task::classify, {4, 8}, 4, -1, 13};
    Model teacher = Model::build(spec);
    Rng rng(9);
    Tensor x = random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);

    CHECK_THROWS_AS(teacher_forward_frozen(teacher, x), ContractError);

    teacher.set_trainable(false);
    Tensor tap = teacher_forward_frozen(teacher, x);
    Tensor ref = teacher.forward_with_tap(x).second;
    for (std::size_t i = 0; i < tap.size(); ++i) CHECK(tap.values()[i] == ref.values()[i]);
    CHECK_FALSE(tap.requires_grad());

    // backward through a distillation loss leaves teacher grads absent
    Tensor student_feat = Tensor::param({2, 8, 2, 2},
                                        std::vector<double>(64, 0.5));
    Tape tape;
    {
        TapeScope scope(tape);
        backward(feat_l2_loss(student_feat, tap));
    }
    CHECK(student_feat.has_grad());
    for (const auto& [name, p] : teacher.named_parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("loss and side names") {
    CHECK(loss_from_string("cwd") == LossKind::cwd);
    CHECK(loss_from_string("huber") == std::nullopt);
    CHECK(side_from_string("both_sides") == TransformSide::both_sides);
    CHECK(std::string(to_string(TransformSide::student_only)) == "student_only");
}
