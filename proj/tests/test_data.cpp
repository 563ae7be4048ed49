#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <vector>

#include "kdkit/data.hpp"

using namespace kd;

namespace {

std::uint64_t image_hash(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : t.values()) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, 8);
        h = (h ^ bits) * 1099511628211ull;
    }
    return h;
}

}  // namespace

TEST_CASE("generation is deterministic") {
    DatasetSpec spec;
    spec.num_train = 32;
    spec.num_val = 16;
    spec.seed = 5;
    auto [t1, v1] = gen_dataset(spec);
    auto [t2, v2] = gen_dataset(spec);
    REQUIRE(t1.size() == t2.size());
    for (std::size_t i = 0; i < t1.size(); ++i) {
        CHECK(t1[i].label == t2[i].label);
        for (std::size_t j = 0; j < t1[i].image.size(); ++j)
            CHECK(t1[i].image.values()[j] == t2[i].image.values()[j]);
    }
    CHECK(image_hash(v1[0].image) == image_hash(v2[0].image));
}

TEST_CASE("noise-free squares have exactly two distinct values") {
    DatasetSpec spec;
    spec.noise_std = 0.0;
    spec.num_train = 64;
    spec.num_val = 1;
    spec.seed = 11;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    bool seen_square = false;
    for (const auto& s : train) {
        if (s.label != 0) continue;
        seen_square = true;
        std::set<double> distinct(s.image.values().begin(), s.image.values().end());
        CHECK(distinct.size() == 2);
    }
    CHECK(seen_square);
}

TEST_CASE("image values stay in [0,1]") {
    DatasetSpec spec;
    spec.noise_std = 0.4;
    spec.num_train = 32;
    spec.num_val = 8;
    spec.seed = 3;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    for (const auto& s : train)
        for (double v : s.image.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
}

TEST_CASE("class histogram near uniform over 4000 samples") {
    DatasetSpec spec;
    spec.num_train = 4000;
    spec.num_val = 1;
    spec.seed = 17;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    int hist[4] = {0, 0, 0, 0};
    for (const auto& s : train) ++hist[s.label];
    for (int c = 0; c < 4; ++c) {
        CHECK(hist[c] > 900);   // 1000 +- 10%
        CHECK(hist[c] < 1100);
    }
}

TEST_CASE("segment samples carry both shape classes") {
    DatasetSpec spec;
    spec.task = Task::segment;
    spec.num_train = 64;
    spec.num_val = 1;
    spec.seed = 23;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    for (const auto& s : train) {
        REQUIRE(s.mask.size() == 256);
        bool has1 = false, has2 = false;
        for (int m : s.mask) {
            CHECK(m >= 0);
            CHECK(m <= 2);
            has1 |= m == 1;
            has2 |= m == 2;
        }
        CHECK(has1);
        CHECK(has2);
    }
}

TEST_CASE("train and val never overlap") {
    DatasetSpec spec;
    spec.num_train = 200;
    spec.num_val = 200;
    spec.seed = 29;
    auto [train, val] = gen_dataset(spec);
    std::set<std::uint64_t> train_hashes;
    for (const auto& s : train) train_hashes.insert(image_hash(s.image));
    for (const auto& s : val) CHECK(train_hashes.count(image_hash(s.image)) == 0);
}

TEST_CASE("batches") {
    CHECK_THROWS_AS(batches(0, 4, 0, 1), ValueError);

    auto single = batches(10, 10, 0, 1);
    REQUIRE(single.size() == 1);
    CHECK(single[0].size() == 10);

    auto a = batches(33, 8, 2, 9);
    auto b = batches(33, 8, 2, 9);
    REQUIRE(a.size() == b.size());
    CHECK(a.size() == 5);            // last partial batch kept
    CHECK(a.back().size() == 1);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) CHECK(a[i][j] == b[i][j]);

    // union over one epoch is exactly the index set
    std::set<int> seen;
    for (const auto& batch : a)
        for (int idx : batch) CHECK(seen.insert(idx).second);
    CHECK(seen.size() == 33);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 32);

    auto later = batches(33, 8, 3, 9);
    bool differs = false;
    for (std::size_t j = 0; j < a[0].size(); ++j) differs |= a[0][j] != later[0][j];
    CHECK(differs);
}

TEST_CASE("stacking") {
    DatasetSpec spec;
    spec.task = Task::segment;
    spec.num_train = 4;
    spec.num_val = 1;
    spec.seed = 31;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    Tensor x = stack_images(train, {2, 0});
    CHECK(x.shape() == Shape{2, 1, 16, 16});
    CHECK(x.at({0, 0, 3, 3}) == train[2].image.at({0, 3, 3}));
    auto labels = stack_labels(train, {2, 0}, Task::segment);
    CHECK(labels.size() == 512);
    CHECK(labels[0] == train[2].mask[0]);
}

TEST_CASE("dataset file round trip is bit exact") {
    DatasetSpec spec;
    spec.num_train = 12;
    spec.num_val = 1;
    spec.seed = 37;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    const std::string path = "test_data_roundtrip.bin";
    save_dataset(path, Task::classify, 16, train);
    Task task;
    int size;
    auto loaded = load_dataset(path, &task, &size);
    CHECK(task == Task::classify);
    CHECK(size == 16);
    REQUIRE(loaded.size() == train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        CHECK(loaded[i].label == train[i].label);
        for (std::size_t j = 0; j < train[i].image.size(); ++j)
            CHECK(loaded[i].image.values()[j] == train[i].image.values()[j]);
    }

    // second save emits identical bytes
    const std::string path2 = "test_data_roundtrip2.bin";
    save_dataset(path2, Task::classify, 16, loaded);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("segment dataset round trip keeps masks") {
    DatasetSpec spec;
    spec.task = Task::segment;
    spec.num_train = 6;
    spec.num_val = 1;
    spec.seed = 41;
    auto [train, val] = gen_dataset(spec);
    (void)val;
    const std::string path = "test_data_seg.bin";
    save_dataset(path, Task::segment, 16, train);
    auto loaded = load_dataset(path);
    REQUIRE(loaded.size() == train.size());
    for (std::size_t i = 0; i < train.size(); ++i) CHECK(loaded[i].mask == train[i].mask);
    std::remove(path.c_str());
}

TEST_CASE("bad files rejected") {
    const std::string path = "test_data_bad.bin";
    std::ofstream os(path, std::ios::binary);
    os.write("NOPE", 4);
    os.close();
    CHECK_THROWS_AS(load_dataset(path), ValueError);
    CHECK_THROWS_AS(load_dataset("does_not_exist.bin"), ValueError);
    std::remove(path.c_str());
}
