#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kdkit/task.hpp"
#include "kdkit/tensor.hpp"

namespace kd {

// One generated sample. `mask` is empty for classification; for
// segmentation it holds H*W class ids row-major and `label` is unused.
struct SyntheticSample {
    Tensor image;  // [1, H, W], values in [0, 1]
    int label = 0;
    std::vector<int> mask;
};

struct DatasetSpec {
    Task task = Task::classify;
    int image_size = 16;
    int num_train = 512;
    int num_val = 256;
    double noise_std = 0.1;
    std::uint64_t seed = 0;

    int num_classes() const { return task == Task::classify ? 4 : 3; }
};

// classify: one of {square, disc, plus, stripes} at a random position and
// size over a flat background; segment: one square and one disjoint disc,
// mask classes {0 background, 1 square, 2 disc}. Train and val come from
// disjoint random streams.
std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> gen_dataset(
    const DatasetSpec& spec);

// Per-epoch shuffled index batches; the last partial batch is kept.
std::vector<std::vector<int>> batches(std::size_t count, int batch_size, int epoch,
                                      std::uint64_t seed);

Tensor stack_images(const std::vector<SyntheticSample>& set, const std::vector<int>& indices);
// classify: one id per sample; segment: H*W ids per sample, row-major
std::vector<int> stack_labels(const std::vector<SyntheticSample>& set,
                              const std::vector<int>& indices, Task task);

// Flat binary dataset file: 16-byte header (magic "SDK1", u32 task id,
// u32 count, u32 image_size), then per sample the image as f32 LE followed
// by the label(s) as i32 LE. Bit-exact round-trip.
void save_dataset(const std::string& path, Task task, int image_size,
                  const std::vector<SyntheticSample>& set);
std::vector<SyntheticSample> load_dataset(const std::string& path, Task* task_out = nullptr,
                                          int* image_size_out = nullptr);

}  // namespace kd
