#include "kdkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "kdkit/rng.hpp"

namespace kd {

namespace {

constexpr int kSquare = 0;
constexpr int kDisc = 1;
constexpr int kPlus = 2;
constexpr int kStripes = 3;

struct Canvas {
    int size;
    std::vector<double> pix;   // row-major
    std::vector<int> owner;    // -1 background, otherwise shape tag

    explicit Canvas(int s, double bg) : size(s), pix(static_cast<std::size_t>(s) * s, bg),
                                        owner(static_cast<std::size_t>(s) * s, -1) {}

    void set(int y, int x, double v, int tag) {
        pix[static_cast<std::size_t>(y) * size + x] = v;
        owner[static_cast<std::size_t>(y) * size + x] = tag;
    }
};

void draw_square(Canvas& c, Rng& rng, double fg, int tag) {
    const int side = rng.uniform_int(5, std::min(9, c.size / 2 + 1));
    const int y0 = rng.uniform_int(0, c.size - side);
    const int x0 = rng.uniform_int(0, c.size - side);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) c.set(y, x, fg, tag);
}

void draw_disc(Canvas& c, Rng& rng, double fg, int tag) {
    const double r = rng.uniform(2.5, std::min(4.5, c.size / 4.0));
    const double cy = rng.uniform(r, c.size - 1 - r);
    const double cx = rng.uniform(r, c.size - 1 - r);
    for (int y = 0; y < c.size; ++y)
        for (int x = 0; x < c.size; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) c.set(y, x, fg, tag);
}

void draw_plus(Canvas& c, Rng& rng, double fg, int tag) {
    const int arm = rng.uniform_int(3, std::min(6, c.size / 2 - 2));
    const int cy = rng.uniform_int(arm, c.size - 1 - arm);
    const int cx = rng.uniform_int(arm, c.size - 1 - arm);
    for (int d = -arm; d <= arm; ++d)
        for (int t = -1; t <= 1; ++t) {
            c.set(cy + t, cx + d, fg, tag);  // horizontal bar, 3 px thick
            c.set(cy + d, cx + t, fg, tag);  // vertical bar
        }
}

void draw_stripes(Canvas& c, Rng& rng, double fg, int tag) {
    const int band = rng.uniform_int(2, 3);
    const int phase = rng.uniform_int(0, 2 * band - 1);
    for (int y = 0; y < c.size; ++y)
        if (((y + phase) / band) % 2 == 0)
            for (int x = 0; x < c.size; ++x) c.set(y, x, fg, tag);
}

// Values round-trip the f32 file format exactly when each pixel is already
// representable in single precision.
double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor finish_image(Canvas& c, Rng& rng, double noise_std) {
    std::vector<double> v(c.pix.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double p = c.pix[i];
        if (noise_std > 0.0) p += noise_std * rng.normal();
        v[i] = quantize(std::clamp(p, 0.0, 1.0));
    }
    return Tensor::from({1, c.size, c.size}, std::move(v));
}

SyntheticSample make_classify_sample(int image_size, double noise_std, Rng rng) {
    const double bg = rng.uniform(0.05, 0.2);
    const double fg = rng.uniform(0.75, 0.95);
    const int label = rng.uniform_int(0, 3);
    Canvas canvas(image_size, bg);
    switch (label) {
        case kSquare: draw_square(canvas, rng, fg, 1); break;
        case kDisc: draw_disc(canvas, rng, fg, 1); break;
        case kPlus: draw_plus(canvas, rng, fg, 1); break;
        case kStripes: draw_stripes(canvas, rng, fg, 1); break;
    }
    SyntheticSample s;
    s.label = label;
    s.image = finish_image(canvas, rng, noise_std);
    return s;
}

SyntheticSample make_segment_sample(int image_size, double noise_std, Rng rng) {
    const double bg = rng.uniform(0.05, 0.2);
    const double fg = rng.uniform(0.75, 0.95);
    Canvas canvas(image_size, bg);
    // square first, then a disc that does not touch it
    draw_square(canvas, rng, fg, 1);
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
        Canvas probe = canvas;
        draw_disc(probe, rng, fg, 2);
        bool overlap = false;
        for (std::size_t i = 0; i < probe.owner.size(); ++i)
            if (probe.owner[i] == 2 && canvas.owner[i] == 1) {
                overlap = true;
                break;
            }
        if (!overlap) {
            canvas = probe;
            placed = true;
        }
    }
    if (!placed) {
        // fall back to a fixed small disc in the first free corner
        const double r = 2.0;
        for (int corner = 0; corner < 4 && !placed; ++corner) {
            const double cy = corner < 2 ? r : image_size - 1 - r;
            const double cx = corner % 2 == 0 ? r : image_size - 1 - r;
            bool overlap = false;
            for (int y = 0; y < image_size; ++y)
                for (int x = 0; x < image_size; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r &&
                        canvas.owner[static_cast<std::size_t>(y) * image_size + x] == 1)
                        overlap = true;
            if (overlap) continue;
            for (int y = 0; y < image_size; ++y)
                for (int x = 0; x < image_size; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                        canvas.set(y, x, fg, 2);
            placed = true;
        }
    }
    SyntheticSample s;
    s.mask.assign(canvas.owner.size(), 0);
    for (std::size_t i = 0; i < canvas.owner.size(); ++i)
        s.mask[i] = canvas.owner[i] < 0 ? 0 : canvas.owner[i];
    s.image = finish_image(canvas, rng, noise_std);
    return s;
}

std::vector<SyntheticSample> gen_split(const DatasetSpec& spec, int count, Rng stream) {
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng sample_rng = stream.fork(static_cast<std::uint64_t>(i));
        out.push_back(spec.task == Task::classify
                          ? make_classify_sample(spec.image_size, spec.noise_std, sample_rng)
                          : make_segment_sample(spec.image_size, spec.noise_std, sample_rng));
    }
    return out;
}

}  // namespace

std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> gen_dataset(
    const DatasetSpec& spec) {
    if (spec.image_size < 8) throw ValueError("dataset: image_size must be >= 8");
    if (spec.num_train < 1 || spec.num_val < 1)
        throw ValueError("dataset: split sizes must be positive");
    if (spec.noise_std < 0.0) throw ValueError("dataset: noise_std must be >= 0");
    Rng root(spec.seed);
    return {gen_split(spec, spec.num_train, root.fork(0x7261696e)),   // train stream
            gen_split(spec, spec.num_val, root.fork(0x76616c))};      // val stream
}

std::vector<std::vector<int>> batches(std::size_t count, int batch_size, int epoch,
                                      std::uint64_t seed) {
    if (count == 0) throw ValueError("batches: empty dataset");
    if (batch_size < 1) throw ValueError("batches: batch_size must be >= 1");
    std::vector<int> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = static_cast<int>(i);
    Rng rng = Rng(seed).fork(0xe70c000000ull + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = count; i-- > 1;)
        std::swap(order[i], order[rng.below(i + 1)]);
    std::vector<std::vector<int>> out;
    for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(count, start + static_cast<std::size_t>(batch_size));
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

Tensor stack_images(const std::vector<SyntheticSample>& set, const std::vector<int>& indices) {
    if (indices.empty()) throw ValueError("stack_images: empty batch");
    const Tensor& first = set[static_cast<std::size_t>(indices[0])].image;
    const int h = first.extent(1), w = first.extent(2);
    std::vector<double> v;
    v.reserve(indices.size() * first.size());
    for (int idx : indices) {
        const auto vals = set[static_cast<std::size_t>(idx)].image.values();
        v.insert(v.end(), vals.begin(), vals.end());
    }
    return Tensor::from({static_cast<int>(indices.size()), 1, h, w}, std::move(v));
}

std::vector<int> stack_labels(const std::vector<SyntheticSample>& set,
                              const std::vector<int>& indices, Task task) {
    std::vector<int> out;
    for (int idx : indices) {
        const SyntheticSample& s = set[static_cast<std::size_t>(idx)];
        if (task == Task::classify)
            out.push_back(s.label);
        else
            out.insert(out.end(), s.mask.begin(), s.mask.end());
    }
    return out;
}

// ---- file format ----------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

float get_f32(std::istream& is) {
    const std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void save_dataset(const std::string& path, Task task, int image_size,
                  const std::vector<SyntheticSample>& set) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("save_dataset: cannot open " + path);
    os.write("SDK1", 4);
    put_u32(os, task == Task::classify ? 0u : 1u);
    put_u32(os, static_cast<std::uint32_t>(set.size()));
    put_u32(os, static_cast<std::uint32_t>(image_size));
    for (const SyntheticSample& s : set) {
        for (double v : s.image.values()) put_f32(os, static_cast<float>(v));
        if (task == Task::classify) {
            put_u32(os, static_cast<std::uint32_t>(s.label));
        } else {
            for (int m : s.mask) put_u32(os, static_cast<std::uint32_t>(m));
        }
    }
    if (!os) throw ValueError("save_dataset: write failed for " + path);
}

std::vector<SyntheticSample> load_dataset(const std::string& path, Task* task_out,
                                          int* image_size_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("load_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SDK1", 4) != 0)
        throw ValueError("load_dataset: bad magic in " + path);
    const std::uint32_t task_id = get_u32(is);
    if (task_id > 1) throw ValueError("load_dataset: unknown task id");
    const Task task = task_id == 0 ? Task::classify : Task::segment;
    const std::uint32_t count = get_u32(is);
    const int size = static_cast<int>(get_u32(is));
    if (size < 1) throw ValueError("load_dataset: bad image size");

    std::vector<SyntheticSample> out;
    out.reserve(count);
    const std::size_t pixels = static_cast<std::size_t>(size) * size;
    for (std::uint32_t i = 0; i < count; ++i) {
        SyntheticSample s;
        std::vector<double> v(pixels);
        for (double& p : v) p = static_cast<double>(get_f32(is));
        s.image = Tensor::from({1, size, size}, std::move(v));
        if (task == Task::classify) {
            s.label = static_cast<int>(get_u32(is));
        } else {
            s.mask.resize(pixels);
            for (int& m : s.mask) m = static_cast<int>(get_u32(is));
        }
        if (!is) throw ValueError("load_dataset: truncated file " + path);
        out.push_back(std::move(s));
    }
    if (task_out) *task_out = task;
    if (image_size_out) *image_size_out = size;
    return out;
}

}  // namespace kd
