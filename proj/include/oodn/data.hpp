#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "oodn/errors.hpp"
#include "oodn/rng.hpp"

namespace oodn {

// ---------------------------------------------------------------------------
// IDX container (MNIST family)
//
//   images: magic 0x00000803 | count | rows | cols | u8 pixels[count*rows*cols]
//   labels: magic 0x00000801 | count | u8 labels[count]
//
// All header words are big-endian u32.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
    std::uint32_t count = 0;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<std::uint8_t> pixels;

    bool operator==(const IdxImages&) const = default;
};

struct IdxLabels {
    std::vector<std::uint8_t> labels;

    bool operator==(const IdxLabels&) const = default;
};

using IdxContent = std::variant<IdxImages, IdxLabels>;

namespace detail {

inline std::uint32_t read_be_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (bytes.size() < offset + 4) {
        throw TruncatedPayload("header ends at byte " + std::to_string(bytes.size()));
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

} // namespace detail

inline IdxContent parse_idx(std::span<const std::uint8_t> bytes) {
    const std::uint32_t magic = detail::read_be_u32(bytes, 0);
    if (magic == kIdxImageMagic) {
        IdxImages img;
        img.count = detail::read_be_u32(bytes, 4);
        img.rows = detail::read_be_u32(bytes, 8);
        img.cols = detail::read_be_u32(bytes, 12);
        const std::uint64_t expected =
            std::uint64_t{img.count} * std::uint64_t{img.rows} * std::uint64_t{img.cols};
        if (bytes.size() - 16 != expected) {
            throw TruncatedPayload("image payload has " + std::to_string(bytes.size() - 16) +
                                   " bytes, dims require " + std::to_string(expected));
        }
        img.pixels.assign(bytes.begin() + 16, bytes.end());
        return img;
    }
    if (magic == kIdxLabelMagic) {
        const std::uint32_t count = detail::read_be_u32(bytes, 4);
        if (bytes.size() - 8 != count) {
            throw TruncatedPayload("label payload has " + std::to_string(bytes.size() - 8) +
                                   " bytes, header declares " + std::to_string(count));
        }
        return IdxLabels{std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end())};
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    throw UnsupportedMagic(buf);
}

inline std::vector<std::uint8_t> serialize_idx(const IdxContent& content) {
    std::vector<std::uint8_t> out;
    if (const auto* img = std::get_if<IdxImages>(&content)) {
        out.reserve(16 + img->pixels.size());
        detail::write_be_u32(out, kIdxImageMagic);
        detail::write_be_u32(out, img->count);
        detail::write_be_u32(out, img->rows);
        detail::write_be_u32(out, img->cols);
        out.insert(out.end(), img->pixels.begin(), img->pixels.end());
    } else {
        const auto& lab = std::get<IdxLabels>(content);
        out.reserve(8 + lab.labels.size());
        detail::write_be_u32(out, kIdxLabelMagic);
        detail::write_be_u32(out, static_cast<std::uint32_t>(lab.labels.size()));
        out.insert(out.end(), lab.labels.begin(), lab.labels.end());
    }
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open file '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write file '" + path.string() + "'");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class DatasetRole { MainTrain, MainTest, Anomaly };

/// Images are stored row-major and contiguous, already scaled to [0, 1].
struct LabeledDataset {
    int rows = 0;
    int cols = 0;
    std::vector<float> pixels;
    std::vector<int> labels;
    /// original label -> dense label
    std::map<int, int> class_map;
    DatasetRole role = DatasetRole::MainTrain;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return static_cast<std::size_t>(rows) * cols; }

    std::span<const float> image(std::size_t i) const {
        return {pixels.data() + i * image_size(), image_size()};
    }

    int num_classes() const {
        int n = 0;
        for (const auto& [orig, dense] : class_map) n = std::max(n, dense + 1);
        return n;
    }

    bool operator==(const LabeledDataset&) const = default;
};

inline std::vector<float> normalize(std::span<const std::uint8_t> raw) {
    std::vector<float> out(raw.size());
    std::transform(raw.begin(), raw.end(), out.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    return out;
}

/// Builds a dataset from parsed IDX content; class_map is the identity over the
/// observed labels.
inline LabeledDataset make_dataset(const IdxImages& images, const IdxLabels& labels, DatasetRole role) {
    if (images.count != labels.labels.size()) {
        throw ShapeMismatch("image count " + std::to_string(images.count) + " vs label count " +
                            std::to_string(labels.labels.size()));
    }
    LabeledDataset ds;
    ds.rows = static_cast<int>(images.rows);
    ds.cols = static_cast<int>(images.cols);
    ds.pixels = normalize(images.pixels);
    ds.labels.assign(labels.labels.begin(), labels.labels.end());
    for (int y : ds.labels) ds.class_map[y] = y;
    ds.role = role;
    return ds;
}

inline LabeledDataset load_idx_dataset(const std::filesystem::path& images_path,
                                       const std::filesystem::path& labels_path, DatasetRole role) {
    for (const auto& p : {images_path, labels_path}) {
        if (!std::filesystem::exists(p)) {
            throw ConfigError("dataset file not found: '" + p.string() + "'");
        }
    }
    const auto img_bytes = read_file_bytes(images_path);
    const auto lab_bytes = read_file_bytes(labels_path);
    auto img = parse_idx(img_bytes);
    auto lab = parse_idx(lab_bytes);
    if (!std::holds_alternative<IdxImages>(img)) {
        throw UnsupportedMagic("'" + images_path.string() + "' is not an image file");
    }
    if (!std::holds_alternative<IdxLabels>(lab)) {
        throw UnsupportedMagic("'" + labels_path.string() + "' is not a label file");
    }
    return make_dataset(std::get<IdxImages>(img), std::get<IdxLabels>(lab), role);
}

/// Keeps samples whose *original* label is in `keep`. With `relabel` the kept
/// classes are renumbered densely in ascending original order; without it the
/// current labels are retained and the class map is restricted to `keep`.
inline LabeledDataset split_classes(const LabeledDataset& ds, const std::set<int>& keep, bool relabel) {
    if (keep.empty()) {
        throw EmptySplit("keep set is empty");
    }
    std::map<int, int> new_map;  // original -> new dense
    std::map<int, int> current_to_new;
    int next = 0;
    for (int orig : keep) {
        const auto it = ds.class_map.find(orig);
        if (it == ds.class_map.end()) {
            throw EmptySplit("class " + std::to_string(orig) + " is not present in the dataset");
        }
        const int dense = relabel ? next++ : it->second;
        new_map[orig] = dense;
        current_to_new[it->second] = dense;
    }

    LabeledDataset out;
    out.rows = ds.rows;
    out.cols = ds.cols;
    out.role = ds.role;
    out.class_map = std::move(new_map);
    const std::size_t isz = ds.image_size();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto kept = current_to_new.find(ds.labels[i]);
        if (kept == current_to_new.end()) continue;
        out.labels.push_back(kept->second);
        out.pixels.insert(out.pixels.end(), ds.pixels.begin() + i * isz, ds.pixels.begin() + (i + 1) * isz);
    }
    if (out.labels.empty()) {
        throw EmptySplit("no samples match the keep set");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct MiniBatch {
    int rows = 0;
    int cols = 0;
    std::vector<std::size_t> indices;
    std::vector<float> images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return static_cast<std::size_t>(rows) * cols; }
    std::span<const float> image(std::size_t i) const {
        return {images.data() + i * image_size(), image_size()};
    }
};

using BatchPlan = std::vector<std::vector<std::size_t>>;

/// Partitions a (possibly shuffled) permutation of [0, count) into batches of
/// size m; the last batch may be short.
inline BatchPlan plan_batches(std::size_t count, std::size_t m, std::uint64_t seed, bool shuffle) {
    if (m == 0) {
        throw ConfigError("batch size must be >= 1");
    }
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    if (shuffle) {
        Rng rng(seed);
        rng.shuffle(order);
    }
    BatchPlan plan;
    for (std::size_t start = 0; start < count; start += m) {
        const std::size_t end = std::min(count, start + m);
        plan.emplace_back(order.begin() + start, order.begin() + end);
    }
    return plan;
}

inline MiniBatch gather(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    MiniBatch b;
    b.rows = ds.rows;
    b.cols = ds.cols;
    b.indices.assign(indices.begin(), indices.end());
    b.images.reserve(indices.size() * ds.image_size());
    b.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        const auto img = ds.image(i);
        b.images.insert(b.images.end(), img.begin(), img.end());
        b.labels.push_back(ds.labels[i]);
    }
    return b;
}

inline std::vector<MiniBatch> make_batches(const LabeledDataset& ds, std::size_t m, std::uint64_t seed,
                                           bool shuffle) {
    std::vector<MiniBatch> out;
    for (const auto& idx : plan_batches(ds.size(), m, seed, shuffle)) {
        out.push_back(gather(ds, idx));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Each class is a bright Gaussian blob whose centre sits on a circle of
/// radius `separation` pixels around the grid centre, at angle 2*pi*k/n.
/// Samples jitter the blob position and add pixel noise; values are clamped
/// to [0, 1]. Labels cycle through the classes.
inline LabeledDataset synth_blobs(int n_classes, int per_class, int side, double separation,
                                  std::uint64_t seed) {
    if (n_classes < 2 || per_class < 1 || side < 1) {
        throw ConfigError("synth_blobs needs n_classes >= 2, per_class >= 1, side >= 1");
    }
    Rng rng(seed);
    LabeledDataset ds;
    ds.rows = side;
    ds.cols = side;
    ds.role = DatasetRole::MainTrain;
    const double mid = (side - 1) / 2.0;
    const double sigma = std::max(1.0, side / 10.0);
    const std::size_t total = static_cast<std::size_t>(n_classes) * per_class;
    ds.pixels.resize(total * side * side);
    ds.labels.resize(total);
    for (std::size_t s = 0; s < total; ++s) {
        const int k = static_cast<int>(s % n_classes);
        const double angle = 2.0 * std::numbers::pi * k / n_classes;
        const double cy = mid + separation * std::sin(angle) + 0.5 * rng.normal();
        const double cx = mid + separation * std::cos(angle) + 0.5 * rng.normal();
        float* px = ds.pixels.data() + s * side * side;
        for (int r = 0; r < side; ++r) {
            for (int c = 0; c < side; ++c) {
                const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
                const double v = std::exp(-d2 / (2.0 * sigma * sigma)) + 0.05 * rng.normal();
                px[r * side + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
        ds.labels[s] = k;
    }
    for (int k = 0; k < n_classes; ++k) ds.class_map[k] = k;
    return ds;
}

/// Concatenates two datasets with identical geometry; class maps are merged.
inline LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw ShapeMismatch("cannot concatenate datasets of different image shapes");
    }
    LabeledDataset out = a;
    out.pixels.insert(out.pixels.end(), b.pixels.begin(), b.pixels.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.class_map.insert(b.class_map.begin(), b.class_map.end());
    return out;
}

} // namespace oodn
