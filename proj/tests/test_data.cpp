#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "oodn/data.hpp"

using namespace oodn;

namespace {

std::vector<std::uint8_t> label_file(std::vector<std::uint8_t> labels) {
    std::vector<std::uint8_t> b = {0, 0, 8, 1, 0, 0, 0, static_cast<std::uint8_t>(labels.size())};
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

LabeledDataset tiny(std::vector<int> labels) {
    LabeledDataset ds;
    ds.rows = ds.cols = 2;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (int p = 0; p < 4; ++p) ds.pixels.push_back(static_cast<float>(i) + 0.1f * p);
        ds.class_map[labels[i]] = labels[i];
    }
    ds.labels = std::move(labels);
    return ds;
}

/// Test-side oracle: classify each sample by the nearest class mean image.
double nearest_mean_accuracy(const LabeledDataset& ds) {
    const int n = ds.num_classes();
    const std::size_t isz = ds.image_size();
    std::vector<std::vector<double>> mean(n, std::vector<double>(isz, 0.0));
    std::vector<int> count(n, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto img = ds.image(i);
        for (std::size_t p = 0; p < isz; ++p) mean[ds.labels[i]][p] += img[p];
        ++count[ds.labels[i]];
    }
    for (int k = 0; k < n; ++k)
        for (auto& v : mean[k]) v /= count[k];
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto img = ds.image(i);
        int best = -1;
        double best_d = 1e300;
        for (int k = 0; k < n; ++k) {
            double d = 0;
            for (std::size_t p = 0; p < isz; ++p) d += (img[p] - mean[k][p]) * (img[p] - mean[k][p]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        ok += best == ds.labels[i];
    }
    return static_cast<double>(ok) / ds.size();
}

} // namespace

TEST(ParseIdx, Labels) {
    const auto content = parse_idx(label_file({7, 2, 1}));
    ASSERT_TRUE(std::holds_alternative<IdxLabels>(content));
    EXPECT_EQ(std::get<IdxLabels>(content).labels, (std::vector<std::uint8_t>{7, 2, 1}));
}

TEST(ParseIdx, Images) {
    std::vector<std::uint8_t> b = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28};
    for (int i = 0; i < 1568; ++i) b.push_back(static_cast<std::uint8_t>(i % 256));
    const auto content = parse_idx(b);
    ASSERT_TRUE(std::holds_alternative<IdxImages>(content));
    const auto& img = std::get<IdxImages>(content);
    EXPECT_EQ(img.count, 2u);
    EXPECT_EQ(img.rows, 28u);
    EXPECT_EQ(img.cols, 28u);
    EXPECT_EQ(img.pixels.size(), 1568u);
    EXPECT_EQ(img.pixels[1567], 1567 % 256);
}

TEST(ParseIdx, RejectsUnknownMagic) {
    const std::vector<std::uint8_t> b = {0, 0, 8, 2, 0, 0, 0, 0};
    EXPECT_THROW(parse_idx(b), UnsupportedMagic);
}

TEST(ParseIdx, RejectsTruncatedPayload) {
    auto b = label_file({1, 2, 3});
    b.pop_back();
    EXPECT_THROW(parse_idx(b), TruncatedPayload);
    std::vector<std::uint8_t> img = {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 9, 9, 9};
    EXPECT_THROW(parse_idx(img), TruncatedPayload);
    EXPECT_THROW(parse_idx(std::vector<std::uint8_t>{0, 0, 8}), TruncatedPayload);
}

TEST(ParseIdx, RoundTripsByteIdentically) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        IdxImages img;
        img.count = static_cast<std::uint32_t>(rng.below(5));
        img.rows = static_cast<std::uint32_t>(1 + rng.below(6));
        img.cols = static_cast<std::uint32_t>(1 + rng.below(6));
        img.pixels.resize(std::size_t{img.count} * img.rows * img.cols);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
        const auto bytes = serialize_idx(img);
        EXPECT_EQ(serialize_idx(parse_idx(bytes)), bytes);

        IdxLabels lab;
        lab.labels.resize(rng.below(50));
        for (auto& l : lab.labels) l = static_cast<std::uint8_t>(rng.below(10));
        const auto lbytes = serialize_idx(lab);
        EXPECT_EQ(serialize_idx(parse_idx(lbytes)), lbytes);
    }
}

TEST(SplitClasses, KeepsOnlyRequestedClasses) {
    const auto out = split_classes(tiny({0, 1, 2, 0}), {0}, false);
    EXPECT_EQ(out.size(), 2u);
    EXPECT_EQ(out.labels, (std::vector<int>{0, 0}));
    EXPECT_EQ(out.pixels[0], 0.0f);
    EXPECT_EQ(out.pixels[4], 3.0f);
}

TEST(SplitClasses, DenseAscendingRelabel) {
    LabeledDataset ds = tiny({1, 5, 9});
    for (int k = 0; k < 10; ++k) ds.class_map[k] = k;
    const auto out = split_classes(ds, {1, 2, 3, 4, 5, 6, 7, 8, 9}, true);
    EXPECT_EQ(out.labels, (std::vector<int>{0, 4, 8}));
    EXPECT_EQ(out.class_map.at(1), 0);
    EXPECT_EQ(out.class_map.at(9), 8);
    EXPECT_EQ(out.num_classes(), 9);
}

TEST(SplitClasses, EmptySplitErrors) {
    EXPECT_THROW(split_classes(tiny({0, 1}), {}, false), EmptySplit);
    EXPECT_THROW(split_classes(tiny({0, 1}), {7}, false), EmptySplit);
}

TEST(SplitClasses, AllClassesWithoutRelabelIsIdentity) {
    const auto ds = tiny({3, 1, 2, 1, 3});
    EXPECT_EQ(split_classes(ds, {1, 2, 3}, false), ds);
    // Also after a prior relabel.
    const auto relabeled = split_classes(ds, {1, 2, 3}, true);
    EXPECT_EQ(split_classes(relabeled, {1, 2, 3}, false), relabeled);
}

TEST(SplitClasses, ClassMapInverseIsIdentity) {
    const auto out = split_classes(tiny({4, 6, 8, 6}), {6, 8}, true);
    std::map<int, int> inverse;
    for (auto [orig, dense] : out.class_map) inverse[dense] = orig;
    EXPECT_EQ(inverse.size(), out.class_map.size());
    for (auto [orig, dense] : out.class_map) EXPECT_EQ(inverse.at(dense), orig);
}

TEST(Normalize, ScalesBy255) {
    const std::vector<std::uint8_t> raw = {0, 255, 51};
    const auto out = normalize(raw);
    EXPECT_EQ(out[0], 0.0f);
    EXPECT_EQ(out[1], 1.0f);
    EXPECT_FLOAT_EQ(out[2], 0.2f);
}

TEST(MakeBatches, SizesAndLastShortBatch) {
    const auto ds = tiny({0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
    const auto batches = make_batches(ds, 4, 3, true);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[0].size(), 4u);
    EXPECT_EQ(batches[1].size(), 4u);
    EXPECT_EQ(batches[2].size(), 2u);
}

TEST(MakeBatches, SameSeedSameContents) {
    const auto ds = tiny({0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
    const auto a = make_batches(ds, 3, 99, true);
    const auto b = make_batches(ds, 3, 99, true);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].indices, b[i].indices);
        EXPECT_EQ(a[i].images, b[i].images);
        EXPECT_EQ(a[i].labels, b[i].labels);
    }
}

TEST(MakeBatches, NoShuffleIsIdentityOrder) {
    const auto plan = plan_batches(7, 3, 5, false);
    std::vector<std::size_t> flat;
    for (const auto& b : plan) flat.insert(flat.end(), b.begin(), b.end());
    std::vector<std::size_t> expect(7);
    std::iota(expect.begin(), expect.end(), 0);
    EXPECT_EQ(flat, expect);
}

TEST(MakeBatches, EverySampleExactlyOncePerEpoch) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const std::size_t count = 1 + seed * 7 % 61;
        const auto plan = plan_batches(count, 1 + seed % 9, seed, true);
        std::vector<int> seen(count, 0);
        for (const auto& b : plan) {
            EXPECT_GE(b.size(), 1u);
            for (auto i : b) ++seen[i];
        }
        EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    }
}

TEST(SynthBlobs, BalancedLabels) {
    const auto ds = synth_blobs(2, 5, 16, 4.0, 1);
    EXPECT_EQ(ds.size(), 10u);
    EXPECT_EQ(std::count(ds.labels.begin(), ds.labels.end(), 0), 5);
    EXPECT_EQ(std::count(ds.labels.begin(), ds.labels.end(), 1), 5);
    for (float v : ds.pixels) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(SynthBlobs, DeterministicPerSeed) {
    EXPECT_EQ(synth_blobs(3, 4, 16, 4.0, 42), synth_blobs(3, 4, 16, 4.0, 42));
    EXPECT_NE(synth_blobs(3, 4, 16, 4.0, 42).pixels, synth_blobs(3, 4, 16, 4.0, 43).pixels);
}

TEST(SynthBlobs, WellSeparatedIsNearestMeanSeparable) {
    const auto ds = synth_blobs(4, 50, 16, 5.0, 7);
    EXPECT_EQ(nearest_mean_accuracy(ds), 1.0);
}

TEST(LoadIdx, MissingFileIsConfigError) {
    try {
        load_idx_dataset("/nonexistent/images.idx", "/nonexistent/labels.idx", DatasetRole::MainTrain);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/images.idx"), std::string::npos);
    }
}
