#include <gtest/gtest.h>

#include <filesystem>

#include "oodn/archive.hpp"
#include "oodn/detector.hpp"

using namespace oodn;

namespace {

ModelState full_state() {
    const BackboneSpec spec{12, 3, 8, FeatureTap::PostRelu};
    ModelState st;
    st.backbone = Backbone<float>::init(spec, 4);
    st.centers = Centers<float>::init(3, 8, 9);
    Rng rng(3);
    Mat<double> x(30, 8);
    std::vector<int> y(30);
    for (int i = 0; i < 30; ++i) {
        y[static_cast<std::size_t>(i)] = i % 3;
        for (int j = 0; j < 8; ++j) x(i, j) = rng.normal() + i % 3;
    }
    st.detector = fit_detector(x, y, 3, 0.975);
    st.head = OodHead<float>::init(8, 6);
    st.head->tau = 0.4;
    st.lambda = 0.1;
    st.q = 0.975;
    st.seed = 77;
    st.provenance = {{"note", "unit"}};
    return st;
}

} // namespace

TEST(Archive, RoundTripIsBitIdentical) {
    const ModelState st = full_state();
    const auto bytes = encode_model(st);
    const ModelState back = decode_model(bytes);
    EXPECT_EQ(encode_model(back), bytes);
    EXPECT_EQ(back.backbone, st.backbone);
    ASSERT_TRUE(back.head && back.detector && back.centers);
    EXPECT_EQ(*back.head, *st.head);
    EXPECT_EQ(*back.centers, *st.centers);
    EXPECT_EQ(back.detector->thresholds, st.detector->thresholds);
    EXPECT_EQ(back.seed, 77u);
    EXPECT_EQ(back.lambda, 0.1);
    EXPECT_EQ(back.head->tau, 0.4);
    EXPECT_EQ(back.provenance, st.provenance);
    for (std::size_t y = 0; y < 3; ++y) {
        EXPECT_EQ(back.detector->stats[y].mean, st.detector->stats[y].mean);
        EXPECT_EQ(back.detector->stats[y].cov, st.detector->stats[y].cov);
        EXPECT_EQ(back.detector->stats[y].epsilon, st.detector->stats[y].epsilon);
    }
    Vec<double> probe = Vec<double>::LinSpaced(8, -1, 2);
    EXPECT_EQ(anomaly_score(*back.detector, probe), anomaly_score(*st.detector, probe));
}

TEST(Archive, PreambleLayout) {
    const auto bytes = encode_model(full_state());
    ASSERT_GT(bytes.size(), 16u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "OODN");
    EXPECT_EQ(bytes[4], kArchiveVersion);
    EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    EXPECT_EQ(header.at("n"), 3);
    EXPECT_EQ(header.at("d"), 8);
    EXPECT_EQ(header.at("architecture").at("feature_tap"), "post_relu");
}

TEST(Archive, PartialStates) {
    ModelState st = full_state();
    st.head.reset();
    st.detector.reset();
    const ModelState back = decode_model(encode_model(st));
    EXPECT_FALSE(back.head);
    EXPECT_FALSE(back.detector);
    EXPECT_TRUE(back.centers);
    EXPECT_EQ(back.backbone, st.backbone);
}

TEST(Archive, BadMagic) {
    auto bytes = encode_model(full_state());
    bytes[0] = 'X';
    EXPECT_THROW(decode_model(bytes), BadMagic);
    EXPECT_THROW(decode_model(std::vector<std::uint8_t>{'O', 'O'}), BadMagic);
}

TEST(Archive, VersionMismatch) {
    auto bytes = encode_model(full_state());
    bytes[4] = 99;
    EXPECT_THROW(decode_model(bytes), VersionMismatch);
}

TEST(Archive, CorruptLength) {
    const auto bytes = encode_model(full_state());
    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    EXPECT_THROW(decode_model(truncated), CorruptLength);
    auto huge = bytes;
    huge[15] = 0x7f;
    EXPECT_THROW(decode_model(huge), CorruptLength);
    auto preamble = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10);
    EXPECT_THROW(decode_model(preamble), CorruptLength);
    auto garbled = bytes;
    garbled[16] = '#';
    EXPECT_THROW(decode_model(garbled), CorruptLength);
}

TEST(Archive, SaveLoadFile) {
    const auto path = std::filesystem::temp_directory_path() / "oodn_test_archive" / "m.oodn";
    const ModelState st = full_state();
    save_model(path, st);
    EXPECT_EQ(encode_model(load_model(path)), encode_model(st));
    std::filesystem::remove_all(path.parent_path());
    EXPECT_THROW(load_model(path), ConfigError);
}
