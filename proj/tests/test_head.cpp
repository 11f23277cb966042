#include <gtest/gtest.h>

#include "oodn/head.hpp"
#include "oodn/train.hpp"

using namespace oodn;

namespace {

/// Explicit-loop evaluation of the three dense layers.
double reference_head(const OodHead<double>& h, const std::vector<double>& x) {
    auto dense = [](const Mat<double>& w, const Vec<double>& b, const std::vector<double>& in, bool act) {
        std::vector<double> out(static_cast<std::size_t>(w.rows()));
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            double s = b(i);
            for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(i, j) * in[static_cast<std::size_t>(j)];
            out[static_cast<std::size_t>(i)] = act && s < 0 ? 0.0 : s;
        }
        return out;
    };
    const auto z = dense(h.w3, h.b3, dense(h.w2, h.b2, dense(h.w1, h.b1, x, true), true), false)[0];
    return 1.0 / (1.0 + std::exp(-z));
}

std::vector<double> fixed_feature(int d) {
    std::vector<double> x(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] = std::abs(std::sin(0.37 * i + 0.1)) * (1 + i % 3);
    return x;
}

Vec<double> as_vec(const std::vector<double>& v) { return Eigen::Map<const Vec<double>>(v.data(), static_cast<Eigen::Index>(v.size())); }

/// Two Gaussian clouds in d dimensions whose means differ along every axis.
std::pair<Mat<float>, Mat<float>> clouds(int d, int per, std::uint64_t seed) {
    Rng rng(seed);
    Mat<float> a(per, d), b(per, d);
    for (int i = 0; i < per; ++i)
        for (int j = 0; j < d; ++j) {
            a(i, j) = static_cast<float>(1.0 + 0.3 * rng.normal());
            b(i, j) = static_cast<float>(-1.0 + 0.3 * rng.normal());
        }
    return {a, b};
}

/// Nearest-mean accuracy over the two clouds.
double nearest_mean_accuracy(const Mat<float>& a, const Mat<float>& b) {
    const Eigen::RowVectorXf ma = a.colwise().mean(), mb = b.colwise().mean();
    int ok = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) ok += (a.row(i) - ma).norm() < (a.row(i) - mb).norm();
    for (Eigen::Index i = 0; i < b.rows(); ++i) ok += (b.row(i) - mb).norm() < (b.row(i) - ma).norm();
    return static_cast<double>(ok) / static_cast<double>(a.rows() + b.rows());
}

} // namespace

TEST(HeadForward, ZeroParamsGiveHalf) {
    const auto h = OodHead<double>::zeros(84);
    EXPECT_EQ(head_forward(h, as_vec(fixed_feature(84))), 0.5);
}

TEST(HeadForward, LargeBiasSaturates) {
    auto h = OodHead<double>::zeros(4);
    h.b3(0) = 50;
    EXPECT_GT(head_forward(h, Vec<double>::Ones(4)), 1 - 1e-15);
    h.b3(0) = -800;
    const double p = head_forward(h, Vec<double>::Ones(4));
    EXPECT_GE(p, 0.0);
    EXPECT_LT(p, 1e-300);
}

TEST(HeadForward, SeedZeroGoldenScalar) {
    const auto h = OodHead<double>::init(84, 0);
    const auto x = fixed_feature(84);
    const double ref = reference_head(h, x);
    EXPECT_NEAR(ref, 0.16997398942462763, 1e-12);
    EXPECT_NEAR(head_forward(h, as_vec(x)), ref, 1e-12);
    const auto hf = h.cast<float>();
    EXPECT_NEAR(head_forward(hf, as_vec(x).cast<float>()), ref, 1e-5);
}

TEST(HeadForward, DimMismatch) {
    const auto h = OodHead<double>::zeros(84);
    EXPECT_THROW(head_forward(h, Vec<double>::Zero(83)), DimMismatch);
}

TEST(HeadForward, MonotoneInFinalBias) {
    auto h = OodHead<double>::init(8, 3);
    const Vec<double> x = as_vec(fixed_feature(8));
    double prev = 0;
    for (double b = -10; b <= 10; b += 0.5) {
        h.b3(0) = b;
        const double p = head_forward(h, x);
        EXPECT_GE(p, prev);
        prev = p;
    }
}

TEST(Bce, Examples) {
    EXPECT_NEAR(bce(0.5, 1), 0.693147180559945309, 1e-15);
    EXPECT_NEAR(bce(0.5, 0), 0.693147180559945309, 1e-15);
    EXPECT_NEAR(bce(0.731058, 1), 0.313262479014623787, 1e-12);
    EXPECT_NEAR(bce(1.0, 1), -std::log(1 - kBceClamp), 1e-15);
    EXPECT_LT(bce(1.0, 1), 1e-6);
    EXPECT_TRUE(std::isfinite(bce(0.0, 1)));
    EXPECT_TRUE(std::isfinite(bce(1.0, 0)));
}

TEST(Bce, NonNegative) {
    for (double p = 0; p <= 1.0; p += 0.01) {
        EXPECT_GE(bce(p, 0), 0.0);
        EXPECT_GE(bce(p, 1), 0.0);
    }
}

TEST(ClassifyOod, ThresholdRule) {
    EXPECT_EQ(classify_ood(0.9, 0.5), OodDecision::Normal);
    EXPECT_EQ(classify_ood(0.1, 0.5), OodDecision::Ood);
    EXPECT_EQ(classify_ood(0.5, 0.5), OodDecision::Normal);
}

TEST(HeadGradCheck, MatchesCentralDifferences) {
    const auto h = OodHead<double>::init(6, 9);
    Rng rng(2);
    Mat<double> x(5, 6);
    for (Eigen::Index j = 0; j < 6; ++j)
        for (Eigen::Index i = 0; i < 5; ++i) x(i, j) = rng.normal();
    const std::vector<int> y = {1, 0, 0, 1, 1};
    const auto rep = head_grad_check(h, x, y, 1e-5, 12, 4);
    EXPECT_GE(rep.checked, 50u);
    EXPECT_LE(rep.max_relative_error, 1e-6);
    EXPECT_GT(head_grad_check(h, x, y, 1e-5, 12, 4, 1.1).max_relative_error, 1e-2);
}

TEST(HeadGradCheck, BatchedGradientMatchesPerSample) {
    const auto h = OodHead<double>::init(6, 9);
    Rng rng(8);
    Mat<double> x(7, 6);
    for (Eigen::Index j = 0; j < 6; ++j)
        for (Eigen::Index i = 0; i < 7; ++i) x(i, j) = rng.normal();
    const std::vector<int> labels = {1, 0, 0, 1, 1, 0, 1};
    Vec<double> y(7);
    for (int i = 0; i < 7; ++i) y(i) = labels[static_cast<std::size_t>(i)];
    auto per_sample = OodHead<double>::zeros(6);
    auto batched = OodHead<double>::zeros(6);
    head_batch_loss(h, x, labels, &per_sample);
    const Vec<double> p = head_batch_grad(h, x, y, batched);
    for (Eigen::Index i = 0; i < 7; ++i) EXPECT_NEAR(p(i), head_forward(h, x.row(i)), 1e-14);
    OodHead<double>::zip([](const char* name, const auto& a, const auto& b) {
            EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12) << name;
        },
        per_sample, batched);
}

TEST(TrainHead, SeparableCloudsReachHighAccuracy) {
    const auto [normal, anomaly] = clouds(16, 200, 8);
    ASSERT_EQ(nearest_mean_accuracy(normal, anomaly), 1.0);
    auto h = OodHead<float>::init(16, 1);
    HeadConfig cfg;
    cfg.epochs = 20;
    const auto trace = train_head_on_features(h, normal, anomaly, cfg);
    ASSERT_EQ(trace.size(), 20u);
    EXPECT_GE(trace.back().accuracy, 0.99);
    int ok = 0;
    for (Eigen::Index i = 0; i < normal.rows(); ++i) ok += classify_ood(head_forward(h, normal.row(i)), 0.5) == OodDecision::Normal;
    for (Eigen::Index i = 0; i < anomaly.rows(); ++i) ok += classify_ood(head_forward(h, anomaly.row(i)), 0.5) == OodDecision::Ood;
    EXPECT_GE(ok / 400.0, 0.99);
}

TEST(TrainHead, ZeroLearningRateLeavesHeadUnchanged) {
    const auto [normal, anomaly] = clouds(8, 30, 1);
    auto h = OodHead<float>::init(8, 5);
    const auto before = h;
    HeadConfig cfg;
    cfg.learning_rate = 0;
    cfg.epochs = 2;
    train_head_on_features(h, normal, anomaly, cfg);
    EXPECT_EQ(h, before);
}

TEST(TrainHead, EmptyDataset) {
    auto h = OodHead<float>::init(8, 5);
    EXPECT_THROW(train_head_on_features(h, Mat<float>(0, 8), Mat<float>(Mat<float>::Ones(3, 8)), HeadConfig{}), EmptyDataset);
    const auto main_ds = synth_blobs(2, 3, 12, 3.0, 1);
    LabeledDataset empty = main_ds;
    empty.pixels.clear();
    empty.labels.clear();
    const auto bb = Backbone<float>::init({12, 2, 8, FeatureTap::PostRelu}, 0);
    EXPECT_THROW(train_head(bb, h, main_ds, empty, HeadConfig{}), EmptyDataset);
}

TEST(TrainHead, BackboneIsFrozen) {
    const BackboneSpec spec{12, 2, 8, FeatureTap::PostRelu};
    const auto bb = Backbone<float>::init(spec, 3);
    const auto snapshot = bb;
    auto main_ds = synth_blobs(2, 20, 12, 3.0, 1);
    auto anomaly = synth_blobs(3, 10, 12, 3.0, 2);
    anomaly.role = DatasetRole::Anomaly;
    auto h = OodHead<float>::init(8, 5);
    HeadConfig cfg;
    cfg.epochs = 3;
    train_head(bb, h, main_ds, anomaly, cfg);
    EXPECT_EQ(bb, snapshot);
}
