#pragma once

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "oodn/nn.hpp"

namespace oodn {

// ---------------------------------------------------------------------------
// Confusion counts and F1
// ---------------------------------------------------------------------------

/// Row = true class, column = predicted class. For binary OOD reporting use
/// two classes with index 1 = OOD (the positive class).
struct ConfusionCounts {
    int n = 0;
    std::vector<std::size_t> cells;

    explicit ConfusionCounts(int classes = 2)
        : n(classes), cells(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0) {}

    std::size_t& at(int truth, int pred) {
        return cells[static_cast<std::size_t>(truth) * static_cast<std::size_t>(n) + static_cast<std::size_t>(pred)];
    }
    std::size_t at(int truth, int pred) const {
        return cells[static_cast<std::size_t>(truth) * static_cast<std::size_t>(n) + static_cast<std::size_t>(pred)];
    }
    void add(int truth, int pred) { ++at(truth, pred); }
    std::size_t total() const { return std::accumulate(cells.begin(), cells.end(), std::size_t{0}); }

    double class_f1(int c) const {
        const std::size_t tp = at(c, c);
        std::size_t fp = 0, fn = 0;
        for (int k = 0; k < n; ++k) {
            if (k == c) continue;
            fp += at(k, c);
            fn += at(c, k);
        }
        const std::size_t denom = 2 * tp + fp + fn;
        return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }

    double precision(int c) const {
        std::size_t col = 0;
        for (int k = 0; k < n; ++k) col += at(k, c);
        return col == 0 ? 0.0 : static_cast<double>(at(c, c)) / static_cast<double>(col);
    }

    double recall(int c) const {
        std::size_t row = 0;
        for (int k = 0; k < n; ++k) row += at(c, k);
        return row == 0 ? 0.0 : static_cast<double>(at(c, c)) / static_cast<double>(row);
    }

    double accuracy() const {
        std::size_t diag = 0;
        for (int k = 0; k < n; ++k) diag += at(k, k);
        const auto t = total();
        return t == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(t);
    }
};

inline ConfusionCounts confusion(std::span<const int> truth, std::span<const int> pred, int n_classes) {
    if (truth.size() != pred.size()) throw DimMismatch("truth vs prediction length");
    ConfusionCounts c(n_classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes) {
            throw LabelOutOfRange("confusion entry outside [0, " + std::to_string(n_classes) + ")");
        }
        c.add(truth[i], pred[i]);
    }
    return c;
}

enum class F1Mode { BinaryPositive, Macro };

/// Binary mode scores class `positive` (default 1 = OOD); macro mode is the
/// unweighted mean of per-class F1. Undefined ratios count as 0.
inline double f1(const ConfusionCounts& counts, F1Mode mode, int positive = 1) {
    if (mode == F1Mode::BinaryPositive) return counts.class_f1(positive);
    double sum = 0;
    for (int c = 0; c < counts.n; ++c) sum += counts.class_f1(c);
    return counts.n == 0 ? 0.0 : sum / counts.n;
}

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

enum class ScoreOrientation { HigherIsOod, LowerIsOod };

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    double threshold = 0;  // predicted OOD when the score is at/beyond this cut
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0;
};

/// Sweeps every distinct score as a cut point, OOD positive. With
/// HigherIsOod a sample is flagged when score >= threshold; with LowerIsOod
/// when score <= threshold. AUC is the trapezoidal area, accumulated in
/// integers so that tied scores contribute exactly one half.
inline RocCurve roc(std::span<const double> scores, std::span<const int> is_ood, ScoreOrientation orient) {
    if (scores.size() != is_ood.size()) throw DimMismatch("scores vs labels length");
    std::uint64_t pos = 0, neg = 0;
    for (int l : is_ood) (l ? pos : neg)++;
    if (pos == 0 || neg == 0) throw SingleClass("ROC needs both OOD and normal samples");

    const double sign = orient == ScoreOrientation::HigherIsOod ? 1.0 : -1.0;
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sign * scores[a] > sign * scores[b]; });

    RocCurve curve;
    const double inf = std::numeric_limits<double>::infinity();
    curve.points.push_back({0.0, 0.0, sign * inf});
    std::uint64_t tp = 0, fp = 0, twice_area = 0;
    for (std::size_t k = 0; k < order.size();) {
        const double s = scores[order[k]];
        const std::uint64_t tp0 = tp, fp0 = fp;
        while (k < order.size() && scores[order[k]] == s) {
            (is_ood[order[k]] ? tp : fp)++;
            ++k;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        curve.points.push_back(
            {static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), s});
    }
    curve.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return curve;
}

// ---------------------------------------------------------------------------
// PCA onto two components
// ---------------------------------------------------------------------------

struct Pca2 {
    Vec<double> mean;
    Mat<double> components;   // d x 2, orthonormal columns
    Vec<double> singular;     // top two singular values
    Mat<double> projections;  // M x 2

    template <typename Derived>
    Mat<double> project(const Eigen::MatrixBase<Derived>& x) const {
        Mat<double> centered = x.template cast<double>();
        centered.rowwise() -= mean.transpose();
        return centered * components;
    }
};

template <typename Derived>
Pca2 pca2(const Eigen::MatrixBase<Derived>& features) {
    if (features.rows() < 2) throw DegenerateInput("PCA needs at least two samples");
    if (features.cols() < 2) throw DegenerateInput("PCA onto two components needs d >= 2");
    Pca2 p;
    Mat<double> centered = features.template cast<double>();
    p.mean = centered.colwise().mean().transpose();
    centered.rowwise() -= p.mean.transpose();
    Eigen::BDCSVD<Mat<double>> svd(centered, Eigen::ComputeThinV);
    p.singular = svd.singularValues().head(2);
    if (!(p.singular(0) > 0)) throw DegenerateInput("all feature vectors are identical");
    p.components = svd.matrixV().leftCols(2);
    p.projections = centered * p.components;
    return p;
}

// ---------------------------------------------------------------------------
// Feature geometry
// ---------------------------------------------------------------------------

/// Mean over rows of the Euclidean distance to the nearest centroid row.
template <typename A, typename B>
double mean_nearest_centroid_distance(const Eigen::MatrixBase<A>& features, const Eigen::MatrixBase<B>& centroids) {
    if (features.rows() == 0) return 0.0;
    double sum = 0;
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
            best = std::min(best,
                            (features.row(i).template cast<double>() - centroids.row(j).template cast<double>()).norm());
        }
        sum += best;
    }
    return sum / static_cast<double>(features.rows());
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

inline std::string fmt_num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    return out;
}

inline void write_roc_csv(const std::filesystem::path& path, const RocCurve& curve) {
    auto out = open_csv(path);
    out << "fpr,tpr,threshold\n";
    for (const auto& p : curve.points) {
        out << fmt_num(p.fpr) << ',' << fmt_num(p.tpr) << ',' << fmt_num(p.threshold) << '\n';
    }
}

/// x,y,label,is_ood per sample.
inline void write_projection_csv(const std::filesystem::path& path, const Mat<double>& projections,
                                 std::span<const int> labels, std::span<const int> is_ood) {
    auto out = open_csv(path);
    out << "x,y,label,is_ood\n";
    for (Eigen::Index i = 0; i < projections.rows(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        out << fmt_num(projections(i, 0)) << ',' << fmt_num(projections(i, 1)) << ',' << labels[k] << ','
            << is_ood[k] << '\n';
    }
}

/// x,y,class per projected centroid.
inline void write_centroid_csv(const std::filesystem::path& path, const Mat<double>& projected) {
    auto out = open_csv(path);
    out << "x,y,class\n";
    for (Eigen::Index j = 0; j < projected.rows(); ++j) {
        out << fmt_num(projected(j, 0)) << ',' << fmt_num(projected(j, 1)) << ',' << j << '\n';
    }
}

} // namespace oodn
