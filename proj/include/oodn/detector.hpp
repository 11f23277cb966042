#pragma once

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "oodn/nn.hpp"

namespace oodn {

/// Gaussian fit of one class's deep features.
struct ClassStats {
    Vec<double> mean;
    Mat<double> cov;       // unbiased sample covariance
    double epsilon = 0;    // ridge added before factorization
    std::size_t count = 0;
    Eigen::LLT<Mat<double>> factor;  // of cov + epsilon*I

    int dim() const { return static_cast<int>(mean.size()); }

    /// Recomputes the ridge and the Cholesky factor from `cov`.
    void refactor() {
        const double d = static_cast<double>(cov.rows());
        epsilon = 1e-6 * cov.trace() / d;
        refactor_with(epsilon);
    }

    void refactor_with(double eps) {
        epsilon = eps;
        Mat<double> reg = cov;
        reg.diagonal().array() += epsilon;
        factor.compute(reg);
        if (factor.info() != Eigen::Success) {
            throw FactorizationFailure("covariance is not positive definite after ridge " + std::to_string(epsilon));
        }
    }
};

struct DetectorModel {
    std::vector<ClassStats> stats;
    std::vector<double> thresholds;  // theta per class; empty until calibrated
    double q = 0.975;

    int n_classes() const { return static_cast<int>(stats.size()); }
    bool fitted() const { return !stats.empty(); }
    bool calibrated() const { return fitted() && thresholds.size() == stats.size(); }
};

template <typename Derived>
std::vector<ClassStats> fit_stats(const Eigen::MatrixBase<Derived>& features, std::span<const int> labels,
                                  int n_classes) {
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
        throw DimMismatch("feature rows vs labels");
    }
    const Eigen::Index d = features.cols();
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= n_classes) {
            throw LabelOutOfRange("label " + std::to_string(labels[i]));
        }
        rows[static_cast<std::size_t>(labels[i])].push_back(static_cast<Eigen::Index>(i));
    }
    std::vector<ClassStats> out(static_cast<std::size_t>(n_classes));
    for (int y = 0; y < n_classes; ++y) {
        const auto& r = rows[static_cast<std::size_t>(y)];
        if (static_cast<Eigen::Index>(r.size()) < d + 1) {
            throw DegenerateClass("class " + std::to_string(y) + " has " + std::to_string(r.size()) +
                                  " samples, needs at least " + std::to_string(d + 1));
        }
        Mat<double> x(static_cast<Eigen::Index>(r.size()), d);
        for (std::size_t k = 0; k < r.size(); ++k) {
            x.row(static_cast<Eigen::Index>(k)) = features.row(r[k]).template cast<double>();
        }
        ClassStats& s = out[static_cast<std::size_t>(y)];
        s.count = r.size();
        s.mean = x.colwise().mean().transpose();
        x.rowwise() -= s.mean.transpose();
        s.cov = (x.transpose() * x) / static_cast<double>(s.count - 1);
        s.refactor();
    }
    return out;
}

/// sqrt((x - mu)^T (S + eps I)^{-1} (x - mu)) through the Cholesky factor.
template <typename Derived>
double mahalanobis(const ClassStats& s, const Eigen::MatrixBase<Derived>& x) {
    if (x.size() != s.mean.size()) {
        throw DimMismatch("feature dim " + std::to_string(x.size()) + " vs class dim " +
                          std::to_string(s.mean.size()));
    }
    const Vec<double> diff = x.derived().template cast<double>().reshaped() - s.mean;
    const Vec<double> z = s.factor.matrixL().solve(diff);
    return std::sqrt(z.squaredNorm());
}

/// Percentile with linear interpolation between the closest order statistics:
/// position q*(n-1) in the sorted sample.
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw DegenerateClass("percentile of an empty set");
    if (!(q > 0 && q <= 1)) throw ConfigError("percentile q must lie in (0, 1]");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

/// Per-sample distances to every class (rows follow `features`).
template <typename Derived>
Mat<double> class_distances(const std::vector<ClassStats>& stats, const Eigen::MatrixBase<Derived>& features) {
    Mat<double> out(features.rows(), static_cast<Eigen::Index>(stats.size()));
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        for (std::size_t y = 0; y < stats.size(); ++y) {
            out(i, static_cast<Eigen::Index>(y)) = mahalanobis(stats[y], features.row(i));
        }
    }
    return out;
}

template <typename Derived>
std::vector<double> calibrate(const std::vector<ClassStats>& stats, const Eigen::MatrixBase<Derived>& features,
                              std::span<const int> labels, double q) {
    std::vector<std::vector<double>> per_class(stats.size());
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        if (y >= stats.size()) throw LabelOutOfRange("label " + std::to_string(y));
        per_class[y].push_back(mahalanobis(stats[y], features.row(i)));
    }
    std::vector<double> theta(stats.size());
    for (std::size_t y = 0; y < stats.size(); ++y) {
        if (per_class[y].empty()) {
            throw DegenerateClass("class " + std::to_string(y) + " has no calibration samples");
        }
        theta[y] = percentile(per_class[y], q);
    }
    return theta;
}

/// Fit + calibrate on the same (training) features.
template <typename Derived>
DetectorModel fit_detector(const Eigen::MatrixBase<Derived>& features, std::span<const int> labels, int n_classes,
                           double q) {
    DetectorModel det;
    det.q = q;
    det.stats = fit_stats(features, labels, n_classes);
    det.thresholds = calibrate(det.stats, features, labels, q);
    return det;
}

/// Q(x): true (normal) when some class accepts x, i.e. D_y(x) <= theta_y.
template <typename Derived>
bool is_normal(const DetectorModel& det, const Eigen::MatrixBase<Derived>& x) {
    if (!det.calibrated()) throw NotCalibrated("detector has no thresholds");
    for (std::size_t y = 0; y < det.stats.size(); ++y) {
        if (mahalanobis(det.stats[y], x) <= det.thresholds[y]) return true;
    }
    return false;
}

/// Minimum class distance; thresholding it at t is the criterion with every
/// threshold set to t. Higher is more anomalous.
template <typename Derived>
double anomaly_score(const DetectorModel& det, const Eigen::MatrixBase<Derived>& x) {
    if (!det.fitted()) throw NotCalibrated("detector has no class statistics");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& s : det.stats) best = std::min(best, mahalanobis(s, x));
    return best;
}

/// min_y D_y(x) / theta_y; thresholding at s is the criterion with every
/// calibrated threshold scaled by s.
template <typename Derived>
double scaled_anomaly_score(const DetectorModel& det, const Eigen::MatrixBase<Derived>& x) {
    if (!det.calibrated()) throw NotCalibrated("detector has no thresholds");
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < det.stats.size(); ++y) {
        best = std::min(best, mahalanobis(det.stats[y], x) / det.thresholds[y]);
    }
    return best;
}

/// P(X) = Q(T(X)) for a single image.
template <typename T>
bool detect(const DetectorModel& det, const Backbone<T>& model, std::span<const float> image) {
    SampleCache<T> cache;
    forward_sample(model, image, cache);
    return is_normal(det, cache.feature);
}

} // namespace oodn
