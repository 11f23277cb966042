#pragma once

#include <span>
#include <string>

#include "oodn/nn.hpp"

namespace oodn {

/// Learned per-class centroids of the deep features, one row per class.
template <typename T>
struct Centers {
    Mat<T> c;        // n x d
    T rate = T(0.5); // alpha

    static Centers init(int n_classes, int feature_dim, std::uint64_t seed, T rate = T(0.5)) {
        Centers out;
        out.rate = rate;
        out.c.resize(n_classes, feature_dim);
        Rng rng(seed);
        for (Eigen::Index j = 0; j < out.c.cols(); ++j)
            for (Eigen::Index i = 0; i < out.c.rows(); ++i) out.c(i, j) = static_cast<T>(0.1 * rng.normal());
        return out;
    }

    int n_classes() const { return static_cast<int>(c.rows()); }
    int feature_dim() const { return static_cast<int>(c.cols()); }

    bool operator==(const Centers& o) const {
        return rate == o.rate && c.rows() == o.c.rows() && c.cols() == o.c.cols() && c == o.c;
    }
};

namespace detail {

template <typename T>
void check_center_args(const Mat<T>& features, std::span<const int> labels, const Centers<T>& centers) {
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
        throw DimMismatch("feature rows " + std::to_string(features.rows()) + " vs labels " +
                          std::to_string(labels.size()));
    }
    if (features.cols() != centers.c.cols()) {
        throw DimMismatch("feature dim " + std::to_string(features.cols()) + " vs center dim " +
                          std::to_string(centers.c.cols()));
    }
    for (int y : labels) {
        if (y < 0 || y >= centers.c.rows()) {
            throw LabelOutOfRange("label " + std::to_string(y) + " with " + std::to_string(centers.c.rows()) +
                                  " centers");
        }
    }
}

} // namespace detail

/// 1/2 sum_i ||x_i - c_{y_i}||^2, without lambda.
template <typename T>
T center_loss(const Mat<T>& features, std::span<const int> labels, const Centers<T>& centers) {
    detail::check_center_args(features, labels, centers);
    T sum = 0;
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        sum += (features.row(i) - centers.c.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    }
    return sum / T(2);
}

template <typename T>
struct CenterGrads {
    Mat<T> features;  // m x d: x_i - c_{y_i}
    Mat<T> deltas;    // n x d: damped per-class center deltas
};

/// Feature gradients of the raw center loss plus the count-damped center
/// deltas: delta_j = sum_{i: y_i = j} (c_j - x_i) / (1 + count_j).
template <typename T>
CenterGrads<T> center_loss_grads(const Mat<T>& features, std::span<const int> labels, const Centers<T>& centers) {
    detail::check_center_args(features, labels, centers);
    CenterGrads<T> g;
    g.features.resize(features.rows(), features.cols());
    g.deltas.setZero(centers.c.rows(), centers.c.cols());
    std::vector<int> counts(static_cast<std::size_t>(centers.c.rows()), 0);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        g.features.row(i) = features.row(i) - centers.c.row(y);
        g.deltas.row(y) -= g.features.row(i);
        ++counts[static_cast<std::size_t>(y)];
    }
    for (Eigen::Index j = 0; j < g.deltas.rows(); ++j) {
        g.deltas.row(j) /= T(1 + counts[static_cast<std::size_t>(j)]);
    }
    return g;
}

/// c_j <- c_j - alpha * delta_j
template <typename T>
void apply_center_deltas(Centers<T>& centers, const Mat<T>& deltas) {
    if (deltas.rows() != centers.c.rows() || deltas.cols() != centers.c.cols()) {
        throw DimMismatch("center delta shape");
    }
    centers.c -= centers.rate * deltas;
}

/// L = L_S + lambda * L_C
template <typename T>
constexpr T combine(T softmax_loss, T center_loss_value, T lambda) {
    return softmax_loss + lambda * center_loss_value;
}

} // namespace oodn
