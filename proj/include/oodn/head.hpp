#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "oodn/nn.hpp"
#include "oodn/train.hpp"

namespace oodn {

inline constexpr int kHeadWidth = 256;

/// Second head on the deep features: dense(d->256) ReLU dense(256->256) ReLU
/// dense(256->1) sigmoid. The output is the probability of "normal".
template <typename T>
struct OodHead {
    Mat<T> w1, w2, w3;
    Vec<T> b1, b2, b3;
    double tau = 0.5;

    static OodHead zeros(int feature_dim) {
        OodHead h;
        h.w1.setZero(kHeadWidth, feature_dim);
        h.b1.setZero(kHeadWidth);
        h.w2.setZero(kHeadWidth, kHeadWidth);
        h.b2.setZero(kHeadWidth);
        h.w3.setZero(1, kHeadWidth);
        h.b3.setZero(1);
        return h;
    }

    static OodHead init(int feature_dim, std::uint64_t seed) {
        OodHead h = zeros(feature_dim);
        Rng rng(seed);
        for (Mat<T>* w : {&h.w1, &h.w2, &h.w3}) {
            const double scale = std::sqrt(2.0 / static_cast<double>(w->cols()));
            for (Eigen::Index j = 0; j < w->cols(); ++j)
                for (Eigen::Index i = 0; i < w->rows(); ++i) (*w)(i, j) = static_cast<T>(scale * rng.normal());
        }
        return h;
    }

    int feature_dim() const { return static_cast<int>(w1.cols()); }

    template <typename F, typename... Others>
    static void zip(F&& f, OodHead& a, Others&... o) {
        f("head.fc1.weight", a.w1, o.w1...);
        f("head.fc1.bias", a.b1, o.b1...);
        f("head.fc2.weight", a.w2, o.w2...);
        f("head.fc2.bias", a.b2, o.b2...);
        f("head.out.weight", a.w3, o.w3...);
        f("head.out.bias", a.b3, o.b3...);
    }

    template <typename F>
    void for_each(F&& f) const {
        auto& self = const_cast<OodHead&>(*this);
        zip([&f](const char* name, const auto& p) { f(name, p); }, self);
    }

    template <typename U>
    OodHead<U> cast() const {
        OodHead<U> h;
        h.w1 = w1.template cast<U>();
        h.w2 = w2.template cast<U>();
        h.w3 = w3.template cast<U>();
        h.b1 = b1.template cast<U>();
        h.b2 = b2.template cast<U>();
        h.b3 = b3.template cast<U>();
        h.tau = tau;
        return h;
    }

    bool operator==(const OodHead& o) const {
        bool eq = tau == o.tau;
        auto& a = const_cast<OodHead&>(*this);
        auto& b = const_cast<OodHead&>(o);
        zip([&eq](const char*, const auto& x, const auto& y) {
                eq = eq && x.rows() == y.rows() && x.cols() == y.cols() && x == y;
            },
            a, b);
        return eq;
    }
};

template <typename T>
T sigmoid(T z) {
    // Split by sign so exp never overflows.
    if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
    const T e = std::exp(z);
    return e / (T(1) + e);
}

template <typename T>
struct HeadCache {
    Vec<T> x, h1_pre, h1, h2_pre, h2;
    T logit = 0;
    T p = 0;
};

template <typename T, typename Derived>
T head_forward(const OodHead<T>& h, const Eigen::MatrixBase<Derived>& feature, HeadCache<T>& c) {
    if (feature.size() != h.w1.cols()) {
        throw DimMismatch("head expects " + std::to_string(h.w1.cols()) + " features, got " +
                          std::to_string(feature.size()));
    }
    c.x = feature.derived().template cast<T>().reshaped();
    c.h1_pre.noalias() = h.w1 * c.x;
    c.h1_pre += h.b1;
    c.h1 = relu(c.h1_pre);
    c.h2_pre.noalias() = h.w2 * c.h1;
    c.h2_pre += h.b2;
    c.h2 = relu(c.h2_pre);
    c.logit = h.w3.row(0).dot(c.h2) + h.b3(0);
    c.p = sigmoid(c.logit);
    return c.p;
}

template <typename T, typename Derived>
T head_forward(const OodHead<T>& h, const Eigen::MatrixBase<Derived>& feature) {
    HeadCache<T> c;
    return head_forward(h, feature, c);
}

inline constexpr double kBceClamp = 1e-7;

/// -(y ln p + (1-y) ln(1-p)) with p clamped to [1e-7, 1-1e-7].
template <typename T>
T bce(T p, int y) {
    const T pc = std::clamp(p, T(kBceClamp), T(1 - kBceClamp));
    return y ? -std::log(pc) : -std::log(T(1) - pc);
}

enum class OodDecision { Normal, Ood };

/// p >= tau is normal (ties go to normal).
inline OodDecision classify_ood(double p, double tau) {
    return p >= tau ? OodDecision::Normal : OodDecision::Ood;
}

/// Accumulates the gradient of bce(head(x), y) into `grad`; d loss / d logit = p - y.
template <typename T>
void head_backward(const OodHead<T>& h, const HeadCache<T>& c, int y, OodHead<T>& grad) {
    const T dz = c.p - static_cast<T>(y);
    grad.w3.row(0) += dz * c.h2.transpose();
    grad.b3(0) += dz;
    Vec<T> dh2 = dz * h.w3.row(0).transpose();
    dh2 = (c.h2_pre.array() > T(0)).select(dh2, T(0));
    grad.w2.noalias() += dh2 * c.h1.transpose();
    grad.b2 += dh2;
    Vec<T> dh1 = h.w2.transpose() * dh2;
    dh1 = (c.h1_pre.array() > T(0)).select(dh1, T(0));
    grad.w1.noalias() += dh1 * c.x.transpose();
    grad.b1 += dh1;
}

/// Summed BCE over rows of `features`; accumulates the gradient when `grad`
/// is non-null.
template <typename T, typename Derived>
T head_batch_loss(const OodHead<T>& h, const Eigen::MatrixBase<Derived>& features, std::span<const int> labels,
                  std::type_identity_t<OodHead<T>>* grad) {
    T loss = 0;
    HeadCache<T> c;
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        head_forward(h, features.row(i), c);
        loss += bce(c.p, y);
        if (grad) head_backward(h, c, y, *grad);
    }
    return loss;
}

/// Batched form of head_backward: rows of `x` are samples, `y` holds 0/1.
/// Accumulates the summed BCE gradient into `grad`; returns the probabilities.
template <typename T>
Vec<T> head_batch_grad(const OodHead<T>& h, const Mat<T>& x, const Vec<T>& y, OodHead<T>& grad) {
    Mat<T> z1 = x * h.w1.transpose();
    z1.rowwise() += h.b1.transpose();
    const Mat<T> a1 = z1.cwiseMax(T(0));
    Mat<T> z2 = a1 * h.w2.transpose();
    z2.rowwise() += h.b2.transpose();
    const Mat<T> a2 = z2.cwiseMax(T(0));
    Vec<T> p = a2 * h.w3.row(0).transpose();
    p.array() += h.b3(0);
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = sigmoid(p(i));

    const Vec<T> dz = p - y;
    grad.w3.row(0) += dz.transpose() * a2;
    grad.b3(0) += dz.sum();
    Mat<T> d2 = dz * h.w3.row(0);
    d2 = (z2.array() > T(0)).select(d2, T(0));
    grad.w2.noalias() += d2.transpose() * a1;
    grad.b2 += d2.colwise().sum().transpose();
    Mat<T> d1 = d2 * h.w2;
    d1 = (z1.array() > T(0)).select(d1, T(0));
    grad.w1.noalias() += d1.transpose() * x;
    grad.b1 += d1.colwise().sum().transpose();
    return p;
}

struct HeadConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    int epochs = 5;
    std::uint64_t seed = 0;
    double tau = 0.5;
};

struct HeadEpochRecord {
    int epoch = 0;
    double loss = 0;  // mean per-sample BCE
    double accuracy = 0;
};

/// Stage two on precomputed features: label 1 = normal (main), 0 = anomaly.
/// Every epoch draws equally many samples from both sources, subsampling the
/// larger one.
template <typename T>
std::vector<HeadEpochRecord> train_head_on_features(OodHead<T>& head, const Mat<T>& normal, const Mat<T>& anomaly,
                                                    const HeadConfig& cfg) {
    if (normal.rows() == 0 || anomaly.rows() == 0) {
        throw EmptyDataset("head training needs both normal and anomaly samples");
    }
    if (normal.cols() != head.feature_dim() || anomaly.cols() != head.feature_dim()) {
        throw DimMismatch("head feature dimension");
    }
    head.tau = cfg.tau;
    OodHead<T> velocity = OodHead<T>::zeros(head.feature_dim());
    OodHead<T> grad = OodHead<T>::zeros(head.feature_dim());
    const T lr = static_cast<T>(cfg.learning_rate);
    const T mu = static_cast<T>(cfg.momentum);
    const auto per_source = static_cast<std::size_t>(std::min(normal.rows(), anomaly.rows()));

    std::vector<HeadEpochRecord> trace;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(epoch_seed(cfg.seed, epoch));
        auto draw = [&rng, per_source](Eigen::Index n) {
            std::vector<std::size_t> idx(static_cast<std::size_t>(n));
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            rng.shuffle(idx);
            idx.resize(per_source);
            return idx;
        };
        const auto norm_idx = draw(normal.rows());
        const auto anom_idx = draw(anomaly.rows());
        // (source, row) pairs; source 1 = normal.
        std::vector<std::pair<int, std::size_t>> pool;
        pool.reserve(2 * per_source);
        for (auto i : norm_idx) pool.emplace_back(1, i);
        for (auto i : anom_idx) pool.emplace_back(0, i);
        rng.shuffle(pool);

        double loss_sum = 0;
        std::size_t correct = 0;
        Mat<T> x;
        Vec<T> y;
        for (std::size_t start = 0; start < pool.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(pool.size(), start + cfg.batch_size);
            x.resize(static_cast<Eigen::Index>(end - start), head.feature_dim());
            y.resize(x.rows());
            for (std::size_t k = start; k < end; ++k) {
                const auto [label, row] = pool[k];
                const auto r = static_cast<Eigen::Index>(k - start);
                x.row(r) = label ? normal.row(static_cast<Eigen::Index>(row)) : anomaly.row(static_cast<Eigen::Index>(row));
                y(r) = static_cast<T>(label);
            }
            OodHead<T>::zip([](const char*, auto& g) { g.setZero(); }, grad);
            const Vec<T> p = head_batch_grad(head, x, y, grad);
            for (Eigen::Index r = 0; r < p.size(); ++r) {
                const int label = y(r) > T(0.5);
                loss_sum += static_cast<double>(bce(p(r), label));
                correct += (classify_ood(static_cast<double>(p(r)), cfg.tau) == OodDecision::Normal) == (label == 1);
            }
            const T inv_m = T(1) / static_cast<T>(end - start);
            OodHead<T>::zip(
                [lr, mu, inv_m](const char*, auto& w, auto& v, auto& g) {
                    v = mu * v + inv_m * g;
                    w -= lr * v;
                },
                head, velocity, grad);
            if (!std::isfinite(loss_sum)) {
                throw NonFiniteLoss("head training, epoch " + std::to_string(epoch));
            }
        }
        trace.push_back({epoch, loss_sum / static_cast<double>(pool.size()),
                         static_cast<double>(correct) / static_cast<double>(pool.size())});
    }
    return trace;
}

/// Stage two from images. The backbone is taken by const reference and is
/// never modified; only the head learns.
template <typename T>
std::vector<HeadEpochRecord> train_head(const Backbone<T>& backbone, OodHead<T>& head, const LabeledDataset& main_ds,
                                        const LabeledDataset& anomaly_ds, const HeadConfig& cfg) {
    if (main_ds.size() == 0 || anomaly_ds.size() == 0) {
        throw EmptyDataset("head training needs nonempty main and anomaly datasets");
    }
    const Mat<T> normal = extract_features(backbone, main_ds);
    const Mat<T> anomaly = extract_features(backbone, anomaly_ds);
    return train_head_on_features(head, normal, anomaly, cfg);
}

/// Finite-difference check of the head's summed BCE gradient (double precision).
template <typename Derived>
GradCheckReport head_grad_check(const OodHead<double>& head, const Eigen::MatrixBase<Derived>& features,
                                std::span<const int> labels, double eps, std::size_t per_block, std::uint64_t seed,
                                double analytic_scale = 1.0) {
    OodHead<double> grad = OodHead<double>::zeros(head.feature_dim());
    head_batch_loss(head, features, labels, &grad);
    OodHead<double> probe = head;
    Rng rng(seed);
    GradCheckReport rep;
    OodHead<double>::zip(
        [&](const char*, auto& w, const auto& g) {
            for (std::size_t k = 0; k < per_block; ++k) {
                const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
                const double orig = w.data()[idx];
                auto central = [&](double h) {
                    w.data()[idx] = orig + h;
                    const double up = head_batch_loss(probe, features, labels, nullptr);
                    w.data()[idx] = orig - h;
                    const double down = head_batch_loss(probe, features, labels, nullptr);
                    w.data()[idx] = orig;
                    return (up - down) / (2 * h);
                };
                const double numeric = central(eps);
                if (relative_error(numeric, central(eps / 2), 1e-6) > 1e-4) {
                    ++rep.skipped_kinks;
                    continue;
                }
                rep.max_relative_error =
                    std::max(rep.max_relative_error, relative_error(analytic_scale * g.data()[idx], numeric));
                ++rep.checked;
            }
        },
        probe, grad);
    return rep;
}

} // namespace oodn
