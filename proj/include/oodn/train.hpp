#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "oodn/centerloss.hpp"
#include "oodn/nn.hpp"

namespace oodn {

struct TrainConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    int epochs = 3;
    std::uint64_t seed = 0;
    double lambda = 0.0;       // weight of the center loss
    double center_rate = 0.5;  // alpha

    void validate() const {
        if (lambda < 0) throw ConfigError("lambda must be >= 0");
        if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (center_rate <= 0 || center_rate > 1) throw ConfigError("center_rate must be in (0, 1]");
    }
};

/// Plain SGD with heavy-ball momentum: v <- mu*v + g; w <- w - lr*v.
template <typename T>
struct Sgd {
    Backbone<T> velocity;

    explicit Sgd(const BackboneSpec& spec) : velocity(Backbone<T>::zeros(spec)) {}

    void step(Backbone<T>& model, Backbone<T>& grad, T lr, T momentum) {
        Backbone<T>::zip(
            [lr, momentum](const char*, auto& w, auto& v, auto& g) {
                v = momentum * v + g;
                w -= lr * v;
            },
            model, velocity, grad);
    }
};

template <typename T>
struct BatchEval {
    T softmax_loss = 0;
    T center_loss = 0;
    T total = 0;
    std::size_t correct = 0;
    Mat<T> features;  // m x d
    Mat<T> center_deltas;  // n x d, empty when lambda == 0
};

/// Loss of L = L_S + lambda*L_C on one batch (summed over samples). When
/// `grad` is non-null the parameter gradient of that sum is accumulated into it.
template <typename T>
BatchEval<T> evaluate_batch(const Backbone<T>& model, const Centers<T>& centers, const MiniBatch& batch,
                            std::type_identity_t<T> lambda, std::type_identity_t<Backbone<T>>* grad) {
    const auto m = batch.size();
    std::vector<SampleCache<T>> caches(m);
    Mat<T> logits(static_cast<Eigen::Index>(m), model.spec.n_classes);
    BatchEval<T> r;
    r.features.resize(static_cast<Eigen::Index>(m), model.spec.feature_dim);
    for (std::size_t i = 0; i < m; ++i) {
        forward_sample(model, batch.image(i), caches[i]);
        const auto row = static_cast<Eigen::Index>(i);
        logits.row(row) = caches[i].logits.transpose();
        r.features.row(row) = caches[i].feature.transpose();
        Eigen::Index k;
        caches[i].logits.maxCoeff(&k);
        r.correct += static_cast<int>(k) == batch.labels[i];
    }

    const XentResult<T> xent = softmax_xent<T>(logits, batch.labels);
    r.softmax_loss = xent.loss;

    const bool use_centers = lambda > T(0);
    CenterGrads<T> cg;
    if (use_centers) {
        r.center_loss = center_loss<T>(r.features, batch.labels, centers);
        cg = center_loss_grads<T>(r.features, batch.labels, centers);
        r.center_deltas = cg.deltas;
    }
    r.total = combine(r.softmax_loss, r.center_loss, lambda);

    if (grad) {
        Vec<T> dfeat;
        for (std::size_t i = 0; i < m; ++i) {
            const auto row = static_cast<Eigen::Index>(i);
            const Vec<T> dlogits = xent.grad.row(row).transpose();
            if (use_centers) {
                dfeat = lambda * cg.features.row(row).transpose();
                backward_sample(model, caches[i], dlogits, &dfeat, *grad);
            } else {
                backward_sample(model, caches[i], dlogits, nullptr, *grad);
            }
        }
    }
    return r;
}

struct EpochRecord {
    int epoch = 0;
    double loss = 0;          // mean per-sample combined loss
    double softmax_loss = 0;  // mean per-sample
    double center_loss = 0;   // mean per-sample, raw
    double accuracy = 0;
};

/// Everything stage one mutates.
template <typename T>
struct TrainState {
    Backbone<T> model;
    Centers<T> centers;
    Sgd<T> optimizer;
    int epochs_done = 0;
    std::vector<EpochRecord> history;

    static TrainState fresh(const BackboneSpec& spec, const TrainConfig& cfg) {
        return TrainState{Backbone<T>::init(spec, cfg.seed),
                          Centers<T>::init(spec.n_classes, spec.feature_dim, cfg.seed ^ 0x9e3779b97f4a7c15ULL,
                                           static_cast<T>(cfg.center_rate)),
                          Sgd<T>(spec), 0, {}};
    }
};

inline std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
    return seed * 0x100000001b3ULL + static_cast<std::uint64_t>(epoch) + 1;
}

/// One pass over `ds` in seeded shuffled order. The step uses the batch-mean
/// gradient; centers move after each step when lambda > 0.
template <typename T>
EpochRecord train_epoch(TrainState<T>& st, const LabeledDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.role != DatasetRole::MainTrain) {
        throw ConfigError("train_epoch requires a main-train dataset");
    }
    const T lambda = static_cast<T>(cfg.lambda);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T mu = static_cast<T>(cfg.momentum);
    EpochRecord rec;
    rec.epoch = st.epochs_done;
    double loss_sum = 0, ls_sum = 0, lc_sum = 0;
    std::size_t correct = 0;

    Backbone<T> grad = Backbone<T>::zeros(st.model.spec);
    for (const auto& idx : plan_batches(ds.size(), cfg.batch_size, epoch_seed(cfg.seed, st.epochs_done), true)) {
        const MiniBatch batch = gather(ds, idx);
        Backbone<T>::zip([](const char*, auto& g) { g.setZero(); }, grad);
        const BatchEval<T> ev = evaluate_batch(st.model, st.centers, batch, lambda, &grad);
        if (!std::isfinite(static_cast<double>(ev.total))) {
            throw NonFiniteLoss("epoch " + std::to_string(st.epochs_done) + ", batch starting at sample " +
                                std::to_string(idx.front()) + ": loss = " + std::to_string(ev.total));
        }
        const T inv_m = T(1) / static_cast<T>(batch.size());
        Backbone<T>::zip([inv_m](const char*, auto& g) { g *= inv_m; }, grad);
        st.optimizer.step(st.model, grad, lr, mu);
        if (lambda > T(0)) {
            apply_center_deltas(st.centers, ev.center_deltas);
        }
        loss_sum += ev.total;
        ls_sum += ev.softmax_loss;
        lc_sum += ev.center_loss;
        correct += ev.correct;
    }
    const double n = static_cast<double>(std::max<std::size_t>(ds.size(), 1));
    rec.loss = loss_sum / n;
    rec.softmax_loss = ls_sum / n;
    rec.center_loss = lc_sum / n;
    rec.accuracy = static_cast<double>(correct) / n;
    ++st.epochs_done;
    st.history.push_back(rec);
    return rec;
}

template <typename T>
double accuracy(const Backbone<T>& model, const LabeledDataset& ds) {
    const auto pred = predict(model, ds);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ds.labels[i];
    return ds.size() ? static_cast<double>(ok) / static_cast<double>(ds.size()) : 0.0;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check (run in double precision).
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_relative_error = 0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

/// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the analytic gradient of the summed batch loss against central
/// differences (f(w+eps) - f(w-eps)) / 2eps on `per_block` random entries of
/// every parameter block. Entries whose difference quotient changes when eps
/// is halved straddle a ReLU or max-pool kink and are skipped.
/// `analytic_scale` multiplies the analytic gradient (fault injection).
inline GradCheckReport grad_check(const Backbone<double>& model, const Centers<double>& centers,
                                  const MiniBatch& batch, double lambda, double eps, std::size_t per_block,
                                  std::uint64_t seed, double analytic_scale = 1.0) {
    Backbone<double> grad = Backbone<double>::zeros(model.spec);
    evaluate_batch(model, centers, batch, lambda, &grad);
    Backbone<double> probe = model;
    Rng rng(seed);
    GradCheckReport rep;

    auto loss_at = [&]() { return evaluate_batch(probe, centers, batch, lambda, nullptr).total; };

    Backbone<double>::zip(
        [&](const char*, auto& w, const auto& g) {
            for (std::size_t k = 0; k < per_block; ++k) {
                const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.size())));
                const double orig = w.data()[idx];
                auto central = [&](double h) {
                    w.data()[idx] = orig + h;
                    const double up = loss_at();
                    w.data()[idx] = orig - h;
                    const double down = loss_at();
                    w.data()[idx] = orig;
                    return (up - down) / (2 * h);
                };
                const double numeric = central(eps);
                const double numeric_half = central(eps / 2);
                if (relative_error(numeric, numeric_half, 1e-6) > 1e-4) {
                    ++rep.skipped_kinks;
                    continue;
                }
                const double analytic = analytic_scale * g.data()[idx];
                rep.max_relative_error = std::max(rep.max_relative_error, relative_error(analytic, numeric));
                ++rep.checked;
            }
        },
        probe, grad);
    return rep;
}

} // namespace oodn
