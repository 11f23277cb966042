#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oodn/archive.hpp"
#include "oodn/config.hpp"
#include "oodn/detector.hpp"
#include "oodn/evalkit.hpp"
#include "oodn/head.hpp"
#include "oodn/train.hpp"

namespace oodn {

using Logger = std::function<void(const std::string&)>;

/// Runs `f`, re-raising toolkit errors tagged with the stage they escaped from.
template <typename F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(stage, e);
    }
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

inline BackboneSpec spec_for(const RunConfig& cfg, const LabeledDataset& main_train) {
    if (main_train.rows != main_train.cols) throw ShapeMismatch("images must be square");
    BackboneSpec spec{main_train.rows, main_train.num_classes(), cfg.feature_dim, cfg.feature_tap};
    spec.validate();
    return spec;
}

/// Stage one: trains backbone and centers on the main training split.
inline ModelState train_backbone(const RunConfig& cfg, const LabeledDataset& main_train, double lambda,
                                 std::uint64_t seed, const Logger& log = {}) {
    TrainConfig tc = cfg.train;
    tc.lambda = lambda;
    tc.seed = seed;
    tc.validate();
    auto st = TrainState<float>::fresh(spec_for(cfg, main_train), tc);
    nlohmann::json history = nlohmann::json::array();
    for (int e = 0; e < tc.epochs; ++e) {
        const EpochRecord r = train_epoch(st, main_train, tc);
        history.push_back({{"epoch", r.epoch},
                           {"loss", r.loss},
                           {"softmax_loss", r.softmax_loss},
                           {"center_loss", r.center_loss},
                           {"accuracy", r.accuracy}});
        if (log) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "lambda=%g seed=%llu epoch %d: loss %.4f (L_S %.4f, L_C %.4f) acc %.4f",
                          lambda, static_cast<unsigned long long>(seed), r.epoch, r.loss, r.softmax_loss,
                          r.center_loss, r.accuracy);
            log(buf);
        }
    }
    ModelState m;
    m.backbone = st.model;
    m.centers = st.centers;
    m.lambda = lambda;
    m.seed = seed;
    m.q = cfg.q;
    m.tau = cfg.head.tau;
    m.provenance = {{"train",
                     {{"learning_rate", tc.learning_rate},
                      {"momentum", tc.momentum},
                      {"batch_size", tc.batch_size},
                      {"epochs", tc.epochs},
                      {"center_rate", tc.center_rate},
                      {"samples", main_train.size()},
                      {"history", history}}}};
    return m;
}

/// Semi-supervised calibration. Only in-distribution training data is used.
inline void calibrate_model(ModelState& m, const LabeledDataset& main_train, double q) {
    const Mat<float> feats = extract_features(m.backbone, main_train);
    m.detector = fit_detector(feats, main_train.labels, m.backbone.spec.n_classes, q);
    m.q = q;
}

/// Stage two: the head learns normal (main) vs anomaly on frozen features.
inline void train_ood_head(ModelState& m, const LabeledDataset& main_train, const LabeledDataset& anomaly_train,
                           HeadConfig hc, std::uint64_t seed) {
    hc.seed = seed;
    OodHead<float> head = OodHead<float>::init(m.backbone.spec.feature_dim, seed ^ 0x5bd1e995ULL);
    const auto trace = train_head(m.backbone, head, main_train, anomaly_train, hc);
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : trace) hist.push_back({{"epoch", r.epoch}, {"loss", r.loss}, {"accuracy", r.accuracy}});
    m.provenance["head"] = {{"learning_rate", hc.learning_rate},
                            {"momentum", hc.momentum},
                            {"batch_size", hc.batch_size},
                            {"epochs", hc.epochs},
                            {"normal_samples", main_train.size()},
                            {"anomaly_samples", anomaly_train.size()},
                            {"history", hist}};
    m.head = std::move(head);
    m.tau = hc.tau;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct OodEval {
    std::vector<double> scores;
    std::vector<int> predicted_ood;
    RocCurve roc;
    double f1 = 0;
    double accuracy = 0;
};

struct Evaluation {
    double classification_f1 = 0;
    double classification_accuracy = 0;
    std::vector<int> is_ood;  // main_test rows first, then anomaly_test rows
    OodEval mahalanobis;
    std::optional<OodEval> head;
    Mat<double> features;     // test features in the same row order
    std::vector<int> labels;  // class label (main) or original anomaly label
    double id_nearest_centroid = 0;
    double ood_nearest_centroid = 0;
};

namespace detail {

inline OodEval score_ood(std::vector<double> scores, std::vector<int> predicted, const std::vector<int>& is_ood,
                         ScoreOrientation orient) {
    OodEval e;
    e.roc = roc(scores, is_ood, orient);
    const auto cm = confusion(is_ood, predicted, 2);
    e.f1 = f1(cm, F1Mode::BinaryPositive, 1);
    e.accuracy = cm.accuracy();
    e.scores = std::move(scores);
    e.predicted_ood = std::move(predicted);
    return e;
}

} // namespace detail

/// Evaluates a (possibly reloaded) model on the main and anomaly test splits.
inline Evaluation evaluate_model(const ModelState& m, const LabeledDataset& main_test,
                                 const LabeledDataset& anomaly_test) {
    if (!m.detector || !m.detector->calibrated()) throw NotCalibrated("model has no calibrated detector");
    const DetectorModel& det = *m.detector;
    const int n = m.backbone.spec.n_classes;
    for (int y : main_test.labels) {
        if (y < 0 || y >= n) throw LabelOutOfRange("main test label " + std::to_string(y) + " outside classifier range");
    }
    Evaluation ev;
    const Mat<float> fm = extract_features(m.backbone, main_test);
    const Mat<float> fa = extract_features(m.backbone, anomaly_test);

    // Classification on the main test split.
    Mat<float> logits = fm * m.backbone.cls_w.transpose();
    logits.rowwise() += m.backbone.cls_b.transpose();
    std::vector<int> pred(main_test.size());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index k;
        logits.row(i).maxCoeff(&k);
        pred[static_cast<std::size_t>(i)] = static_cast<int>(k);
    }
    const auto cm = confusion(main_test.labels, pred, n);
    ev.classification_f1 = f1(cm, F1Mode::Macro);
    ev.classification_accuracy = cm.accuracy();

    ev.features.resize(fm.rows() + fa.rows(), fm.cols());
    ev.features << fm.cast<double>(), fa.cast<double>();
    ev.is_ood.assign(main_test.size(), 0);
    ev.is_ood.insert(ev.is_ood.end(), anomaly_test.size(), 1);
    ev.labels = main_test.labels;
    ev.labels.insert(ev.labels.end(), anomaly_test.labels.begin(), anomaly_test.labels.end());

    // Semi-supervised: min class distance, criterion with calibrated thresholds.
    const Mat<double> dist = class_distances(det.stats, ev.features);
    std::vector<double> score(static_cast<std::size_t>(dist.rows()));
    std::vector<int> flagged(score.size());
    for (Eigen::Index i = 0; i < dist.rows(); ++i) {
        score[static_cast<std::size_t>(i)] = dist.row(i).minCoeff();
        bool normal = false;
        for (Eigen::Index y = 0; y < dist.cols(); ++y) normal = normal || dist(i, y) <= det.thresholds[static_cast<std::size_t>(y)];
        flagged[static_cast<std::size_t>(i)] = !normal;
    }
    ev.mahalanobis = detail::score_ood(std::move(score), std::move(flagged), ev.is_ood, ScoreOrientation::HigherIsOod);

    if (m.head) {
        std::vector<double> p(ev.is_ood.size());
        std::vector<int> ood(p.size());
        HeadCache<float> cache;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            const float prob = i < main_test.size() ? head_forward(*m.head, fm.row(r), cache)
                                                    : head_forward(*m.head, fa.row(r - fm.rows()), cache);
            p[i] = static_cast<double>(prob);
            ood[i] = classify_ood(p[i], m.head->tau) == OodDecision::Ood;
        }
        ev.head = detail::score_ood(std::move(p), std::move(ood), ev.is_ood, ScoreOrientation::LowerIsOod);
    }

    Mat<double> means(n, fm.cols());
    for (int y = 0; y < n; ++y) means.row(y) = det.stats[static_cast<std::size_t>(y)].mean.transpose();
    ev.id_nearest_centroid = mean_nearest_centroid_distance(fm, means);
    ev.ood_nearest_centroid = mean_nearest_centroid_distance(fa, means);
    return ev;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricRow {
    double lambda = 0;
    std::uint64_t seed = 0;
    std::string method;  // classification | mahalanobis | head
    double f1 = 0;
    std::optional<double> auc;
    double accuracy = 0;
};

struct GeometryRow {
    double lambda = 0;
    std::uint64_t seed = 0;
    double id_mean_distance = 0;
    double ood_mean_distance = 0;
};

inline std::vector<MetricRow> metric_rows(const Evaluation& ev, double lambda, std::uint64_t seed) {
    std::vector<MetricRow> rows;
    rows.push_back({lambda, seed, "classification", ev.classification_f1, std::nullopt, ev.classification_accuracy});
    rows.push_back({lambda, seed, "mahalanobis", ev.mahalanobis.f1, ev.mahalanobis.roc.auc, ev.mahalanobis.accuracy});
    if (ev.head) rows.push_back({lambda, seed, "head", ev.head->f1, ev.head->roc.auc, ev.head->accuracy});
    return rows;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw DegenerateInput("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct SummaryRow {
    double lambda = 0;
    std::string method;
    double f1 = 0;
    std::optional<double> auc;
    double accuracy = 0;
    std::size_t seeds = 0;
};

/// Median over seeds for every (lambda, method), in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows) {
    std::vector<SummaryRow> out;
    for (const auto& r : rows) {
        const bool seen = std::any_of(out.begin(), out.end(),
                                      [&](const SummaryRow& s) { return s.lambda == r.lambda && s.method == r.method; });
        if (seen) continue;
        std::vector<double> f, a, acc;
        for (const auto& x : rows) {
            if (x.lambda != r.lambda || x.method != r.method) continue;
            f.push_back(x.f1);
            acc.push_back(x.accuracy);
            if (x.auc) a.push_back(*x.auc);
        }
        out.push_back({r.lambda, r.method, median(f), a.empty() ? std::nullopt : std::optional<double>(median(a)),
                       median(acc), f.size()});
    }
    return out;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    auto out = open_csv(path);
    out << "lambda,seed,method,f1,auc,accuracy\n";
    for (const auto& r : rows) {
        out << fmt_num(r.lambda) << ',' << r.seed << ',' << r.method << ',' << fmt_num(r.f1) << ','
            << (r.auc ? fmt_num(*r.auc) : "") << ',' << fmt_num(r.accuracy) << '\n';
    }
}

inline void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
    auto out = open_csv(path);
    out << "lambda,method,median_f1,median_auc,median_accuracy,seeds\n";
    for (const auto& r : rows) {
        out << fmt_num(r.lambda) << ',' << r.method << ',' << fmt_num(r.f1) << ',' << (r.auc ? fmt_num(*r.auc) : "")
            << ',' << fmt_num(r.accuracy) << ',' << r.seeds << '\n';
    }
}

inline void write_geometry_csv(const std::filesystem::path& path, const std::vector<GeometryRow>& rows) {
    auto out = open_csv(path);
    out << "lambda,seed,id_mean_nearest_centroid,ood_mean_nearest_centroid\n";
    for (const auto& r : rows) {
        out << fmt_num(r.lambda) << ',' << r.seed << ',' << fmt_num(r.id_mean_distance) << ','
            << fmt_num(r.ood_mean_distance) << '\n';
    }
}

/// d rows of (pc1, pc2) at full precision.
inline void write_components_csv(const std::filesystem::path& path, const Mat<double>& components) {
    auto out = open_csv(path);
    out << "pc1,pc2\n";
    char buf[64];
    for (Eigen::Index i = 0; i < components.rows(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", components(i, 0), components(i, 1));
        out << buf;
    }
}

inline std::string cell_tag(double lambda, std::uint64_t seed) {
    return "lambda" + fmt_num(lambda) + "_seed" + std::to_string(seed);
}

/// ROC, projection, centroid and component CSVs for one evaluated model.
inline void write_cell_reports(const std::filesystem::path& dir, const std::string& tag, const ModelState& m,
                               const Evaluation& ev, bool projection) {
    write_roc_csv(dir / ("roc_mahalanobis_" + tag + ".csv"), ev.mahalanobis.roc);
    if (ev.head) write_roc_csv(dir / ("roc_head_" + tag + ".csv"), ev.head->roc);
    if (!projection) return;
    const Pca2 p = pca2(ev.features);
    write_projection_csv(dir / ("projection_" + tag + ".csv"), p.projections, ev.labels, ev.is_ood);
    const int n = m.backbone.spec.n_classes;
    Mat<double> means(n, ev.features.cols());
    for (int y = 0; y < n; ++y) means.row(y) = m.detector->stats[static_cast<std::size_t>(y)].mean.transpose();
    write_centroid_csv(dir / ("centroids_" + tag + ".csv"), p.project(means));
    write_components_csv(dir / ("pca_components_" + tag + ".csv"), p.components);
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

struct ExperimentReport {
    std::vector<MetricRow> metrics;
    std::vector<SummaryRow> summary;
    std::vector<GeometryRow> geometry;
    std::vector<std::filesystem::path> archives;
    std::vector<double> cell_seconds;  // wall time per (lambda, seed), sweep order
};

/// Sweeps every (lambda, seed): train, calibrate, train the head when anomaly
/// training data exists, evaluate, and write reports under cfg.output_dir.
/// Anomaly data is loaded only after calibration of the first cell.
inline ExperimentReport run_experiment(const RunConfig& cfg, const Logger& log = {}) {
    const LabeledDataset main_train = staged("load", [&] { return load_source(cfg.main_train, DatasetRole::MainTrain); });
    const LabeledDataset main_test = staged("load", [&] { return load_source(cfg.main_test, DatasetRole::MainTest); });
    std::optional<LabeledDataset> anomaly_train, anomaly_test;
    staged("load", [&] {
        if (main_test.rows != main_train.rows || main_test.cols != main_train.cols) {
            throw ShapeMismatch("main test images differ in shape from main train images");
        }
    });

    const auto& dir = cfg.output_dir;
    std::filesystem::create_directories(dir);
    ExperimentReport rep;
    auto train_log = open_csv(dir / "train_log.csv");
    train_log << "lambda,seed,epoch,loss,softmax_loss,center_loss,accuracy\n";

    for (double lambda : cfg.lambdas) {
        for (std::uint64_t seed : cfg.seeds) {
            const std::string tag = cell_tag(lambda, seed);
            const auto started = std::chrono::steady_clock::now();
            ModelState m = staged("train", [&] { return train_backbone(cfg, main_train, lambda, seed, log); });
            for (const auto& h : m.provenance["train"]["history"]) {
                train_log << fmt_num(lambda) << ',' << seed << ',' << h["epoch"].get<int>() << ','
                          << fmt_num(h["loss"].get<double>()) << ',' << fmt_num(h["softmax_loss"].get<double>()) << ','
                          << fmt_num(h["center_loss"].get<double>()) << ',' << fmt_num(h["accuracy"].get<double>()) << '\n';
            }
            staged("calibrate", [&] { calibrate_model(m, main_train, cfg.q); });

            if (cfg.anomaly_train) {
                if (!anomaly_train) {
                    anomaly_train = staged("load", [&] { return load_source(*cfg.anomaly_train, DatasetRole::Anomaly); });
                }
                staged("train-head", [&] { train_ood_head(m, main_train, *anomaly_train, cfg.head, seed); });
            }
            if (!anomaly_test) {
                anomaly_test = staged("load", [&] { return load_source(cfg.anomaly_test, DatasetRole::Anomaly); });
            }
            const Evaluation ev = staged("evaluate", [&] { return evaluate_model(m, main_test, *anomaly_test); });
            for (auto& r : metric_rows(ev, lambda, seed)) rep.metrics.push_back(std::move(r));
            rep.geometry.push_back({lambda, seed, ev.id_nearest_centroid, ev.ood_nearest_centroid});
            staged("report", [&] { write_cell_reports(dir, tag, m, ev, cfg.export_projection); });
            rep.cell_seconds.push_back(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
            if (cfg.save_archives) {
                const auto path = dir / ("model_" + tag + ".oodn");
                staged("save", [&] { save_model(path, m); });
                rep.archives.push_back(path);
            }
            if (log) {
                char buf[200];
                std::snprintf(buf, sizeof buf, "%s: classification F1 %.4f | mahalanobis F1 %.4f AUC %.4f%s", tag.c_str(),
                              ev.classification_f1, ev.mahalanobis.f1, ev.mahalanobis.roc.auc,
                              ev.head ? (" | head F1 " + fmt_num(ev.head->f1) + " AUC " + fmt_num(ev.head->roc.auc)).c_str() : "");
                log(buf);
            }
        }
    }
    rep.summary = summarize(rep.metrics);
    staged("report", [&] {
        write_metrics_csv(dir / "metrics.csv", rep.metrics);
        write_summary_csv(dir / "summary.csv", rep.summary);
        write_geometry_csv(dir / "geometry.csv", rep.geometry);
    });
    return rep;
}

} // namespace oodn
