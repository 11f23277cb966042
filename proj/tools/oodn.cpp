// oodn: train, calibrate and evaluate deep-feature OOD detectors.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "oodn/oodn.hpp"

namespace fs = std::filesystem;
using namespace oodn;

namespace {

struct Options {
    std::string config;
    std::optional<double> lambda;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string data_dir;
    std::string model;
    std::string image_file;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Options& o, bool config_required = true) {
    auto* c = cmd->add_option("--config", o.config, "run configuration (JSON)");
    if (config_required) c->required();
    cmd->add_option("--lambda", o.lambda, "center-loss weight; replaces the configured list");
    cmd->add_option("--seed", o.seed, "seed; replaces the configured list");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--data-dir", o.data_dir, "directory that relative dataset paths resolve against");
    cmd->add_option("--model", o.model, "model archive (default <out>/model.oodn)");
    cmd->add_flag("-q,--quiet", o.quiet, "no progress output");
}

RunConfig load_config(const Options& o) {
    RunConfig cfg = load_run_config(o.config, o.data_dir);
    if (o.lambda) {
        if (!(*o.lambda >= 0)) throw ConfigError("--lambda must be >= 0");
        cfg.lambdas = {*o.lambda};
    }
    if (o.seed) cfg.seeds = {*o.seed};
    if (!o.out.empty()) cfg.output_dir = o.out;
    return cfg;
}

fs::path model_path(const Options& o, const RunConfig* cfg) {
    if (!o.model.empty()) return o.model;
    const fs::path dir = !o.out.empty() ? fs::path(o.out) : cfg ? cfg->output_dir : fs::path(".");
    return dir / "model.oodn";
}

Logger logger(const Options& o) {
    if (o.quiet) return {};
    return [](const std::string& s) { std::clog << s << '\n'; };
}

void print_eval(const Evaluation& ev) {
    std::printf("classification  macro-F1 %.4f  accuracy %.4f\n", ev.classification_f1, ev.classification_accuracy);
    std::printf("mahalanobis     F1 %.4f  AUC %.4f  accuracy %.4f\n", ev.mahalanobis.f1, ev.mahalanobis.roc.auc,
                ev.mahalanobis.accuracy);
    if (ev.head) {
        std::printf("head            F1 %.4f  AUC %.4f  accuracy %.4f\n", ev.head->f1, ev.head->roc.auc,
                    ev.head->accuracy);
    }
    std::printf("nearest-centroid distance  ID %.4f  OOD %.4f\n", ev.id_nearest_centroid, ev.ood_nearest_centroid);
}

int cmd_train(const Options& o) {
    const RunConfig cfg = load_config(o);
    const auto main_train = staged("load", [&] { return load_source(cfg.main_train, DatasetRole::MainTrain); });
    const ModelState m = staged("train", [&] {
        return train_backbone(cfg, main_train, cfg.lambdas.front(), cfg.seeds.front(), logger(o));
    });
    const auto path = model_path(o, &cfg);
    save_model(path, m);
    std::printf("wrote %s\n", path.string().c_str());
    return 0;
}

int cmd_calibrate(const Options& o) {
    const RunConfig cfg = load_config(o);
    const auto path = model_path(o, &cfg);
    ModelState m = load_model(path);
    const auto main_train = staged("load", [&] { return load_source(cfg.main_train, DatasetRole::MainTrain); });
    staged("calibrate", [&] { calibrate_model(m, main_train, cfg.q); });
    save_model(path, m);
    std::printf("calibrated %zu classes at q=%g; thresholds:", m.detector->stats.size(), m.q);
    for (double t : m.detector->thresholds) std::printf(" %.4f", t);
    std::printf("\nwrote %s\n", path.string().c_str());
    return 0;
}

int cmd_train_head(const Options& o) {
    const RunConfig cfg = load_config(o);
    if (!cfg.anomaly_train) throw ConfigError("train-head needs datasets.anomaly_train");
    const auto path = model_path(o, &cfg);
    ModelState m = load_model(path);
    const auto main_train = staged("load", [&] { return load_source(cfg.main_train, DatasetRole::MainTrain); });
    const auto anomaly = staged("load", [&] { return load_source(*cfg.anomaly_train, DatasetRole::Anomaly); });
    staged("train-head", [&] { train_ood_head(m, main_train, anomaly, cfg.head, m.seed); });
    if (!o.quiet) {
        for (const auto& h : m.provenance["head"]["history"]) {
            std::clog << "head epoch " << h["epoch"].get<int>() << ": loss " << h["loss"].get<double>() << " acc "
                      << h["accuracy"].get<double>() << '\n';
        }
    }
    save_model(path, m);
    std::printf("wrote %s\n", path.string().c_str());
    return 0;
}

int cmd_eval(const Options& o) {
    const RunConfig cfg = load_config(o);
    const ModelState m = load_model(model_path(o, &cfg));
    const auto main_test = staged("load", [&] { return load_source(cfg.main_test, DatasetRole::MainTest); });
    const auto anomaly = staged("load", [&] { return load_source(cfg.anomaly_test, DatasetRole::Anomaly); });
    const Evaluation ev = staged("evaluate", [&] { return evaluate_model(m, main_test, anomaly); });
    print_eval(ev);
    const std::string tag = cell_tag(m.lambda, m.seed);
    write_metrics_csv(cfg.output_dir / ("eval_" + tag + ".csv"), metric_rows(ev, m.lambda, m.seed));
    write_cell_reports(cfg.output_dir, tag, m, ev, cfg.export_projection);
    return 0;
}

/// Accepts an IDX image file (any count) or one raw side*side u8 image.
LabeledDataset read_images(const fs::path& path, int side) {
    const auto bytes = read_file_bytes(path);
    LabeledDataset ds;
    if (bytes.size() == static_cast<std::size_t>(side) * static_cast<std::size_t>(side)) {
        ds.rows = ds.cols = side;
        ds.pixels = normalize(bytes);
        ds.labels = {0};
    } else {
        const auto content = parse_idx(bytes);
        const auto* img = std::get_if<IdxImages>(&content);
        if (!img) throw UnsupportedMagic("'" + path.string() + "' holds labels, not images");
        ds.rows = static_cast<int>(img->rows);
        ds.cols = static_cast<int>(img->cols);
        ds.pixels = normalize(img->pixels);
        ds.labels.assign(img->count, 0);
    }
    if (ds.rows != side || ds.cols != side) {
        throw ShapeMismatch("images are " + std::to_string(ds.rows) + "x" + std::to_string(ds.cols) +
                            ", model expects " + std::to_string(side) + "x" + std::to_string(side));
    }
    return ds;
}

int cmd_score(const Options& o) {
    std::optional<RunConfig> cfg;
    if (!o.config.empty()) cfg = load_config(o);
    const ModelState m = load_model(model_path(o, cfg ? &*cfg : nullptr));
    if (!m.detector || !m.detector->calibrated()) throw NotCalibrated("archive has no calibrated detector");
    const auto ds = read_images(o.image_file, m.backbone.spec.side);
    const Mat<float> feats = extract_features(m.backbone, ds);
    const auto pred = predict(m.backbone, ds);
    std::printf("index,predicted_class,anomaly_score,mahalanobis%s\n", m.head ? ",head_p,head" : "");
    for (Eigen::Index i = 0; i < feats.rows(); ++i) {
        const auto x = feats.row(i).cast<double>();
        std::printf("%lld,%d,%s,%s", static_cast<long long>(i), pred[static_cast<std::size_t>(i)],
                    fmt_num(anomaly_score(*m.detector, x)).c_str(), is_normal(*m.detector, x) ? "normal" : "ood");
        if (m.head) {
            const double p = head_forward(*m.head, feats.row(i));
            std::printf(",%s,%s", fmt_num(p).c_str(),
                        classify_ood(p, m.head->tau) == OodDecision::Normal ? "normal" : "ood");
        }
        std::printf("\n");
    }
    return 0;
}

void write_features_csv(const fs::path& path, const Evaluation& ev) {
    auto out = open_csv(path);
    out << "label,is_ood";
    for (Eigen::Index j = 0; j < ev.features.cols(); ++j) out << ",f" << j;
    out << '\n';
    for (Eigen::Index i = 0; i < ev.features.rows(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        out << ev.labels[k] << ',' << ev.is_ood[k];
        for (Eigen::Index j = 0; j < ev.features.cols(); ++j) out << ',' << fmt_num(ev.features(i, j));
        out << '\n';
    }
}

int cmd_export_features(const Options& o) {
    RunConfig cfg = load_config(o);
    const ModelState m = load_model(model_path(o, &cfg));
    const auto main_test = staged("load", [&] { return load_source(cfg.main_test, DatasetRole::MainTest); });
    const auto anomaly = staged("load", [&] { return load_source(cfg.anomaly_test, DatasetRole::Anomaly); });
    const Evaluation ev = staged("evaluate", [&] { return evaluate_model(m, main_test, anomaly); });
    const std::string tag = cell_tag(m.lambda, m.seed);
    write_features_csv(cfg.output_dir / ("features_" + tag + ".csv"), ev);
    write_cell_reports(cfg.output_dir, tag, m, ev, true);
    std::printf("wrote %lld feature rows to %s\n", static_cast<long long>(ev.features.rows()),
                (cfg.output_dir / ("features_" + tag + ".csv")).string().c_str());
    return 0;
}

int cmd_run_experiment(const Options& o) {
    const RunConfig cfg = load_config(o);
    const auto rep = run_experiment(cfg, logger(o));
    std::printf("%-8s %-15s %-9s %-9s %-9s\n", "lambda", "method", "F1", "AUC", "accuracy");
    for (const auto& s : rep.summary) {
        char auc[16] = "-";
        if (s.auc) std::snprintf(auc, sizeof auc, "%.4f", *s.auc);
        std::printf("%-8g %-15s %-9.4f %-9s %-9.4f\n", s.lambda, s.method.c_str(), s.f1, auc, s.accuracy);
    }
    std::printf("reports in %s\n", cfg.output_dir.string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep-feature out-of-distribution detection toolkit"};
    app.require_subcommand(1);
    Options o;
    struct Cmd {
        const char* name;
        const char* help;
        int (*run)(const Options&);
    };
    const Cmd cmds[] = {
        {"train", "train backbone and centers on the main training split", cmd_train},
        {"calibrate", "fit class statistics and per-class thresholds", cmd_calibrate},
        {"train-head", "train the supervised OOD head on frozen features", cmd_train_head},
        {"eval", "evaluate an archive on the test splits", cmd_eval},
        {"score", "score images with an archive", cmd_score},
        {"export-features", "write test features and their 2-d projection", cmd_export_features},
        {"run-experiment", "full sweep over lambdas and seeds", cmd_run_experiment},
    };
    int (*chosen)(const Options&) = nullptr;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        const bool is_score = std::string(c.name) == "score";
        add_common(sub, o, !is_score);
        if (is_score) sub->add_option("image-file", o.image_file, "IDX image file or raw image")->required();
        sub->callback([&chosen, run = c.run] { chosen = run; });
    }
    CLI11_PARSE(app, argc, argv);
    try {
        return chosen(o);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
    }
    return 1;
}
