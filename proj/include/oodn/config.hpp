#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "oodn/data.hpp"
#include "oodn/errors.hpp"
#include "oodn/head.hpp"
#include "oodn/nn.hpp"
#include "oodn/train.hpp"

namespace oodn {

struct SyntheticSpec {
    int n_classes = 2;
    int per_class = 50;
    int side = 28;
    double separation = 6.0;
    std::uint64_t seed = 0;
};

/// One dataset role: either an IDX image/label pair or a synthetic generator,
/// optionally restricted to a class subset.
struct DatasetSource {
    std::filesystem::path images;
    std::filesystem::path labels;
    std::optional<SyntheticSpec> synthetic;
    std::set<int> keep;  // empty = all classes
    bool relabel = false;
};

struct RunConfig {
    DatasetSource main_train;
    DatasetSource main_test;
    std::optional<DatasetSource> anomaly_train;
    DatasetSource anomaly_test;

    TrainConfig train;
    FeatureTap feature_tap = FeatureTap::PostRelu;
    int feature_dim = 84;
    HeadConfig head;

    std::vector<double> lambdas = {0.0, 0.1, 1.0};
    std::vector<std::uint64_t> seeds = {0};
    double q = 0.975;
    std::filesystem::path output_dir = "out";
    bool export_projection = true;
    bool save_archives = true;
};

namespace detail {

/// Rejects any key of `obj` not listed in `allowed`.
inline void check_keys(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError("'" + where + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename V>
void read_opt(const nlohmann::json& obj, const char* key, V& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("bad value for '" + where + "." + key + "': " + obj.at(key).dump());
    }
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline DatasetSource parse_source(const nlohmann::json& j, const std::string& where,
                                  const std::filesystem::path& data_dir) {
    check_keys(j, where, {"images", "labels", "synthetic", "keep", "relabel"});
    DatasetSource src;
    const bool has_files = j.contains("images") || j.contains("labels");
    if (has_files == j.contains("synthetic")) {
        throw ConfigError(where + " needs exactly one of {images+labels, synthetic}");
    }
    if (has_files) {
        if (!j.contains("images") || !j.contains("labels")) {
            throw ConfigError(where + " needs both 'images' and 'labels'");
        }
        src.images = resolve(data_dir, j.at("images").get<std::string>());
        src.labels = resolve(data_dir, j.at("labels").get<std::string>());
    } else {
        const auto& s = j.at("synthetic");
        const std::string sw = where + ".synthetic";
        check_keys(s, sw, {"n_classes", "per_class", "side", "separation", "seed"});
        SyntheticSpec spec;
        read_opt(s, "n_classes", spec.n_classes, sw);
        read_opt(s, "per_class", spec.per_class, sw);
        read_opt(s, "side", spec.side, sw);
        read_opt(s, "separation", spec.separation, sw);
        read_opt(s, "seed", spec.seed, sw);
        if (spec.n_classes < 2 || spec.per_class < 1) throw ConfigError(sw + " needs n_classes >= 2, per_class >= 1");
        src.synthetic = spec;
    }
    read_opt(j, "keep", src.keep, where);
    read_opt(j, "relabel", src.relabel, where);
    return src;
}

} // namespace detail

/// Parses a RunConfig document. Relative dataset paths resolve against
/// `data_dir` from the document (itself relative to `base_dir`), or
/// `base_dir` when absent. Unknown keys anywhere are errors.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
    using detail::read_opt;
    detail::check_keys(j, "config",
                       {"data_dir", "datasets", "train", "head", "lambdas", "seeds", "q", "output_dir",
                        "export_projection", "save_archives"});
    RunConfig cfg;
    std::filesystem::path data_dir = base_dir;
    if (j.contains("data_dir")) data_dir = detail::resolve(base_dir, j.at("data_dir").get<std::string>());

    if (!j.contains("datasets")) throw ConfigError("config is missing 'datasets'");
    const auto& ds = j.at("datasets");
    detail::check_keys(ds, "datasets", {"main_train", "main_test", "anomaly_train", "anomaly_test"});
    for (const char* req : {"main_train", "main_test", "anomaly_test"}) {
        if (!ds.contains(req)) throw ConfigError(std::string("datasets is missing '") + req + "'");
    }
    cfg.main_train = detail::parse_source(ds.at("main_train"), "datasets.main_train", data_dir);
    cfg.main_test = detail::parse_source(ds.at("main_test"), "datasets.main_test", data_dir);
    cfg.anomaly_test = detail::parse_source(ds.at("anomaly_test"), "datasets.anomaly_test", data_dir);
    if (ds.contains("anomaly_train")) {
        cfg.anomaly_train = detail::parse_source(ds.at("anomaly_train"), "datasets.anomaly_train", data_dir);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, "train",
                           {"learning_rate", "momentum", "batch_size", "epochs", "center_rate", "feature_tap",
                            "feature_dim"});
        read_opt(t, "learning_rate", cfg.train.learning_rate, "train");
        read_opt(t, "momentum", cfg.train.momentum, "train");
        read_opt(t, "batch_size", cfg.train.batch_size, "train");
        read_opt(t, "epochs", cfg.train.epochs, "train");
        read_opt(t, "center_rate", cfg.train.center_rate, "train");
        read_opt(t, "feature_dim", cfg.feature_dim, "train");
        if (t.contains("feature_tap")) cfg.feature_tap = parse_feature_tap(t.at("feature_tap").get<std::string>());
    }
    if (j.contains("head")) {
        const auto& h = j.at("head");
        detail::check_keys(h, "head", {"learning_rate", "momentum", "batch_size", "epochs", "tau"});
        read_opt(h, "learning_rate", cfg.head.learning_rate, "head");
        read_opt(h, "momentum", cfg.head.momentum, "head");
        read_opt(h, "batch_size", cfg.head.batch_size, "head");
        read_opt(h, "epochs", cfg.head.epochs, "head");
        read_opt(h, "tau", cfg.head.tau, "head");
    }
    read_opt(j, "lambdas", cfg.lambdas, "config");
    read_opt(j, "seeds", cfg.seeds, "config");
    read_opt(j, "q", cfg.q, "config");
    read_opt(j, "export_projection", cfg.export_projection, "config");
    read_opt(j, "save_archives", cfg.save_archives, "config");
    if (j.contains("output_dir")) cfg.output_dir = detail::resolve(base_dir, j.at("output_dir").get<std::string>());

    if (cfg.lambdas.empty()) throw ConfigError("lambdas must be nonempty");
    for (double l : cfg.lambdas)
        if (!(l >= 0)) throw ConfigError("lambda values must be >= 0");
    if (cfg.seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (!(cfg.q > 0 && cfg.q <= 1)) throw ConfigError("q must lie in (0, 1]");
    if (cfg.head.batch_size == 0 || cfg.head.epochs < 0) throw ConfigError("invalid head settings");
    if (cfg.feature_dim < 1) throw ConfigError("feature_dim must be positive");
    cfg.train.validate();
    return cfg;
}

/// `data_dir` (when nonempty) replaces the document's data directory.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::filesystem::path& data_dir = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    if (!data_dir.empty()) {
        if (!j.is_object()) throw ConfigError("'config' must be an object");
        j["data_dir"] = std::filesystem::absolute(data_dir).string();
    }
    return parse_run_config(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

/// Loads (or generates) one dataset role and applies its class subset.
inline LabeledDataset load_source(const DatasetSource& src, DatasetRole role) {
    LabeledDataset ds;
    if (src.synthetic) {
        const auto& s = *src.synthetic;
        ds = synth_blobs(s.n_classes, s.per_class, s.side, s.separation, s.seed);
        ds.role = role;
    } else {
        ds = load_idx_dataset(src.images, src.labels, role);
    }
    if (!src.keep.empty()) ds = split_classes(ds, src.keep, src.relabel);
    return ds;
}

} // namespace oodn
