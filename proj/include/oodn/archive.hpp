#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "oodn/centerloss.hpp"
#include "oodn/data.hpp"
#include "oodn/detector.hpp"
#include "oodn/head.hpp"
#include "oodn/nn.hpp"

namespace oodn {

// ---------------------------------------------------------------------------
// Model archive
//
//   "OODN" | u32 LE version | u64 LE header length | JSON header | blobs
//
// Blobs are concatenated in the order listed under header["blobs"], each
// little-endian and row-major. Network parameters are f32; detector
// statistics are f64 so that a reloaded detector is bit-identical.
// ---------------------------------------------------------------------------

inline constexpr char kArchiveMagic[4] = {'O', 'O', 'D', 'N'};
inline constexpr std::uint32_t kArchiveVersion = 1;

/// Everything a trained pipeline carries. Components other than the backbone
/// are optional; the header records which ones are present.
struct ModelState {
    Backbone<float> backbone;
    std::optional<Centers<float>> centers;
    std::optional<DetectorModel> detector;
    std::optional<OodHead<float>> head;

    double lambda = 0;
    double q = 0.975;
    double tau = 0.5;
    std::uint64_t seed = 0;
    nlohmann::json provenance = nlohmann::json::object();
};

namespace detail {

template <typename U>
void append_le(std::vector<std::uint8_t>& out, U bits) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <typename U>
U read_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

class BlobWriter {
public:
    template <typename Derived>
    void add_f32(const std::string& name, const Eigen::MatrixBase<Derived>& m) {
        index_.push_back({{"name", name}, {"dtype", "f32"}, {"shape", {m.rows(), m.cols()}}});
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                append_le(payload_, std::bit_cast<std::uint32_t>(static_cast<float>(m(i, j))));
    }

    void add_f64(const std::string& name, const std::vector<double>& v) {
        index_.push_back({{"name", name}, {"dtype", "f64"}, {"shape", {v.size()}}});
        for (double x : v) append_le(payload_, std::bit_cast<std::uint64_t>(x));
    }

    nlohmann::json& index() { return index_; }
    const std::vector<std::uint8_t>& payload() const { return payload_; }

private:
    nlohmann::json index_ = nlohmann::json::array();
    std::vector<std::uint8_t> payload_;
};

inline std::size_t blob_bytes(const nlohmann::json& entry) {
    std::size_t n = 1;
    for (const auto& d : entry.at("shape")) n *= d.get<std::size_t>();
    const std::string dtype = entry.at("dtype");
    if (dtype == "f32") return 4 * n;
    if (dtype == "f64") return 8 * n;
    throw CorruptLength("unknown blob dtype '" + dtype + "'");
}

class BlobReader {
public:
    BlobReader(const nlohmann::json& index, const std::uint8_t* data, std::size_t size) {
        std::size_t offset = 0;
        for (const auto& e : index) {
            const std::size_t n = blob_bytes(e);
            if (offset + n > size) throw CorruptLength("blob '" + e.at("name").get<std::string>() + "' overruns payload");
            entries_.emplace(e.at("name").get<std::string>(), Entry{e, data + offset});
            offset += n;
        }
        if (offset != size) {
            throw CorruptLength("payload has " + std::to_string(size) + " bytes, header declares " +
                                std::to_string(offset));
        }
    }

    template <typename Derived>
    void read_f32(const std::string& name, Eigen::MatrixBase<Derived>& m) const {
        const Entry& e = find(name, "f32");
        const auto shape = e.meta.at("shape");
        if (shape.size() != 2 || shape[0].get<Eigen::Index>() != m.rows() || shape[1].get<Eigen::Index>() != m.cols()) {
            throw CorruptLength("blob '" + name + "' has unexpected shape " + shape.dump());
        }
        const std::uint8_t* p = e.data;
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j, p += 4)
                m(i, j) = std::bit_cast<float>(read_le<std::uint32_t>(p));
    }

    std::vector<double> read_f64(const std::string& name) const {
        const Entry& e = find(name, "f64");
        std::vector<double> v(blob_bytes(e.meta) / 8);
        const std::uint8_t* p = e.data;
        for (auto& x : v) {
            x = std::bit_cast<double>(read_le<std::uint64_t>(p));
            p += 8;
        }
        return v;
    }

private:
    struct Entry {
        nlohmann::json meta;
        const std::uint8_t* data;
    };

    const Entry& find(const std::string& name, const char* dtype) const {
        const auto it = entries_.find(name);
        if (it == entries_.end()) throw CorruptLength("missing blob '" + name + "'");
        if (it->second.meta.at("dtype") != dtype) throw CorruptLength("blob '" + name + "' has wrong dtype");
        return it->second;
    }

    std::map<std::string, Entry> entries_;
};

} // namespace detail

inline std::vector<std::uint8_t> encode_model(const ModelState& st) {
    const BackboneSpec& spec = st.backbone.spec;
    detail::BlobWriter blobs;
    st.backbone.for_each([&blobs](const char* name, const auto& p) { blobs.add_f32(std::string("backbone.") + name, p); });
    if (st.centers) blobs.add_f32("centers", st.centers->c);
    if (st.detector) {
        const DetectorModel& det = *st.detector;
        std::vector<double> eps, counts;
        for (std::size_t y = 0; y < det.stats.size(); ++y) {
            const ClassStats& s = det.stats[y];
            const std::string base = "detector.class" + std::to_string(y);
            blobs.add_f64(base + ".mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size()));
            std::vector<double> upper;
            for (Eigen::Index i = 0; i < s.cov.rows(); ++i)
                for (Eigen::Index j = i; j < s.cov.cols(); ++j) upper.push_back(s.cov(i, j));
            blobs.add_f64(base + ".cov_upper", upper);
            eps.push_back(s.epsilon);
            counts.push_back(static_cast<double>(s.count));
        }
        blobs.add_f64("detector.epsilon", eps);
        blobs.add_f64("detector.count", counts);
        blobs.add_f64("detector.thresholds", det.thresholds);
    }
    if (st.head) st.head->for_each([&blobs](const char* name, const auto& p) { blobs.add_f32(name, p); });

    nlohmann::json header = {
        {"architecture",
         {{"name", "modified-lenet"},
          {"side", spec.side},
          {"hidden", kHidden1},
          {"feature_dim", spec.feature_dim},
          {"feature_tap", feature_tap_name(spec.tap)},
          {"n_classes", spec.n_classes}}},
        {"n", spec.n_classes},
        {"d", spec.feature_dim},
        {"lambda", st.lambda},
        {"q", st.detector ? st.detector->q : st.q},
        {"tau", st.head ? st.head->tau : st.tau},
        {"seed", st.seed},
        {"center_rate", st.centers ? static_cast<double>(st.centers->rate) : 0.0},
        {"contents",
         {{"backbone", true},
          {"centers", st.centers.has_value()},
          {"detector", st.detector.has_value()},
          {"head", st.head.has_value()}}},
        {"provenance", st.provenance},
        {"blobs", blobs.index()},
    };
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kArchiveMagic, kArchiveMagic + 4);
    detail::append_le<std::uint32_t>(out, kArchiveVersion);
    detail::append_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blobs.payload().begin(), blobs.payload().end());
    return out;
}

inline ModelState decode_model(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
        throw BadMagic("not an OODN archive");
    }
    if (bytes.size() < 16) throw CorruptLength("archive preamble truncated");
    const auto version = detail::read_le<std::uint32_t>(bytes.data() + 4);
    if (version != kArchiveVersion) {
        throw VersionMismatch("archive version " + std::to_string(version) + ", expected " +
                              std::to_string(kArchiveVersion));
    }
    const auto header_len = detail::read_le<std::uint64_t>(bytes.data() + 8);
    if (header_len > bytes.size() - 16) throw CorruptLength("header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptLength(std::string("header is not valid JSON: ") + e.what());
    }

    try {
        const std::size_t payload_off = 16 + header_len;
        detail::BlobReader blobs(header.at("blobs"), bytes.data() + payload_off, bytes.size() - payload_off);

        ModelState st;
        const auto& arch = header.at("architecture");
        BackboneSpec spec;
        spec.side = arch.at("side");
        spec.n_classes = arch.at("n_classes");
        spec.feature_dim = arch.at("feature_dim");
        spec.tap = parse_feature_tap(arch.at("feature_tap"));
        st.backbone = Backbone<float>::zeros(spec);
        Backbone<float>::zip(
            [&blobs](const char* name, auto& p) { blobs.read_f32(std::string("backbone.") + name, p); }, st.backbone);

        st.lambda = header.at("lambda");
        st.q = header.at("q");
        st.tau = header.at("tau");
        st.seed = header.at("seed");
        st.provenance = header.at("provenance");
        const auto& contents = header.at("contents");

        if (contents.at("centers").get<bool>()) {
            Centers<float> c;
            c.rate = static_cast<float>(header.at("center_rate").get<double>());
            c.c.resize(spec.n_classes, spec.feature_dim);
            blobs.read_f32("centers", c.c);
            st.centers = std::move(c);
        }
        if (contents.at("detector").get<bool>()) {
            DetectorModel det;
            det.q = st.q;
            const auto eps = blobs.read_f64("detector.epsilon");
            const auto counts = blobs.read_f64("detector.count");
            det.thresholds = blobs.read_f64("detector.thresholds");
            const auto d = static_cast<Eigen::Index>(spec.feature_dim);
            if (eps.size() != static_cast<std::size_t>(spec.n_classes) || counts.size() != eps.size()) {
                throw CorruptLength("detector class count");
            }
            for (int y = 0; y < spec.n_classes; ++y) {
                const std::string base = "detector.class" + std::to_string(y);
                ClassStats s;
                const auto mean = blobs.read_f64(base + ".mean");
                const auto upper = blobs.read_f64(base + ".cov_upper");
                if (static_cast<Eigen::Index>(mean.size()) != d ||
                    static_cast<Eigen::Index>(upper.size()) != d * (d + 1) / 2) {
                    throw CorruptLength("detector blob sizes for class " + std::to_string(y));
                }
                s.mean = Eigen::Map<const Vec<double>>(mean.data(), d);
                s.cov.resize(d, d);
                std::size_t k = 0;
                for (Eigen::Index i = 0; i < d; ++i)
                    for (Eigen::Index j = i; j < d; ++j) s.cov(i, j) = s.cov(j, i) = upper[k++];
                s.count = static_cast<std::size_t>(counts[static_cast<std::size_t>(y)]);
                s.refactor_with(eps[static_cast<std::size_t>(y)]);
                det.stats.push_back(std::move(s));
            }
            st.detector = std::move(det);
        }
        if (contents.at("head").get<bool>()) {
            OodHead<float> h = OodHead<float>::zeros(spec.feature_dim);
            OodHead<float>::zip([&blobs](const char* name, auto& p) { blobs.read_f32(name, p); }, h);
            h.tau = st.tau;
            st.head = std::move(h);
        }
        return st;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptLength(std::string("malformed header: ") + e.what());
    }
}

inline void save_model(const std::filesystem::path& path, const ModelState& st) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_bytes(path, encode_model(st));
}

inline ModelState load_model(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("model archive not found: '" + path.string() + "'");
    return decode_model(read_file_bytes(path));
}

} // namespace oodn
