#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "oodn/data.hpp"
#include "oodn/errors.hpp"
#include "oodn/rng.hpp"

namespace oodn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
/// Feature maps are channels x (height*width), one channel per row.
template <typename T>
using FeatureMap = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

// ---------------------------------------------------------------------------
// Layers. Each works on a single sample; batching is a loop in sample order.
// ---------------------------------------------------------------------------

struct ConvGeometry {
    int in_ch = 1;
    int out_ch = 1;
    int kernel = 5;
    int pad = 0;
    int in_h = 0;
    int in_w = 0;

    int out_h() const { return in_h + 2 * pad - kernel + 1; }
    int out_w() const { return in_w + 2 * pad - kernel + 1; }
    int patch() const { return in_ch * kernel * kernel; }
};

/// Unfolds `in` (in_ch x in_h*in_w) into patch columns (patch x out_h*out_w).
template <typename T>
void im2col(const ConvGeometry& g, const FeatureMap<T>& in, Mat<T>& col) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    col.resize(g.patch(), oh * ow);
    for (int ci = 0; ci < g.in_ch; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int row = (ci * k + ky) * k + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy + ky - g.pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox + kx - g.pad;
                        col(row, oy * ow + ox) = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                                                     ? in(ci, iy * g.in_w + ix)
                                                     : T(0);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters patch-column gradients back onto the input map.
template <typename T>
void col2im(const ConvGeometry& g, const Mat<T>& dcol, FeatureMap<T>& din) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    din.setZero(g.in_ch, g.in_h * g.in_w);
    for (int ci = 0; ci < g.in_ch; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const int row = (ci * k + ky) * k + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy + ky - g.pad;
                    if (iy < 0 || iy >= g.in_h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox + kx - g.pad;
                        if (ix < 0 || ix >= g.in_w) continue;
                        din(ci, iy * g.in_w + ix) += dcol(row, oy * ow + ox);
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2. `argmax` records the flat input index that
/// won each output cell (first maximum in scan order).
template <typename T>
void maxpool2_forward(const FeatureMap<T>& in, int h, int w, FeatureMap<T>& out, std::vector<int>& argmax) {
    const int oh = h / 2, ow = w / 2;
    const auto ch = in.rows();
    out.resize(ch, oh * ow);
    argmax.resize(static_cast<std::size_t>(ch * oh * ow));
    for (Eigen::Index c = 0; c < ch; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                int best = (2 * oy) * w + 2 * ox;
                T best_v = in(c, best);
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if (in(c, idx) > best_v) {
                            best_v = in(c, idx);
                            best = idx;
                        }
                    }
                }
                out(c, oy * ow + ox) = best_v;
                argmax[static_cast<std::size_t>(c * oh * ow + oy * ow + ox)] = best;
            }
        }
    }
}

template <typename T>
void maxpool2_backward(const FeatureMap<T>& dout, const std::vector<int>& argmax, int h, int w,
                       FeatureMap<T>& din) {
    const auto ch = dout.rows();
    const auto cells = dout.cols();
    din.setZero(ch, h * w);
    for (Eigen::Index c = 0; c < ch; ++c) {
        for (Eigen::Index p = 0; p < cells; ++p) {
            din(c, argmax[static_cast<std::size_t>(c * cells + p)]) += dout(c, p);
        }
    }
}

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
    return x.cwiseMax(typename Derived::Scalar(0));
}

/// y = W x + b
template <typename T>
Vec<T> dense_forward(const Mat<T>& weight, const Vec<T>& bias, const Vec<T>& x) {
    if (weight.cols() != x.size()) {
        throw ShapeMismatch("dense layer expects " + std::to_string(weight.cols()) + " inputs, got " +
                            std::to_string(x.size()));
    }
    return weight * x + bias;
}

// ---------------------------------------------------------------------------
// Backbone: modified LeNet
//
//   conv(1->6, 5x5, pad 2) -> ReLU -> maxpool 2x2
//   conv(6->16, 5x5)       -> ReLU -> maxpool 2x2 -> flatten
//   dense(flat->120) -> ReLU -> dense(120->d) -> ReLU   (deep feature)
//   classifier dense(d->n)                               (logits)
// ---------------------------------------------------------------------------

enum class FeatureTap { PostRelu, PreRelu };

inline const char* feature_tap_name(FeatureTap t) { return t == FeatureTap::PostRelu ? "post_relu" : "pre_relu"; }

inline FeatureTap parse_feature_tap(const std::string& s) {
    if (s == "post_relu") return FeatureTap::PostRelu;
    if (s == "pre_relu") return FeatureTap::PreRelu;
    throw ConfigError("unknown feature tap '" + s + "'");
}

struct BackboneSpec {
    int side = 28;
    int n_classes = 10;
    int feature_dim = 84;
    FeatureTap tap = FeatureTap::PostRelu;

    ConvGeometry conv1() const { return {1, 6, 5, 2, side, side}; }
    ConvGeometry conv2() const {
        const int s = conv1().out_h() / 2;
        return {6, 16, 5, 0, s, s};
    }
    int pooled2_side() const { return conv2().out_h() / 2; }
    int flat_dim() const { return 16 * pooled2_side() * pooled2_side(); }

    void validate() const {
        if (n_classes < 2) throw ShapeMismatch("backbone needs at least 2 classes");
        if (feature_dim < 1) throw ShapeMismatch("feature_dim must be positive");
        if (side < 12 || side % 2 != 0 || conv2().out_h() % 2 != 0) {
            throw ShapeMismatch("input side " + std::to_string(side) +
                                " does not pool evenly through the backbone");
        }
    }

    bool operator==(const BackboneSpec&) const = default;
};

inline constexpr int kHidden1 = 120;

template <typename T>
struct Backbone {
    BackboneSpec spec;
    Mat<T> conv1_w, conv2_w, fc1_w, fc2_w, cls_w;
    Vec<T> conv1_b, conv2_b, fc1_b, fc2_b, cls_b;

    /// Zero-valued parameters with the shapes implied by `spec`.
    static Backbone zeros(const BackboneSpec& spec) {
        spec.validate();
        Backbone b;
        b.spec = spec;
        b.conv1_w.setZero(6, spec.conv1().patch());
        b.conv1_b.setZero(6);
        b.conv2_w.setZero(16, spec.conv2().patch());
        b.conv2_b.setZero(16);
        b.fc1_w.setZero(kHidden1, spec.flat_dim());
        b.fc1_b.setZero(kHidden1);
        b.fc2_w.setZero(spec.feature_dim, kHidden1);
        b.fc2_b.setZero(spec.feature_dim);
        b.cls_w.setZero(spec.n_classes, spec.feature_dim);
        b.cls_b.setZero(spec.n_classes);
        return b;
    }

    /// He-scaled normal weights, zero biases.
    static Backbone init(const BackboneSpec& spec, std::uint64_t seed) {
        Backbone b = zeros(spec);
        Rng rng(seed);
        auto fill = [&rng](Mat<T>& w) {
            const double scale = std::sqrt(2.0 / static_cast<double>(w.cols()));
            for (Eigen::Index j = 0; j < w.cols(); ++j)
                for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<T>(scale * rng.normal());
        };
        fill(b.conv1_w);
        fill(b.conv2_w);
        fill(b.fc1_w);
        fill(b.fc2_w);
        fill(b.cls_w);
        return b;
    }

    /// Visits (name, parameter) across one or more identically shaped
    /// backbones in a fixed order.
    template <typename F, typename... Others>
    static void zip(F&& f, Backbone& a, Others&... others) {
        f("conv1.weight", a.conv1_w, others.conv1_w...);
        f("conv1.bias", a.conv1_b, others.conv1_b...);
        f("conv2.weight", a.conv2_w, others.conv2_w...);
        f("conv2.bias", a.conv2_b, others.conv2_b...);
        f("fc1.weight", a.fc1_w, others.fc1_w...);
        f("fc1.bias", a.fc1_b, others.fc1_b...);
        f("fc2.weight", a.fc2_w, others.fc2_w...);
        f("fc2.bias", a.fc2_b, others.fc2_b...);
        f("classifier.weight", a.cls_w, others.cls_w...);
        f("classifier.bias", a.cls_b, others.cls_b...);
    }

    template <typename F>
    void for_each(F&& f) const {
        auto& self = const_cast<Backbone&>(*this);
        zip([&f](const char* name, const auto& p) { f(name, p); }, self);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&n](const char*, const auto& p) { n += static_cast<std::size_t>(p.size()); });
        return n;
    }

    template <typename U>
    Backbone<U> cast() const {
        Backbone<U> out;
        out.spec = spec;
        out.conv1_w = conv1_w.template cast<U>();
        out.conv2_w = conv2_w.template cast<U>();
        out.fc1_w = fc1_w.template cast<U>();
        out.fc2_w = fc2_w.template cast<U>();
        out.cls_w = cls_w.template cast<U>();
        out.conv1_b = conv1_b.template cast<U>();
        out.conv2_b = conv2_b.template cast<U>();
        out.fc1_b = fc1_b.template cast<U>();
        out.fc2_b = fc2_b.template cast<U>();
        out.cls_b = cls_b.template cast<U>();
        return out;
    }

    bool operator==(const Backbone& o) const {
        bool eq = spec == o.spec;
        auto& a = const_cast<Backbone&>(*this);
        auto& b = const_cast<Backbone&>(o);
        zip([&eq](const char*, const auto& x, const auto& y) {
                eq = eq && x.rows() == y.rows() && x.cols() == y.cols() && x == y;
            },
            a, b);
        return eq;
    }
};

/// Intermediate activations of one sample, kept for the backward pass.
/// Reused across samples so allocations happen once.
template <typename T>
struct SampleCache {
    FeatureMap<T> input;
    Mat<T> col1;
    FeatureMap<T> act1, pool1;
    std::vector<int> arg1;
    Mat<T> col2;
    FeatureMap<T> act2, pool2;
    std::vector<int> arg2;
    Vec<T> flat, hidden1_pre, hidden1, feature_pre, feature, logits;
};

template <typename T>
void forward_sample(const Backbone<T>& m, std::span<const float> image, SampleCache<T>& c) {
    const BackboneSpec& s = m.spec;
    if (image.size() != static_cast<std::size_t>(s.side * s.side)) {
        throw ShapeMismatch("image has " + std::to_string(image.size()) + " pixels, backbone expects " +
                            std::to_string(s.side * s.side));
    }
    const ConvGeometry g1 = s.conv1();
    const ConvGeometry g2 = s.conv2();

    c.input = Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>>(image.data(),
                                                                         static_cast<Eigen::Index>(image.size()))
                  .template cast<T>();
    im2col(g1, c.input, c.col1);
    c.act1.noalias() = m.conv1_w * c.col1;
    c.act1.colwise() += m.conv1_b;
    c.act1 = relu(c.act1);
    maxpool2_forward(c.act1, g1.out_h(), g1.out_w(), c.pool1, c.arg1);

    im2col(g2, c.pool1, c.col2);
    c.act2.noalias() = m.conv2_w * c.col2;
    c.act2.colwise() += m.conv2_b;
    c.act2 = relu(c.act2);
    maxpool2_forward(c.act2, g2.out_h(), g2.out_w(), c.pool2, c.arg2);

    c.flat = Eigen::Map<const Vec<T>>(c.pool2.data(), c.pool2.size());
    c.hidden1_pre.noalias() = m.fc1_w * c.flat;
    c.hidden1_pre += m.fc1_b;
    c.hidden1 = relu(c.hidden1_pre);
    c.feature_pre.noalias() = m.fc2_w * c.hidden1;
    c.feature_pre += m.fc2_b;
    c.feature = s.tap == FeatureTap::PostRelu ? Vec<T>(relu(c.feature_pre)) : c.feature_pre;
    c.logits.noalias() = m.cls_w * c.feature;
    c.logits += m.cls_b;
}

/// Accumulates parameter gradients of one sample into `grad`, given the
/// gradient of the loss with respect to the logits and an extra gradient
/// arriving directly at the deep feature (e.g. from the center loss).
template <typename T>
void backward_sample(const Backbone<T>& m, const SampleCache<T>& c, const Vec<T>& dlogits,
                     const std::type_identity_t<Vec<T>>* dfeature_extra, Backbone<T>& grad) {
    const BackboneSpec& s = m.spec;
    const ConvGeometry g1 = s.conv1();
    const ConvGeometry g2 = s.conv2();

    grad.cls_w.noalias() += dlogits * c.feature.transpose();
    grad.cls_b += dlogits;
    Vec<T> dfeat = m.cls_w.transpose() * dlogits;
    if (dfeature_extra) dfeat += *dfeature_extra;

    // Through the feature activation (identity for the pre-ReLU tap).
    Vec<T> dfeat_pre = dfeat;
    if (s.tap == FeatureTap::PostRelu) {
        dfeat_pre = (c.feature_pre.array() > T(0)).select(dfeat, T(0));
    }
    grad.fc2_w.noalias() += dfeat_pre * c.hidden1.transpose();
    grad.fc2_b += dfeat_pre;
    Vec<T> dh1 = m.fc2_w.transpose() * dfeat_pre;
    dh1 = (c.hidden1_pre.array() > T(0)).select(dh1, T(0));

    grad.fc1_w.noalias() += dh1 * c.flat.transpose();
    grad.fc1_b += dh1;
    const Vec<T> dflat = m.fc1_w.transpose() * dh1;

    const int p2 = s.pooled2_side();
    FeatureMap<T> dpool2 = Eigen::Map<const FeatureMap<T>>(dflat.data(), 16, p2 * p2);
    FeatureMap<T> dact2;
    maxpool2_backward(dpool2, c.arg2, g2.out_h(), g2.out_w(), dact2);
    dact2 = (c.act2.array() > T(0)).select(dact2, T(0));
    grad.conv2_w.noalias() += dact2 * c.col2.transpose();
    grad.conv2_b += dact2.rowwise().sum();
    const Mat<T> dcol2 = m.conv2_w.transpose() * dact2;
    FeatureMap<T> dpool1;
    col2im(g2, dcol2, dpool1);

    FeatureMap<T> dact1;
    maxpool2_backward(dpool1, c.arg1, g1.out_h(), g1.out_w(), dact1);
    dact1 = (c.act1.array() > T(0)).select(dact1, T(0));
    grad.conv1_w.noalias() += dact1 * c.col1.transpose();
    grad.conv1_b += dact1.rowwise().sum();
}

template <typename T>
struct ForwardResult {
    Mat<T> features;  // m x d
    Mat<T> logits;    // m x n
};

template <typename T>
ForwardResult<T> forward(const Backbone<T>& m, const MiniBatch& batch) {
    ForwardResult<T> r;
    r.features.resize(static_cast<Eigen::Index>(batch.size()), m.spec.feature_dim);
    r.logits.resize(static_cast<Eigen::Index>(batch.size()), m.spec.n_classes);
    SampleCache<T> cache;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        forward_sample(m, batch.image(i), cache);
        r.features.row(static_cast<Eigen::Index>(i)) = cache.feature.transpose();
        r.logits.row(static_cast<Eigen::Index>(i)) = cache.logits.transpose();
    }
    return r;
}

/// Deep features T(X) for every image of a dataset (rows follow sample order).
template <typename T>
Mat<T> extract_features(const Backbone<T>& m, const LabeledDataset& ds) {
    Mat<T> out(static_cast<Eigen::Index>(ds.size()), m.spec.feature_dim);
    SampleCache<T> cache;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        forward_sample(m, ds.image(i), cache);
        out.row(static_cast<Eigen::Index>(i)) = cache.feature.transpose();
    }
    return out;
}

template <typename T>
Mat<T> extract_features(const Backbone<T>& m, const MiniBatch& batch) {
    return forward(m, batch).features;
}

/// Predicted class per image (argmax of logits, lowest index on ties).
template <typename T>
std::vector<int> predict(const Backbone<T>& m, const LabeledDataset& ds) {
    std::vector<int> out(ds.size());
    SampleCache<T> cache;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        forward_sample(m, ds.image(i), cache);
        Eigen::Index k;
        cache.logits.maxCoeff(&k);
        out[i] = static_cast<int>(k);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy, summed over the batch.
// ---------------------------------------------------------------------------

template <typename T>
struct XentResult {
    T loss = 0;
    Mat<T> grad;  // m x n, d loss / d logits
};

template <typename T>
Vec<T> softmax(const Vec<T>& logits) {
    const T mx = logits.maxCoeff();
    Vec<T> e = (logits.array() - mx).exp();
    return e / e.sum();
}

template <typename T>
XentResult<T> softmax_xent(const Mat<T>& logits, std::span<const int> labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
        throw ShapeMismatch("logit rows vs label count");
    }
    XentResult<T> r;
    r.grad.resize(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= logits.cols()) {
            throw LabelOutOfRange("label " + std::to_string(y) + " with " + std::to_string(logits.cols()) +
                                  " classes");
        }
        const Vec<T> z = logits.row(i).transpose();
        const T mx = z.maxCoeff();
        const T lse = mx + std::log((z.array() - mx).exp().sum());
        r.loss += lse - z(y);
        Vec<T> p = (z.array() - lse).exp();
        p(y) -= T(1);
        r.grad.row(i) = p.transpose();
    }
    return r;
}

} // namespace oodn
