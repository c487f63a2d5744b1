#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nwrs/error.hpp"
#include "nwrs/model.hpp"
#include "nwrs/rng.hpp"
#include "nwrs/trainer.hpp"

namespace nwrs {

/// Verifier-side watermark: the bits plus what is needed to rebuild the
/// secret projection.
struct WatermarkRecord {
    std::size_t layer = 0;
    std::vector<std::uint8_t> bits;
    std::uint64_t projection_seed = 0;
    double lambda = 0.01;
    std::size_t feature_dim = 0;  // 0 when unknown; checked on extraction otherwise

    [[nodiscard]] WatermarkInfo info() const { return {layer, bits.size(), projection_seed, lambda}; }
    friend bool operator==(const WatermarkRecord&, const WatermarkRecord&) = default;
};

inline std::vector<std::uint8_t> random_bits(std::size_t count, std::uint64_t seed) {
    auto eng = make_engine(seed, stream::bits, count);
    std::vector<std::uint8_t> b(count);
    for (auto& x : b) x = static_cast<std::uint8_t>(eng() >> 63);
    return b;
}

/// Length of the feature vector of layer l: the weight tensor averaged over
/// its output-neuron axis.
inline std::size_t watermark_feature_dim(const LayerSpec& s) { return s.fan_in(); }

/// Mean over the output-neuron axis. FC: one entry per input row. Conv: one
/// entry per (inChannel, kh, kw). Reordering layer l's neurons reorders this
/// vector for layer l+1; reordering layer l+1's own neurons leaves it unchanged.
inline std::vector<double> watermark_feature(const ModelBundle& m, std::size_t l) {
    if (l >= m.num_layers()) throw validation_error("watermark layer " + std::to_string(l) + " out of range");
    const auto& s = m.layers[l];
    const auto& w = m.params[l].weight;
    const std::size_t n = s.neurons(), dim = watermark_feature_dim(s);
    std::vector<double> f(dim, 0.0);
    for (std::size_t o = 0; o < n; ++o)
        for (std::size_t r = 0; r < dim; ++r) f[r] += s.is_conv() ? w[o * dim + r] : w[r * n + o];
    for (auto& v : f) v /= static_cast<double>(n);
    return f;
}

/// Secret projection matrix, bit_count × feature_dim, i.i.d. N(0, 1).
inline std::vector<double> projection_matrix(std::uint64_t seed, std::size_t bit_count, std::size_t feature_dim) {
    auto eng = make_engine(seed, stream::projection, feature_dim);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> x(bit_count * feature_dim);
    for (auto& v : x) v = nd(eng);
    return x;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// sigmoid(X · f(w)) for the record's layer.
inline std::vector<double> watermark_projection(const ModelBundle& m, const WatermarkRecord& wm) {
    if (wm.bits.empty()) throw validation_error("watermark has no bits");
    const auto f = watermark_feature(m, wm.layer);
    const auto x = projection_matrix(wm.projection_seed, wm.bits.size(), f.size());
    std::vector<double> y(wm.bits.size());
    for (std::size_t t = 0; t < y.size(); ++t) {
        double acc = 0.0;
        for (std::size_t r = 0; r < f.size(); ++r) acc += x[t * f.size() + r] * f[r];
        y[t] = sigmoid(acc);
    }
    return y;
}

/// Pearson correlation; 0 when either side is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw shape_error("pearson needs two non-empty series of equal length");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

inline WatermarkRecord make_watermark_record(const ModelBundle& m, std::size_t layer, std::vector<std::uint8_t> bits,
                                             std::uint64_t projection_seed, double lambda) {
    if (layer >= m.num_layers()) throw validation_error("watermark layer " + std::to_string(layer) + " out of range");
    return {layer, std::move(bits), projection_seed, lambda, watermark_feature_dim(m.layers[layer])};
}

/// Binary cross-entropy regularizer λ·Σ_t BCE(sigmoid(X f(w))_t, b_t) on the
/// target layer, for use as TrainConfig::regularizer.
inline Regularizer make_watermark_regularizer(const ModelBundle& m, const WatermarkRecord& wm) {
    if (wm.layer >= m.num_layers()) throw validation_error("watermark layer " + std::to_string(wm.layer) + " out of range");
    const auto& s = m.layers[wm.layer];
    const std::size_t dim = watermark_feature_dim(s);
    auto x = projection_matrix(wm.projection_seed, wm.bits.size(), dim);
    return [wm, x = std::move(x), dim](const ModelBundle& model, Gradients& g) {
        const auto& spec = model.layers[wm.layer];
        const auto f = watermark_feature(model, wm.layer);
        std::vector<double> gf(dim, 0.0);
        double loss = 0.0;
        for (std::size_t t = 0; t < wm.bits.size(); ++t) {
            double z = 0.0;
            for (std::size_t r = 0; r < dim; ++r) z += x[t * dim + r] * f[r];
            const double b = wm.bits[t];
            // log(1 + e^z) - b·z, stable for large |z|
            loss += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - b * z;
            const double d = sigmoid(z) - b;
            for (std::size_t r = 0; r < dim; ++r) gf[r] += d * x[t * dim + r];
        }
        const std::size_t n = spec.neurons();
        const double scale = wm.lambda / static_cast<double>(n);
        auto& gw = g.layers[wm.layer].weight;
        for (std::size_t o = 0; o < n; ++o)
            for (std::size_t r = 0; r < dim; ++r) gw[spec.is_conv() ? o * dim + r : r * n + o] += scale * gf[r];
        return wm.lambda * loss;
    };
}

/// Trains with the watermark regularizer. With lambda == 0 this is plain training.
inline TrainResult embed(const ModelBundle& m, const Dataset& d, TrainConfig cfg, const WatermarkRecord& wm) {
    if (wm.bits.empty()) throw validation_error("watermark has no bits");
    if (!(wm.lambda >= 0.0)) throw validation_error("watermark strength must be non-negative");
    if (wm.layer >= m.num_layers()) throw validation_error("watermark layer " + std::to_string(wm.layer) + " out of range");
    if (wm.lambda > 0.0) cfg.regularizer = make_watermark_regularizer(m, wm);
    auto r = train(m, d, cfg);
    r.model.metadata.watermark = wm.info();
    return r;
}

struct Extraction {
    std::vector<std::uint8_t> bits;
    std::vector<double> projection;  // sigmoid(X f(w)), before thresholding
    double pearson = 0.0;            // projection vs bits mapped to {-1, +1}
    double ber = 0.0;                // fraction of mismatched bits
};

inline Extraction extract(const ModelBundle& m, const WatermarkRecord& wm) {
    if (wm.layer >= m.num_layers()) throw validation_error("watermark layer " + std::to_string(wm.layer) + " out of range");
    if (wm.feature_dim && wm.feature_dim != watermark_feature_dim(m.layers[wm.layer]))
        throw shape_error("watermark expects a feature of length " + std::to_string(wm.feature_dim) + ", layer " +
                          std::to_string(wm.layer) + " provides " +
                          std::to_string(watermark_feature_dim(m.layers[wm.layer])));
    if (m.metadata.watermark && m.metadata.watermark->bit_count != wm.bits.size())
        throw shape_error("model carries a " + std::to_string(m.metadata.watermark->bit_count) +
                          "-bit watermark, record has " + std::to_string(wm.bits.size()));
    Extraction e;
    e.projection = watermark_projection(m, wm);
    std::vector<double> signs(wm.bits.size());
    std::size_t wrong = 0;
    for (std::size_t t = 0; t < wm.bits.size(); ++t) {
        const std::uint8_t b = e.projection[t] > 0.5 ? 1 : 0;
        e.bits.push_back(b);
        if (b != wm.bits[t]) ++wrong;
        signs[t] = wm.bits[t] ? 1.0 : -1.0;
    }
    e.ber = static_cast<double>(wrong) / static_cast<double>(wm.bits.size());
    e.pearson = pearson(e.projection, signs);
    return e;
}

}  // namespace nwrs
