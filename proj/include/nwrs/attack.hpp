#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nwrs/error.hpp"
#include "nwrs/model.hpp"
#include "nwrs/rng.hpp"
#include "nwrs/tensor.hpp"
#include "nwrs/trainer.hpp"

namespace nwrs {

namespace detail {

inline void check_layer(const ModelBundle& m, std::size_t l) {
    if (l >= m.num_layers())
        throw validation_error("layer " + std::to_string(l) + " out of range (model has " +
                               std::to_string(m.num_layers()) + " layers)");
}

/// Moves neuron i of a per-neuron vector to slot p(i).
inline void permute_vector(Tensor& t, const Permutation& p) {
    Tensor out(t.shape());
    for (std::size_t i = 0; i < p.size(); ++i) out[p(i)] = t[i];
    t = std::move(out);
}

/// Moves neuron i (column i of an FC weight, filter i of a conv weight) to p(i).
inline void permute_neurons(const LayerSpec& s, Tensor& w, const Permutation& p) {
    Tensor out(w.shape());
    if (!s.is_conv()) {
        const std::size_t rows = s.in_dim, n = s.out_dim;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i) out[r * n + p(i)] = w[r * n + i];
    } else {
        const std::size_t len = s.fan_in();
        for (std::size_t i = 0; i < p.size(); ++i)
            std::copy_n(w.data().begin() + i * len, len, out.data().begin() + p(i) * len);
    }
    w = std::move(out);
}

/// Moves the input slot fed by neuron i of the previous layer to p(i).
/// `block` is the previous layer's spatial size (rows per channel when an FC
/// layer follows a flattened conv output).
inline void permute_inputs(const LayerSpec& s, Tensor& w, const Permutation& p, std::size_t block) {
    Tensor out(w.shape());
    if (!s.is_conv()) {
        const std::size_t n = s.out_dim;
        const std::size_t row_len = block * n;
        for (std::size_t i = 0; i < p.size(); ++i)
            std::copy_n(w.data().begin() + i * row_len, row_len, out.data().begin() + p(i) * row_len);
    } else {
        const std::size_t k = s.kernel_h * s.kernel_w;
        for (std::size_t o = 0; o < s.out_channels; ++o)
            for (std::size_t i = 0; i < p.size(); ++i)
                std::copy_n(w.data().begin() + (o * s.in_channels + i) * k, k,
                            out.data().begin() + (o * s.in_channels + p(i)) * k);
    }
    w = std::move(out);
}

}  // namespace detail

/// Permutation attack on layer l: neuron i of layer l moves to p(i) together
/// with its bias and scale/shift, and layer l+1's matching input channel moves
/// with it, so the model computes the same function. Permuting the last layer
/// relabels the classes and needs `allow_last`.
inline ModelBundle permute_layer(ModelBundle m, std::size_t l, const Permutation& p, bool allow_last = false) {
    detail::check_layer(m, l);
    const auto& s = m.layers[l];
    if (p.size() != s.neurons())
        throw validation_error("permutation of size " + std::to_string(p.size()) + " for layer " + std::to_string(l) +
                               " with " + std::to_string(s.neurons()) + " neurons");
    const bool last = l + 1 == m.num_layers();
    if (last && !allow_last)
        throw validation_error("permuting the last layer relabels the output classes");
    if (p.is_identity()) return m;

    auto& prm = m.params[l];
    detail::permute_neurons(s, prm.weight, p);
    if (prm.bias) detail::permute_vector(*prm.bias, p);
    if (prm.scale) detail::permute_vector(*prm.scale, p);
    if (prm.shift) detail::permute_vector(*prm.shift, p);
    if (!last) detail::permute_inputs(m.layers[l + 1], m.params[l + 1].weight, p, s.spatial_out());
    return m;
}

/// Flat weight vector of neuron i: FC column, or conv filter as (inC, kh, kw).
inline std::vector<float> neuron_weights(const ModelBundle& m, std::size_t l, std::size_t i) {
    const auto& s = m.layers[l];
    const auto& w = m.params[l].weight;
    std::vector<float> v(s.fan_in());
    if (!s.is_conv()) {
        for (std::size_t r = 0; r < s.in_dim; ++r) v[r] = w[r * s.out_dim + i];
    } else {
        std::copy_n(w.data().begin() + i * v.size(), v.size(), v.begin());
    }
    return v;
}

inline void set_neuron_weights(ModelBundle& m, std::size_t l, std::size_t i, std::span<const float> v) {
    const auto& s = m.layers[l];
    auto& w = m.params[l].weight;
    if (v.size() != s.fan_in()) throw shape_error("neuron vector has wrong length");
    if (!s.is_conv()) {
        for (std::size_t r = 0; r < s.in_dim; ++r) w[r * s.out_dim + i] = v[r];
    } else {
        std::copy(v.begin(), v.end(), w.data().begin() + i * v.size());
    }
}

/// How the second argument of N(0, σ_l·Ω) is read.
enum class NoiseScale { std_dev, variance };

inline double population_std(std::span<const float> v) {
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (float x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(v.size()));
}

/// Adds i.i.d. Gaussian noise to the weights of layer l. With the default
/// reading the noise std is omega·σ_l, σ_l being the population std of the
/// layer's weights before noise. Biases are left untouched.
inline ModelBundle add_gaussian_noise(ModelBundle m, std::size_t l, double omega, std::uint64_t seed,
                                      NoiseScale reading = NoiseScale::std_dev) {
    detail::check_layer(m, l);
    if (!(omega >= 0.0)) throw validation_error("noise scale must be non-negative");
    if (omega == 0.0) return m;
    auto w = m.params[l].weight.data();
    const double sigma_l = population_std(w);
    const double sd = reading == NoiseScale::std_dev ? omega * sigma_l : std::sqrt(omega * sigma_l);
    auto eng = make_engine(seed, stream::noise, l);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& x : w) x = static_cast<float>(static_cast<double>(x) + sd * nd(eng));
    return m;
}

/// Symmetric uniform quantization of layer l's weights, dequantized back to
/// float: step = max|w| / (2^(bits-1) - 1), or max|w| for one bit; values
/// round half away from zero.
inline ModelBundle quantize(ModelBundle m, std::size_t l, int bits) {
    detail::check_layer(m, l);
    if (bits < 1) throw validation_error("quantization needs at least one bit");
    auto w = m.params[l].weight.data();
    double max_abs = 0.0;
    for (float x : w) max_abs = std::max(max_abs, std::abs(static_cast<double>(x)));
    if (max_abs == 0.0) return m;
    const double levels = bits == 1 ? 1.0 : std::ldexp(1.0, bits - 1) - 1.0;
    const double step = max_abs / levels;
    for (auto& x : w) x = static_cast<float>(std::round(static_cast<double>(x) / step) * step);
    return m;
}

/// Zeroes the floor(t·count) weights of layer l with smallest magnitude,
/// ties by ascending flat index.
inline ModelBundle magnitude_prune(ModelBundle m, std::size_t l, double t) {
    detail::check_layer(m, l);
    if (!(t >= 0.0 && t <= 1.0)) throw validation_error("pruning fraction must lie in [0, 1]");
    auto w = m.params[l].weight.data();
    const auto count = static_cast<std::size_t>(std::floor(t * static_cast<double>(w.size()) + 1e-9));
    if (count == 0) return m;
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(w[a]) < std::abs(w[b]); });
    for (std::size_t k = 0; k < std::min(count, idx.size()); ++k) w[idx[k]] = 0.0f;
    return m;
}

/// Replaces neuron i's weights w by w + k·w. The bias (and the folded shift,
/// when present) scale by the same factor, so the pre-activation becomes (1+k)·z.
/// k = -1 silences the neuron.
inline ModelBundle scalar_attack(ModelBundle m, std::size_t l, std::size_t i, double k) {
    detail::check_layer(m, l);
    if (i >= m.layers[l].neurons()) throw validation_error("neuron " + std::to_string(i) + " out of range");
    if (k == 0.0) return m;
    const double f = 1.0 + k;
    auto v = neuron_weights(m, l, i);
    for (auto& x : v) x = static_cast<float>(static_cast<double>(x) * f);
    set_neuron_weights(m, l, i, v);
    auto& p = m.params[l];
    if (p.bias) (*p.bias)[i] = static_cast<float>((*p.bias)[i] * f);
    if (p.shift) (*p.shift)[i] = static_cast<float>((*p.shift)[i] * f);
    return m;
}

enum class PerturbationKind { gaussian_noise, fine_tune, quantize, magnitude_prune, scalar_multiple };

inline const char* to_string(PerturbationKind k) {
    switch (k) {
        case PerturbationKind::gaussian_noise: return "gauss";
        case PerturbationKind::fine_tune: return "finetune";
        case PerturbationKind::quantize: return "quant";
        case PerturbationKind::magnitude_prune: return "prune";
        case PerturbationKind::scalar_multiple: return "scalar";
    }
    return "?";
}

inline PerturbationKind parse_perturbation_kind(const std::string& s) {
    if (s == "gauss") return PerturbationKind::gaussian_noise;
    if (s == "finetune") return PerturbationKind::fine_tune;
    if (s == "quant") return PerturbationKind::quantize;
    if (s == "prune") return PerturbationKind::magnitude_prune;
    if (s == "scalar") return PerturbationKind::scalar_multiple;
    throw validation_error("unknown perturbation kind '" + s + "'");
}

/// One perturbation. `param` is Ω, Θ (percent), B, T or k depending on kind.
/// An empty target means every layer (fine-tuning always covers the whole model).
struct PerturbationSpec {
    PerturbationKind kind = PerturbationKind::gaussian_noise;
    double param = 0.0;
    std::optional<std::size_t> target_layer;
    std::size_t neuron = 0;  // scalar_multiple only
    NoiseScale noise_reading = NoiseScale::std_dev;

    void validate() const {
        switch (kind) {
            case PerturbationKind::gaussian_noise:
                if (!(param >= 0.0)) throw validation_error("Omega must be >= 0");
                break;
            case PerturbationKind::fine_tune:
                if (!(param >= 0.0)) throw validation_error("Theta must be >= 0");
                break;
            case PerturbationKind::quantize:
                if (!(param >= 1.0) || param != std::floor(param)) throw validation_error("B must be an integer >= 1");
                break;
            case PerturbationKind::magnitude_prune:
                if (!(param >= 0.0 && param <= 1.0)) throw validation_error("T must lie in [0, 1]");
                break;
            case PerturbationKind::scalar_multiple:
                if (!std::isfinite(param)) throw validation_error("k must be finite");
                if (!target_layer) throw validation_error("scalar attack needs a target layer");
                break;
        }
    }
};

/// Data needed only by fine-tuning; defaults come from the bundle metadata.
struct PerturbationContext {
    const Dataset* data = nullptr;
    const TrainConfig* base_config = nullptr;
};

inline ModelBundle apply_perturbation(const ModelBundle& m, const PerturbationSpec& spec, std::uint64_t seed,
                                      PerturbationContext ctx = {}) {
    spec.validate();
    if (spec.kind == PerturbationKind::fine_tune) {
        std::optional<Dataset> owned;
        if (!ctx.data) {
            if (!m.metadata.dataset) throw validation_error("fine-tuning needs a dataset (none recorded in the model)");
            owned = dataset_for(m, *m.metadata.dataset);
        }
        TrainConfig cfg;
        if (ctx.base_config) {
            cfg = *ctx.base_config;
        } else {
            if (!m.metadata.training) throw validation_error("fine-tuning needs the base training configuration");
            cfg = TrainConfig::from_record(*m.metadata.training);
        }
        cfg.seed = seed;
        return fine_tune(m, ctx.data ? *ctx.data : *owned, spec.param, cfg);
    }

    std::vector<std::size_t> layers;
    if (spec.target_layer) {
        layers.push_back(*spec.target_layer);
    } else {
        layers.resize(m.num_layers());
        std::iota(layers.begin(), layers.end(), std::size_t{0});
    }
    ModelBundle out = m;
    for (auto l : layers) {
        switch (spec.kind) {
            case PerturbationKind::gaussian_noise:
                out = add_gaussian_noise(std::move(out), l, spec.param, seed, spec.noise_reading);
                break;
            case PerturbationKind::quantize: out = quantize(std::move(out), l, static_cast<int>(spec.param)); break;
            case PerturbationKind::magnitude_prune: out = magnitude_prune(std::move(out), l, spec.param); break;
            case PerturbationKind::scalar_multiple:
                out = scalar_attack(std::move(out), l, spec.neuron, spec.param);
                break;
            case PerturbationKind::fine_tune: break;
        }
    }
    return out;
}

}  // namespace nwrs
