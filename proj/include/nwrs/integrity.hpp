#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nwrs/attack.hpp"
#include "nwrs/error.hpp"
#include "nwrs/model.hpp"
#include "nwrs/rng.hpp"
#include "nwrs/tensor.hpp"

namespace nwrs {

/// Gaussian model of a layer input: mean and full (row-major) covariance.
struct InputGaussianSpec {
    std::vector<double> mean;
    std::vector<double> covariance;

    static InputGaussianSpec diagonal(std::vector<double> mean, std::span<const double> variances) {
        const auto n = mean.size();
        if (variances.size() != n) throw shape_error("diagonal covariance length differs from mean");
        InputGaussianSpec g{std::move(mean), std::vector<double>(n * n, 0.0)};
        for (std::size_t i = 0; i < n; ++i) g.covariance[i * n + i] = variances[i];
        return g;
    }

    [[nodiscard]] std::size_t dim() const noexcept { return mean.size(); }

    void validate() const {
        const auto n = mean.size();
        if (covariance.size() != n * n)
            throw shape_error("covariance must be " + std::to_string(n) + "x" + std::to_string(n));
        Eigen::MatrixXd c(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (std::abs(covariance[i * n + j] - covariance[j * n + i]) > 1e-9)
                    throw domain_error("covariance is not symmetric");
                c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = covariance[i * n + j];
            }
        if (n == 0) return;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() < -1e-9) throw domain_error("covariance is not positive semi-definite");
    }
};

struct PostSynapticStats {
    double mean = 0.0;
    double variance = 0.0;
};

/// Moments of z = w·x for x ~ N(mean, covariance): (w·μ, wᵀΣw).
inline PostSynapticStats post_synaptic_stats(std::span<const double> w, const InputGaussianSpec& g) {
    g.validate();
    const auto n = g.dim();
    if (w.size() != n) throw shape_error("weight vector length differs from the input dimension");
    PostSynapticStats s;
    for (std::size_t i = 0; i < n; ++i) {
        s.mean += w[i] * g.mean[i];
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += g.covariance[i * n + j] * w[j];
        s.variance += w[i] * row;
    }
    s.variance = std::max(s.variance, 0.0);
    return s;
}

inline PostSynapticStats post_synaptic_stats(std::span<const float> w, const InputGaussianSpec& g) {
    std::vector<double> wd(w.begin(), w.end());
    return post_synaptic_stats(std::span<const double>(wd), g);
}

namespace detail {
inline void check_scale_factor(double k) {
    if (!(k > -1.0)) throw domain_error("k must exceed -1 (k = -1 silences the neuron)");
}
}  // namespace detail

/// KL(z || z̃) for z ~ N(μ, σ²) and z̃ = (1+k)z.
inline double kl_gaussian_scaled(double k, double mu_z, double sigma_z) {
    detail::check_scale_factor(k);
    if (!(sigma_z > 0.0)) throw domain_error("sigma_z must be positive");
    const double f = 1.0 + k;
    const double s2 = sigma_z * sigma_z;
    return std::log(f) + (s2 + k * k * mu_z * mu_z) / (2.0 * f * f * s2) - 0.5;
}

/// Scaled closed form for ReLU outputs with μ_z = 0:
/// [2(k+1)² log(k+1) − k(k+2)] / (k+1)².
/// This is four times kl_relu_scaled_integrated; see the README.
inline double kl_relu_scaled(double k) {
    detail::check_scale_factor(k);
    const double f = 1.0 + k;
    return (2.0 * f * f * std::log(f) - k * (k + 2.0)) / (f * f);
}

/// KL between ReLU(z) and ReLU((1+k)z), z ~ N(0, σ²): the shared mass at 0
/// cancels and the positive half integrates to half the Gaussian divergence,
/// [2(k+1)² log(k+1) − k(k+2)] / (4(k+1)²).
inline double kl_relu_scaled_integrated(double k) {
    detail::check_scale_factor(k);
    const double f = 1.0 + k;
    return (2.0 * f * f * std::log(f) - k * (k + 2.0)) / (4.0 * f * f);
}

namespace detail {
inline double normal_log_density(double x, double mu, double sigma) {
    const double u = (x - mu) / sigma;
    return -0.5 * u * u - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}
}  // namespace detail

/// Monte-Carlo estimate of KL(N(μ,σ²) || N((1+k)μ, (1+k)²σ²)) from the exact
/// log-density ratio at samples of the first distribution.
inline double mc_kl_gaussian_scaled(double k, double mu_z, double sigma_z, std::size_t samples, std::uint64_t seed) {
    detail::check_scale_factor(k);
    if (!(sigma_z > 0.0)) throw domain_error("sigma_z must be positive");
    if (samples == 0) throw validation_error("need at least one sample");
    const double f = 1.0 + k;
    auto eng = make_engine(seed, stream::monte_carlo, 1);
    std::normal_distribution<double> nd(mu_z, sigma_z);
    double acc = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
        const double x = nd(eng);
        acc += detail::normal_log_density(x, mu_z, sigma_z) - detail::normal_log_density(x, f * mu_z, f * sigma_z);
    }
    return acc / static_cast<double>(samples);
}

/// Monte-Carlo estimate of KL(ReLU(z) || ReLU((1+k)z)), z ~ N(0, 1). Samples at
/// the atom (z <= 0) contribute log(½ / ½) = 0.
inline double mc_kl_relu_scaled(double k, std::size_t samples, std::uint64_t seed) {
    detail::check_scale_factor(k);
    if (samples == 0) throw validation_error("need at least one sample");
    const double f = 1.0 + k;
    auto eng = make_engine(seed, stream::monte_carlo, 2);
    std::normal_distribution<double> nd(0.0, 1.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
        const double z = nd(eng);
        if (z <= 0.0) continue;
        acc += detail::normal_log_density(z, 0.0, 1.0) - detail::normal_log_density(z, 0.0, f);
    }
    return acc / static_cast<double>(samples);
}

struct CollinearityCheck {
    bool exactly_collinear = false;
    double similarity = 0.0;
};

/// cos(w, w̃) = 1 only when the perturbation w̃ − w is a non-negative multiple
/// of w (plus the w̃ = −w direction flip, which reports similarity −1).
inline CollinearityCheck check_cauchy_schwarz_condition(std::span<const float> w, std::span<const float> w_tilde) {
    if (w.size() != w_tilde.size()) throw shape_error("vectors differ in length");
    if (l2_norm(w) == 0.0) throw domain_error("reference vector has zero norm");
    CollinearityCheck c;
    c.similarity = cosine(w, w_tilde);
    c.exactly_collinear = c.similarity >= 1.0 - 1e-9;
    return c;
}

enum class NeuronFlag { clean, scaled_neuron, modified };

inline const char* to_string(NeuronFlag f) {
    switch (f) {
        case NeuronFlag::clean: return "Clean";
        case NeuronFlag::scaled_neuron: return "ScaledNeuron";
        case NeuronFlag::modified: return "Modified";
    }
    return "?";
}

struct IntegrityThresholds {
    double cosine_eps = 1e-4;
    double norm_eps = 1e-3;
};

struct NeuronVerdict {
    std::size_t index = 0;
    double cosine_to_reference = 1.0;
    double norm_ratio = 1.0;  // NaN when the reference neuron is zero and the suspect is not
    NeuronFlag flag = NeuronFlag::clean;
};

struct IntegrityVerdict {
    std::size_t layer = 0;
    std::vector<NeuronVerdict> neurons;
    NeuronFlag layer_verdict = NeuronFlag::clean;  // worst flag over neurons
    IntegrityThresholds thresholds;

    [[nodiscard]] std::size_t count(NeuronFlag f) const {
        return static_cast<std::size_t>(
            std::count_if(neurons.begin(), neurons.end(), [f](const NeuronVerdict& n) { return n.flag == f; }));
    }
};

inline NeuronFlag classify_neuron(double cosine_to_reference, double norm_ratio, const IntegrityThresholds& t) {
    if (!(cosine_to_reference >= 1.0 - t.cosine_eps)) return NeuronFlag::modified;
    if (!(std::abs(norm_ratio - 1.0) <= t.norm_eps)) return NeuronFlag::scaled_neuron;
    return NeuronFlag::clean;
}

/// Per-neuron direction and l2-norm comparison of layer l. Expects the suspect
/// to be re-synchronized already.
inline IntegrityVerdict verify_integrity(const ModelBundle& reference, const ModelBundle& suspect, std::size_t l,
                                         IntegrityThresholds th = {}) {
    if (!reference.same_architecture(suspect)) throw architecture_error("reference and suspect architectures differ");
    if (l >= reference.num_layers()) throw validation_error("layer " + std::to_string(l) + " out of range");
    IntegrityVerdict v;
    v.layer = l;
    v.thresholds = th;
    for (std::size_t i = 0; i < reference.layers[l].neurons(); ++i) {
        const auto a = neuron_weights(reference, l, i);
        const auto b = neuron_weights(suspect, l, i);
        const double na = l2_norm(a), nb = l2_norm(b);
        NeuronVerdict n;
        n.index = i;
        if (na == 0.0 && nb == 0.0) {
            n.cosine_to_reference = 1.0;
            n.norm_ratio = 1.0;
        } else {
            n.cosine_to_reference = cosine(a, b);
            n.norm_ratio = na == 0.0 ? std::numeric_limits<double>::quiet_NaN() : nb / na;
        }
        n.flag = classify_neuron(n.cosine_to_reference, n.norm_ratio, th);
        v.layer_verdict = std::max(v.layer_verdict, n.flag);
        v.neurons.push_back(n);
    }
    return v;
}

/// Undoes a pure rescaling: every ScaledNeuron column (with its bias and
/// shift) is divided by its norm ratio.
inline ModelBundle correct_scaling(ModelBundle suspect, const IntegrityVerdict& v) {
    const std::size_t l = v.layer;
    for (const auto& n : v.neurons) {
        if (n.flag != NeuronFlag::scaled_neuron || !(n.norm_ratio > 0.0)) continue;
        const double f = 1.0 / n.norm_ratio;
        auto w = neuron_weights(suspect, l, n.index);
        for (auto& x : w) x = static_cast<float>(static_cast<double>(x) * f);
        set_neuron_weights(suspect, l, n.index, w);
        auto& p = suspect.params[l];
        if (p.bias) (*p.bias)[n.index] = static_cast<float>((*p.bias)[n.index] * f);
        if (p.shift) (*p.shift)[n.index] = static_cast<float>((*p.shift)[n.index] * f);
    }
    return suspect;
}

}  // namespace nwrs
