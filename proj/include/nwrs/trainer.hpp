#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nwrs/error.hpp"
#include "nwrs/model.hpp"
#include "nwrs/rng.hpp"

namespace nwrs {

/// Gradient buffers shaped like LayerParams (empty when the parameter is absent).
struct LayerGrads {
    std::vector<double> weight;
    std::vector<double> bias;
    std::vector<double> scale;
    std::vector<double> shift;
};

struct Gradients {
    std::vector<LayerGrads> layers;

    static Gradients zeros_like(const ModelBundle& m) {
        Gradients g;
        for (std::size_t l = 0; l < m.num_layers(); ++l) {
            const auto& p = m.params[l];
            LayerGrads lg;
            lg.weight.assign(p.weight.size(), 0.0);
            if (p.bias) lg.bias.assign(p.bias->size(), 0.0);
            if (p.scale) lg.scale.assign(p.scale->size(), 0.0);
            if (p.shift) lg.shift.assign(p.shift->size(), 0.0);
            g.layers.push_back(std::move(lg));
        }
        return g;
    }
};

/// Extra loss term evaluated once per mini-batch. Adds its gradient into the
/// buffer and returns its loss value.
using Regularizer = std::function<double(const ModelBundle&, Gradients&)>;

struct TrainConfig {
    std::size_t epochs = 50;
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    Regularizer regularizer;

    [[nodiscard]] TrainingRecord record() const {
        return {epochs, learning_rate, momentum, weight_decay, batch_size, seed};
    }

    static TrainConfig from_record(const TrainingRecord& r) {
        TrainConfig c;
        c.epochs = r.epochs;
        c.learning_rate = r.learning_rate;
        c.momentum = r.momentum;
        c.weight_decay = r.weight_decay;
        c.batch_size = r.batch_size;
        c.seed = r.seed;
        return c;
    }

    void validate() const {
        if (!(learning_rate > 0.0)) throw validation_error("learning rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw validation_error("momentum must lie in [0, 1)");
        if (weight_decay < 0.0) throw validation_error("weight decay must be non-negative");
        if (batch_size == 0) throw validation_error("batch size must be positive");
    }
};

struct TrainResult {
    ModelBundle model;
    std::vector<double> loss_history;  // mean loss per epoch
};

namespace detail {

struct TrainTrace {
    std::vector<std::vector<float>> lin;  // before scale/shift
    std::vector<std::vector<float>> pre;  // enters the activation
    std::vector<std::vector<float>> post;
};

inline void train_forward(const ModelBundle& m, std::span<const float> x, TrainTrace& t) {
    const auto n = m.num_layers();
    t.lin.resize(n);
    t.pre.resize(n);
    t.post.resize(n);
    std::span<const float> in = x;
    for (std::size_t l = 0; l < n; ++l) {
        layer_linear(m.layers[l], m.params[l], in, t.lin[l]);
        channel_affine(m.layers[l], m.params[l], t.lin[l], t.pre[l]);
        activate(m.layers[l].activation, t.pre[l], t.post[l]);
        in = t.post[l];
    }
}

/// Backprop of dL/dpre through one layer. Writes dL/dinput into `dx` and
/// accumulates parameter gradients.
inline void layer_backward(const LayerSpec& s, const LayerParams& p, std::span<const float> x,
                           std::span<const float> lin, std::vector<double> dz, LayerGrads& g,
                           std::vector<double>& dx) {
    const std::size_t n = s.neurons();
    const std::size_t sp = s.spatial_out();
    if (s.has_channel_scale) {
        for (std::size_t o = 0; o < n; ++o) {
            const double gamma = (*p.scale)[o];
            for (std::size_t k = 0; k < sp; ++k) {
                const double d = dz[o * sp + k];
                g.scale[o] += d * lin[o * sp + k];
                g.shift[o] += d;
                dz[o * sp + k] = d * gamma;
            }
        }
    }
    if (s.has_bias)
        for (std::size_t o = 0; o < n; ++o)
            for (std::size_t k = 0; k < sp; ++k) g.bias[o] += dz[o * sp + k];

    dx.assign(s.input_size(), 0.0);
    const float* w = p.weight.data().data();
    if (!s.is_conv()) {
        for (std::size_t i = 0; i < s.in_dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                g.weight[i * n + j] += static_cast<double>(x[i]) * dz[j];
                acc += static_cast<double>(w[i * n + j]) * dz[j];
            }
            dx[i] = acc;
        }
        return;
    }
    const std::size_t oh = s.out_h(), ow = s.out_w(), kh = s.kernel_h, kw = s.kernel_w;
    for (std::size_t o = 0; o < n; ++o) {
        for (std::size_t r = 0; r < oh; ++r) {
            for (std::size_t c = 0; c < ow; ++c) {
                const double d = dz[(o * oh + r) * ow + c];
                if (d == 0.0) continue;
                for (std::size_t ic = 0; ic < s.in_channels; ++ic)
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::size_t wi = ((o * s.in_channels + ic) * kh + u) * kw + v;
                            const std::size_t xi = (ic * s.in_h + r * s.stride + u) * s.in_w + c * s.stride + v;
                            g.weight[wi] += d * x[xi];
                            dx[xi] += d * w[wi];
                        }
            }
        }
    }
}

}  // namespace detail

/// Mean softmax cross-entropy over `batch` and its gradient.
inline double loss_and_gradients(const ModelBundle& m, const Dataset& d, std::span<const std::size_t> batch,
                                 Gradients& grads) {
    grads = Gradients::zeros_like(m);
    if (batch.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    detail::TrainTrace t;
    std::vector<double> dz, dx;
    for (auto idx : batch) {
        const auto x = d.sample(idx);
        detail::train_forward(m, x, t);
        const auto& logits = t.post.back();
        double mx = logits[0];
        for (float v : logits) mx = std::max(mx, static_cast<double>(v));
        double sum = 0.0;
        for (float v : logits) sum += std::exp(v - mx);
        const double log_z = mx + std::log(sum);
        const auto label = d.labels[idx];
        loss += (log_z - logits[label]) * inv;

        dz.assign(logits.size(), 0.0);
        for (std::size_t k = 0; k < logits.size(); ++k)
            dz[k] = (std::exp(logits[k] - log_z) - (k == label ? 1.0 : 0.0)) * inv;

        for (std::size_t l = m.num_layers(); l-- > 0;) {
            const auto& s = m.layers[l];
            if (s.activation == Activation::relu)
                for (std::size_t k = 0; k < dz.size(); ++k)
                    if (!(t.pre[l][k] > 0.0f)) dz[k] = 0.0;
            const std::span<const float> in = l == 0 ? x : std::span<const float>(t.post[l - 1]);
            detail::layer_backward(s, m.params[l], in, t.lin[l], dz, grads.layers[l], dx);
            dz.swap(dx);
        }
    }
    return loss;
}

namespace detail {

inline void sgd_step(std::span<float> w, std::span<const double> g, std::vector<double>& v, const TrainConfig& c) {
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double step = g[i] + c.weight_decay * static_cast<double>(w[i]);
        v[i] = c.momentum * v[i] + step;
        w[i] = static_cast<float>(static_cast<double>(w[i]) - c.learning_rate * v[i]);
    }
}

}  // namespace detail

/// Mini-batch SGD with momentum and L2 weight decay on every parameter.
/// Momentum buffers start at zero; the shuffle of epoch e depends only on (seed, e).
inline TrainResult train(ModelBundle m, const Dataset& d, const TrainConfig& cfg) {
    cfg.validate();
    m.validate();
    if (m.num_classes() != d.num_classes)
        throw shape_error("model output size does not match dataset classes");
    if (d.sample_size() != shape_numel(m.input_shape))
        throw shape_error("dataset samples do not match model input " + shape_str(m.input_shape));

    TrainResult r;
    if (cfg.epochs == 0) {
        r.model = std::move(m);
        return r;
    }

    Gradients vel = Gradients::zeros_like(m);
    Gradients grads;
    std::vector<std::size_t> order(d.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto eng = make_engine(cfg.seed, stream::shuffle, epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[eng() % i]);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const auto len = std::min(cfg.batch_size, order.size() - start);
            const std::span<const std::size_t> batch(order.data() + start, len);
            double loss = loss_and_gradients(m, d, batch, grads);
            if (cfg.regularizer) loss += cfg.regularizer(m, grads);
            if (!std::isfinite(loss))
                throw training_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batches) + " (learning rate " +
                                     std::to_string(cfg.learning_rate) + ")");
            for (std::size_t l = 0; l < m.num_layers(); ++l) {
                auto& p = m.params[l];
                auto& g = grads.layers[l];
                auto& v = vel.layers[l];
                detail::sgd_step(p.weight.data(), g.weight, v.weight, cfg);
                if (p.bias) detail::sgd_step(p.bias->data(), g.bias, v.bias, cfg);
                if (p.scale) detail::sgd_step(p.scale->data(), g.scale, v.scale, cfg);
                if (p.shift) detail::sgd_step(p.shift->data(), g.shift, v.shift, cfg);
            }
            epoch_loss += loss;
            ++batches;
        }
        r.loss_history.push_back(epoch_loss / static_cast<double>(batches));
    }
    m.metadata.training = cfg.record();
    r.model = std::move(m);
    return r;
}

/// Number of extra epochs for a fine-tuning budget of `theta` percent.
inline std::size_t fine_tune_epochs(double theta, std::size_t base_epochs) {
    if (!(theta >= 0.0)) throw validation_error("fine-tuning percentage must be non-negative");
    return static_cast<std::size_t>(std::llround(theta / 100.0 * static_cast<double>(base_epochs)));
}

/// Resumes training of the whole model for round(theta% of base epochs),
/// with fresh momentum buffers.
inline ModelBundle fine_tune(const ModelBundle& m, const Dataset& d, double theta, const TrainConfig& base) {
    TrainConfig cfg = base;
    cfg.epochs = fine_tune_epochs(theta, base.epochs);
    auto saved = m.metadata.training;
    auto out = train(m, d, cfg).model;
    out.metadata.training = saved;
    return out;
}

}  // namespace nwrs
