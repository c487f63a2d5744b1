#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nwrs/error.hpp"
#include "nwrs/rng.hpp"
#include "nwrs/tensor.hpp"

namespace nwrs {

enum class LayerKind { fully_connected, conv2d };
enum class Activation { relu, identity };

/// One layer of a sequential network. FC weights are stored in×out so that a
/// neuron is a column; conv weights are outC×inC×kh×kw (a neuron is a filter).
struct LayerSpec {
    LayerKind kind = LayerKind::fully_connected;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    Activation activation = Activation::relu;
    bool has_bias = true;
    bool has_channel_scale = false;

    static LayerSpec fc(std::size_t in, std::size_t out, Activation act, bool bias = true, bool scale = false) {
        LayerSpec s;
        s.kind = LayerKind::fully_connected;
        s.in_dim = in;
        s.out_dim = out;
        s.activation = act;
        s.has_bias = bias;
        s.has_channel_scale = scale;
        return s;
    }

    static LayerSpec conv(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw, std::size_t in_h,
                          std::size_t in_w, Activation act, bool bias = true, bool scale = false,
                          std::size_t stride = 1) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.in_channels = in_c;
        s.out_channels = out_c;
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.in_h = in_h;
        s.in_w = in_w;
        s.stride = stride;
        s.activation = act;
        s.has_bias = bias;
        s.has_channel_scale = scale;
        return s;
    }

    [[nodiscard]] bool is_conv() const noexcept { return kind == LayerKind::conv2d; }

    /// N_l: output neurons (FC) or output channels (conv).
    [[nodiscard]] std::size_t neurons() const noexcept { return is_conv() ? out_channels : out_dim; }

    /// Input axis length a neuron's weight vector spans per unit of the previous layer.
    [[nodiscard]] std::size_t fan_in() const noexcept {
        return is_conv() ? in_channels * kernel_h * kernel_w : in_dim;
    }

    [[nodiscard]] std::size_t out_h() const noexcept {
        return is_conv() ? (in_h - kernel_h) / stride + 1 : 1;
    }
    [[nodiscard]] std::size_t out_w() const noexcept {
        return is_conv() ? (in_w - kernel_w) / stride + 1 : 1;
    }
    /// M_l: spatial positions per output neuron.
    [[nodiscard]] std::size_t spatial_out() const noexcept { return out_h() * out_w(); }

    [[nodiscard]] std::size_t input_size() const noexcept {
        return is_conv() ? in_channels * in_h * in_w : in_dim;
    }
    [[nodiscard]] std::size_t output_size() const noexcept { return neurons() * spatial_out(); }

    [[nodiscard]] shape_t weight_shape() const {
        if (is_conv()) return {out_channels, in_channels, kernel_h, kernel_w};
        return {in_dim, out_dim};
    }

    void validate() const {
        if (is_conv()) {
            if (!in_channels || !out_channels || !kernel_h || !kernel_w || !stride || !in_h || !in_w)
                throw architecture_error("conv layer has a zero dimension");
            if (kernel_h > in_h || kernel_w > in_w)
                throw architecture_error("conv kernel larger than its input");
        } else if (!in_dim || !out_dim) {
            throw architecture_error("fully-connected layer has a zero dimension");
        }
    }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Per-layer tensors; optional entries follow the LayerSpec flags.
struct LayerParams {
    Tensor weight;
    std::optional<Tensor> bias;
    std::optional<Tensor> scale;
    std::optional<Tensor> shift;

    [[nodiscard]] bool bit_equal(const LayerParams& o) const {
        auto opt_eq = [](const std::optional<Tensor>& a, const std::optional<Tensor>& b) {
            return a.has_value() == b.has_value() && (!a || a->bit_equal(*b));
        };
        return weight.bit_equal(o.weight) && opt_eq(bias, o.bias) && opt_eq(scale, o.scale) &&
               opt_eq(shift, o.shift);
    }
};

struct DatasetSpec {
    std::size_t num_classes = 4;
    std::size_t per_class = 100;
    std::size_t dim = 8;
    std::uint64_t seed = 0;
    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct TrainingRecord {
    std::size_t epochs = 50;
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

/// Public half of a watermark record. The bits stay with the verifier.
struct WatermarkInfo {
    std::size_t layer = 0;
    std::size_t bit_count = 0;
    std::uint64_t projection_seed = 0;
    double lambda = 0.0;
    friend bool operator==(const WatermarkInfo&, const WatermarkInfo&) = default;
};

struct Metadata {
    std::uint64_t seed = 0;
    std::optional<DatasetSpec> dataset;
    std::optional<TrainingRecord> training;
    std::optional<WatermarkInfo> watermark;
    friend bool operator==(const Metadata&, const Metadata&) = default;
};

class ModelBundle {
public:
    shape_t input_shape;
    std::vector<LayerSpec> layers;
    std::vector<LayerParams> params;
    Metadata metadata;

    [[nodiscard]] std::size_t num_layers() const noexcept { return layers.size(); }
    [[nodiscard]] std::size_t num_classes() const { return layers.back().neurons(); }

    /// Layers whose neurons may be permuted without relabelling the output.
    [[nodiscard]] std::vector<std::size_t> permutable_layers() const {
        std::vector<std::size_t> out;
        for (std::size_t l = 0; l + 1 < layers.size(); ++l) out.push_back(l);
        return out;
    }

    void validate() const {
        if (layers.empty()) throw architecture_error("model has no layers");
        if (params.size() != layers.size())
            throw architecture_error("model has " + std::to_string(layers.size()) + " layers but " +
                                     std::to_string(params.size()) + " parameter sets");
        if (shape_numel(input_shape) != layers.front().input_size())
            throw architecture_error("input shape " + shape_str(input_shape) + " does not feed layer 0");
        if (layers.back().activation != Activation::identity)
            throw architecture_error("last layer must have identity activation");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& s = layers[l];
            s.validate();
            if (l > 0) {
                const auto& prev = layers[l - 1];
                if (prev.output_size() != s.input_size())
                    throw architecture_error("layer " + std::to_string(l - 1) + " output does not chain into layer " +
                                             std::to_string(l));
                if (s.is_conv()) {
                    if (!prev.is_conv() || prev.out_channels != s.in_channels || prev.out_h() != s.in_h ||
                        prev.out_w() != s.in_w)
                        throw architecture_error("conv layer " + std::to_string(l) +
                                                 " must follow a conv layer with matching geometry");
                }
            } else if (s.is_conv() && input_shape.size() == 3 &&
                       (input_shape[0] != s.in_channels || input_shape[1] != s.in_h || input_shape[2] != s.in_w)) {
                throw architecture_error("input shape " + shape_str(input_shape) + " does not match conv layer 0");
            }
            const auto& p = params[l];
            const auto name = "layer " + std::to_string(l);
            if (p.weight.shape() != s.weight_shape())
                throw architecture_error(name + " weight has shape " + shape_str(p.weight.shape()) + ", expected " +
                                         shape_str(s.weight_shape()));
            auto check_vec = [&](const std::optional<Tensor>& t, bool expected, const char* what) {
                if (t.has_value() != expected)
                    throw architecture_error(name + (expected ? " is missing " : " has unexpected ") + what);
                if (t && t->shape() != shape_t{s.neurons()})
                    throw architecture_error(name + " " + what + " has shape " + shape_str(t->shape()));
            };
            check_vec(p.bias, s.has_bias, "bias");
            check_vec(p.scale, s.has_channel_scale, "scale");
            check_vec(p.shift, s.has_channel_scale, "shift");
        }
    }

    [[nodiscard]] bool same_architecture(const ModelBundle& o) const {
        return input_shape == o.input_shape && layers == o.layers;
    }

    [[nodiscard]] bool bit_equal(const ModelBundle& o) const {
        if (!same_architecture(o) || params.size() != o.params.size()) return false;
        for (std::size_t l = 0; l < params.size(); ++l)
            if (!params[l].bit_equal(o.params[l])) return false;
        return true;
    }
};

/// Fresh parameters: He-uniform weights, small uniform biases, unit scale, zero shift.
inline ModelBundle init_model(shape_t input_shape, std::vector<LayerSpec> layers, std::uint64_t seed) {
    ModelBundle m;
    m.input_shape = std::move(input_shape);
    m.layers = std::move(layers);
    m.metadata.seed = seed;
    auto eng = make_engine(seed, stream::init);
    for (const auto& s : m.layers) {
        s.validate();
        LayerParams p;
        p.weight = Tensor(s.weight_shape());
        const double fan = static_cast<double>(s.fan_in());
        std::uniform_real_distribution<double> wdist(-std::sqrt(6.0 / fan), std::sqrt(6.0 / fan));
        for (auto& w : p.weight.data()) w = static_cast<float>(wdist(eng));
        if (s.has_bias) {
            p.bias = Tensor({s.neurons()});
            std::uniform_real_distribution<double> bdist(-1.0 / std::sqrt(fan), 1.0 / std::sqrt(fan));
            for (auto& b : p.bias->data()) b = static_cast<float>(bdist(eng));
        }
        if (s.has_channel_scale) {
            p.scale = Tensor(shape_t{s.neurons()}, std::vector<float>(s.neurons(), 1.0f));
            p.shift = Tensor({s.neurons()});
        }
        m.params.push_back(std::move(p));
    }
    m.validate();
    return m;
}

/// Reference MLP 8→32→32→4 (ReLU, bias).
inline ModelBundle make_reference_mlp(std::uint64_t seed, std::size_t in = 8, std::size_t hidden = 32,
                                      std::size_t classes = 4) {
    return init_model({in},
                      {LayerSpec::fc(in, hidden, Activation::relu), LayerSpec::fc(hidden, hidden, Activation::relu),
                       LayerSpec::fc(hidden, classes, Activation::identity)},
                      seed);
}

/// Reference conv net: 1×8×8 → Conv(1→8,3×3) → Conv(8→8,3×3) → flatten → FC→4.
/// Conv layers carry folded batch-norm scale/shift.
inline ModelBundle make_reference_conv(std::uint64_t seed, std::size_t classes = 4) {
    return init_model({1, 8, 8},
                      {LayerSpec::conv(1, 8, 3, 3, 8, 8, Activation::relu, true, true),
                       LayerSpec::conv(8, 8, 3, 3, 6, 6, Activation::relu, true, true),
                       LayerSpec::fc(8 * 4 * 4, classes, Activation::identity)},
                      seed);
}

/// Per-layer values of one forward pass. `pre[l]` is what enters the
/// activation (after bias and scale/shift), `post[l]` what leaves it.
struct ForwardTrace {
    std::vector<std::vector<float>> pre;
    std::vector<std::vector<float>> post;

    [[nodiscard]] const std::vector<float>& output() const { return post.back(); }
};

namespace detail {

/// Affine part of a layer without the channel scale/shift.
inline void layer_linear(const LayerSpec& s, const LayerParams& p, std::span<const float> x, std::vector<float>& a) {
    const std::size_t n = s.neurons();
    a.assign(s.output_size(), 0.0f);
    const float* w = p.weight.data().data();
    if (!s.is_conv()) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = s.has_bias ? (*p.bias)[j] : 0.0;
            for (std::size_t i = 0; i < s.in_dim; ++i) acc += static_cast<double>(x[i]) * w[i * n + j];
            a[j] = static_cast<float>(acc);
        }
        return;
    }
    const std::size_t oh = s.out_h(), ow = s.out_w(), kh = s.kernel_h, kw = s.kernel_w;
    for (std::size_t o = 0; o < n; ++o) {
        const float* wo = w + o * s.in_channels * kh * kw;
        for (std::size_t r = 0; r < oh; ++r) {
            for (std::size_t c = 0; c < ow; ++c) {
                double acc = s.has_bias ? (*p.bias)[o] : 0.0;
                for (std::size_t ic = 0; ic < s.in_channels; ++ic)
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v)
                            acc += static_cast<double>(wo[(ic * kh + u) * kw + v]) *
                                   x[(ic * s.in_h + r * s.stride + u) * s.in_w + c * s.stride + v];
                a[(o * oh + r) * ow + c] = static_cast<float>(acc);
            }
        }
    }
}

inline void channel_affine(const LayerSpec& s, const LayerParams& p, std::span<const float> a, std::vector<float>& z) {
    z.assign(a.begin(), a.end());
    if (!s.has_channel_scale) return;
    const std::size_t m = s.spatial_out();
    for (std::size_t o = 0; o < s.neurons(); ++o)
        for (std::size_t k = 0; k < m; ++k) z[o * m + k] = a[o * m + k] * (*p.scale)[o] + (*p.shift)[o];
}

inline void activate(Activation a, std::span<const float> z, std::vector<float>& y) {
    y.assign(z.begin(), z.end());
    if (a == Activation::relu)
        for (auto& v : y) v = v > 0.0f ? v : 0.0f;
}

}  // namespace detail

/// Forward pass of one sample (flat, matching the input shape).
inline ForwardTrace forward(const ModelBundle& m, std::span<const float> x) {
    if (x.size() != shape_numel(m.input_shape))
        throw shape_error("input of length " + std::to_string(x.size()) + " does not match input shape " +
                          shape_str(m.input_shape));
    ForwardTrace t;
    t.pre.resize(m.layers.size());
    t.post.resize(m.layers.size());
    std::span<const float> in = x;
    std::vector<float> lin;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        detail::layer_linear(m.layers[l], m.params[l], in, lin);
        detail::channel_affine(m.layers[l], m.params[l], lin, t.pre[l]);
        detail::activate(m.layers[l].activation, t.pre[l], t.post[l]);
        in = t.post[l];
    }
    return t;
}

inline ForwardTrace forward(const ModelBundle& m, const Tensor& x) {
    if (x.shape() != m.input_shape && x.shape() != shape_t{shape_numel(m.input_shape)})
        throw shape_error("input shape " + shape_str(x.shape()) + " does not match model input " +
                          shape_str(m.input_shape));
    return forward(m, x.data());
}

/// Labelled samples. `inputs` is n × (sample shape).
struct Dataset {
    Tensor inputs;
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::string name;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
    [[nodiscard]] std::size_t sample_size() const { return inputs.size() / labels.size(); }
    [[nodiscard]] shape_t sample_shape() const { return shape_t(inputs.shape().begin() + 1, inputs.shape().end()); }
    [[nodiscard]] std::span<const float> sample(std::size_t i) const {
        const auto n = sample_size();
        return inputs.data().subspan(i * n, n);
    }
};

/// Gaussian blobs: class c is centred on a vertex of a regular simplex of
/// radius 2 and has isotropic covariance with unit total variance.
inline Dataset make_blobs(std::uint64_t seed, std::size_t num_classes, std::size_t per_class, std::size_t dim) {
    if (!num_classes || !per_class || !dim) throw validation_error("make_blobs arguments must be positive");
    if (dim + 1 < num_classes)
        throw validation_error("a " + std::to_string(num_classes) + "-vertex simplex needs dim >= " +
                               std::to_string(num_classes - 1));
    // Helmert basis of the centred simplex: vertex c has coordinate h_k[c] on axis k-1.
    const double k_count = static_cast<double>(num_classes);
    const double radius_scale = num_classes > 1 ? 2.0 / std::sqrt(1.0 - 1.0 / k_count) : 0.0;
    std::vector<std::vector<double>> centre(num_classes, std::vector<double>(dim, 0.0));
    for (std::size_t k = 1; k < num_classes; ++k) {
        const double norm = std::sqrt(static_cast<double>(k * (k + 1)));
        for (std::size_t c = 0; c < num_classes; ++c) {
            double h = 0.0;
            if (c < k) h = 1.0 / norm;
            else if (c == k) h = -static_cast<double>(k) / norm;
            centre[c][k - 1] = radius_scale * h;
        }
    }
    const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
    auto eng = make_engine(seed, stream::data, num_classes * 1000003ULL + dim);
    std::normal_distribution<double> nd(0.0, sd);
    Dataset d;
    d.num_classes = num_classes;
    d.name = "blobs";
    std::vector<float> xs;
    xs.reserve(num_classes * per_class * dim);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t j = 0; j < dim; ++j) xs.push_back(static_cast<float>(centre[c][j] + nd(eng)));
            d.labels.push_back(c);
        }
    }
    d.inputs = Tensor({num_classes * per_class, dim}, std::move(xs));
    return d;
}

inline Dataset make_blobs(const DatasetSpec& s) { return make_blobs(s.seed, s.num_classes, s.per_class, s.dim); }

/// Same samples viewed with a different per-sample shape (e.g. 64 → 1×8×8).
inline Dataset reshape_samples(Dataset d, const shape_t& sample_shape) {
    if (shape_numel(sample_shape) != d.sample_size())
        throw shape_error("cannot view samples of size " + std::to_string(d.sample_size()) + " as " +
                          shape_str(sample_shape));
    shape_t full{d.size()};
    full.insert(full.end(), sample_shape.begin(), sample_shape.end());
    d.inputs = Tensor(full, d.inputs.values());
    return d;
}

/// Dataset matching the model's input shape, built from a spec.
inline Dataset dataset_for(const ModelBundle& m, const DatasetSpec& s) {
    return reshape_samples(make_blobs(s), m.input_shape);
}

inline std::size_t argmax(std::span<const float> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

/// Top-1 error in percent; ties go to the lowest class index.
inline double error_rate(const ModelBundle& m, const Dataset& d) {
    if (m.num_classes() != d.num_classes)
        throw shape_error("model has " + std::to_string(m.num_classes()) + " outputs but dataset has " +
                          std::to_string(d.num_classes) + " classes");
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (argmax(forward(m, d.sample(i)).output()) != d.labels[i]) ++wrong;
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(d.size());
}

}  // namespace nwrs
