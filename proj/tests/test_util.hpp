#pragma once

#include <cstdint>
#include <map>
#include <utility>

#include "nwrs/nwrs.hpp"

namespace nwrs::fixture {

/// Trained reference models are shared between tests of one binary.
inline const ModelBundle& reference(bool conv = false, std::uint64_t seed = 1) {
    static std::map<std::pair<bool, std::uint64_t>, ModelBundle> cache;
    auto it = cache.find({conv, seed});
    if (it == cache.end()) it = cache.emplace(std::pair{conv, seed}, generate_reference(seed, conv)).first;
    return it->second;
}

inline Tensor random_input(const ModelBundle& m, std::uint64_t seed) {
    auto eng = make_engine(seed, stream::inputs);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    Tensor x(m.input_shape);
    for (auto& v : x.data()) v = nd(eng);
    return x;
}

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    float d = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

/// 16 -> 8 (ReLU) -> 2 network whose first-layer neurons have well separated
/// directions but l1 norms 1, 1 + gap, 1 + 2·gap, ...
inline ModelBundle norm_gap_model(std::uint64_t seed, double gap) {
    auto m = init_model({16}, {LayerSpec::fc(16, 8, Activation::relu), LayerSpec::fc(8, 2, Activation::identity)}, seed);
    for (std::size_t i = 0; i < 8; ++i) {
        auto v = neuron_weights(m, 0, i);
        const double target = 1.0 + gap * static_cast<double>(i);
        const double n1 = l1_norm(v);
        for (auto& x : v) x = static_cast<float>(static_cast<double>(x) * target / n1);
        set_neuron_weights(m, 0, i, v);
    }
    return m;
}

/// Random valid bundle: MLP or conv stack with random widths, optional
/// bias/scale/shift, awkward float values and random metadata.
inline ModelBundle random_bundle(std::uint64_t seed) {
    auto eng = make_engine(seed, stream::inputs, 31337);
    auto pick = [&](std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(eng() % (hi - lo + 1)); };
    auto coin = [&] { return (eng() & 1) != 0; };
    std::vector<LayerSpec> layers;
    shape_t input;
    if (coin()) {
        std::size_t c = pick(1, 3), h = pick(4, 7), w = pick(4, 7);
        input = {c, h, w};
        for (std::size_t k = pick(1, 2); k-- > 0;) {
            const std::size_t oc = pick(1, 4), kh = pick(1, std::min<std::size_t>(3, h)), kw = pick(1, std::min<std::size_t>(3, w)),
                              st = pick(1, 2);
            layers.push_back(LayerSpec::conv(c, oc, kh, kw, h, w, Activation::relu, coin(), coin(), st));
            c = oc;
            h = layers.back().out_h();
            w = layers.back().out_w();
        }
        layers.push_back(LayerSpec::fc(c * h * w, pick(1, 5), Activation::identity, coin(), coin()));
    } else {
        std::size_t in = pick(1, 9);
        input = {in};
        for (std::size_t k = pick(0, 3); k-- > 0;) {
            const std::size_t out = pick(1, 9);
            layers.push_back(LayerSpec::fc(in, out, Activation::relu, coin(), coin()));
            in = out;
        }
        layers.push_back(LayerSpec::fc(in, pick(1, 5), Activation::identity, coin(), coin()));
    }
    auto m = init_model(input, layers, seed);
    const float special[] = {0.0f, -0.0f, 1e-40f, -3.4e38f, 1.17549435e-38f, 0.1f};
    std::normal_distribution<float> nd(0.0f, 10.0f);
    auto fill = [&](Tensor& t) {
        for (auto& v : t.data()) v = (eng() % 8 == 0) ? special[eng() % 6] : nd(eng);
    };
    for (auto& p : m.params) {
        fill(p.weight);
        if (p.bias) fill(*p.bias);
        if (p.scale) fill(*p.scale);
        if (p.shift) fill(*p.shift);
    }
    m.metadata.seed = eng();
    if (coin()) m.metadata.dataset = DatasetSpec{pick(1, 9), pick(1, 100), pick(1, 64), eng()};
    if (coin()) {
        TrainConfig c;
        c.epochs = pick(0, 100);
        c.learning_rate = std::ldexp(static_cast<double>(eng() >> 11), -53) + 1e-9;
        c.momentum = 0.3;
        c.weight_decay = 1.0 / 3.0;
        c.batch_size = pick(1, 64);
        c.seed = eng();
        m.metadata.training = c.record();
    }
    if (coin()) m.metadata.watermark = WatermarkInfo{pick(0, m.num_layers() - 1), pick(1, 128), eng(), 0.01 * pick(1, 9)};
    return m;
}

}  // namespace nwrs::fixture
