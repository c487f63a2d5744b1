#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nwrs/error.hpp"
#include "nwrs/rng.hpp"

namespace nwrs {

using shape_t = std::vector<std::size_t>;

inline std::string shape_str(const shape_t& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline std::size_t shape_numel(const shape_t& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major float32 array.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(shape_t shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {
        check_dims();
    }

    Tensor(shape_t shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (shape_numel(shape_) != data_.size())
            throw shape_error("tensor of shape " + shape_str(shape_) + " cannot hold " +
                              std::to_string(data_.size()) + " elements");
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data) {
        return Tensor({rows, cols}, std::move(data));
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
        return t;
    }

    [[nodiscard]] const shape_t& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::span<float> data() noexcept { return data_; }
    [[nodiscard]] std::span<const float> data() const noexcept { return data_; }
    [[nodiscard]] const std::vector<float>& values() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and payload (distinguishes -0.0 from 0.0).
    [[nodiscard]] bool bit_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        return std::equal(data_.begin(), data_.end(), o.data_.begin(), [](float a, float b) {
            return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
        });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_dims() const {
        for (auto d : shape_)
            if (d == 0) throw shape_error("tensor dims must be positive, got " + shape_str(shape_));
    }

    shape_t shape_;
    std::vector<float> data_;
};

/// a[m×k] · b[k×n]. Each output accumulates in double, left to right over k.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw shape_error("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw shape_error("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += static_cast<double>(a(i, t)) * b(t, j);
            out(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw shape_error("transpose needs a matrix");
    Tensor out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
    return out;
}

inline double dot(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size())
        throw shape_error("dot of vectors with lengths " + std::to_string(u.size()) + " and " +
                          std::to_string(v.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += static_cast<double>(u[i]) * v[i];
    return acc;
}

inline double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

inline double l1_norm(std::span<const float> v) {
    double acc = 0.0;
    for (float x : v) acc += std::abs(static_cast<double>(x));
    return acc;
}

/// Cosine similarity; 0.0 when either vector has zero norm.
inline double cosine(std::span<const float> u, std::span<const float> v) {
    const double uv = dot(u, v);
    const double nu = l2_norm(u), nv = l2_norm(v);
    if (nu == 0.0 || nv == 0.0) return 0.0;
    return std::clamp(uv / (nu * nv), -1.0, 1.0);
}

/// Bijection on {0..n-1}; map[i] is the image of i.
class Permutation {
public:
    Permutation() = default;

    explicit Permutation(std::vector<std::size_t> map) : map_(std::move(map)) {
        if (map_.empty()) throw validation_error("permutation must have positive size");
        std::vector<char> seen(map_.size(), 0);
        for (std::size_t i = 0; i < map_.size(); ++i) {
            const auto v = map_[i];
            if (v >= map_.size() || seen[v])
                throw validation_error("not a bijection: entry " + std::to_string(i) + " maps to " +
                                       std::to_string(v));
            seen[v] = 1;
        }
    }

    static Permutation identity(std::size_t n) {
        std::vector<std::size_t> m(n);
        std::iota(m.begin(), m.end(), std::size_t{0});
        return Permutation(std::move(m));
    }

    static Permutation swap(std::size_t n, std::size_t a, std::size_t b) {
        auto p = identity(n);
        std::swap(p.map_.at(a), p.map_.at(b));
        return p;
    }

    static Permutation random(std::size_t n, std::uint64_t seed) {
        auto p = identity(n);
        auto eng = make_engine(seed, stream::permutation, n);
        // Fisher-Yates over the engine directly; std::shuffle is implementation-defined.
        for (std::size_t i = n; i > 1; --i) {
            const auto j = static_cast<std::size_t>(eng() % i);
            std::swap(p.map_[i - 1], p.map_[j]);
        }
        return p;
    }

    /// Uniform over permutations without fixed points (rejection, ~e draws).
    static Permutation random_derangement(std::size_t n, std::uint64_t seed) {
        if (n < 2) throw validation_error("a derangement needs at least two elements");
        auto eng = make_engine(seed, stream::permutation, n + (std::uint64_t{1} << 32));
        for (;;) {
            auto p = identity(n);
            for (std::size_t i = n; i > 1; --i) {
                const auto j = static_cast<std::size_t>(eng() % i);
                std::swap(p.map_[i - 1], p.map_[j]);
            }
            bool fixed = false;
            for (std::size_t i = 0; i < n && !fixed; ++i) fixed = p.map_[i] == i;
            if (!fixed) return p;
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return map_.size(); }
    [[nodiscard]] const std::vector<std::size_t>& map() const noexcept { return map_; }
    std::size_t operator()(std::size_t i) const { return map_[i]; }
    std::size_t operator[](std::size_t i) const { return map_[i]; }

    [[nodiscard]] bool is_identity() const {
        for (std::size_t i = 0; i < map_.size(); ++i)
            if (map_[i] != i) return false;
        return true;
    }

    friend bool operator==(const Permutation&, const Permutation&) = default;

private:
    std::vector<std::size_t> map_;
};

/// (p ∘ q)(i) = p(q(i)).
inline Permutation compose(const Permutation& p, const Permutation& q) {
    if (p.size() != q.size())
        throw validation_error("compose of permutations with sizes " + std::to_string(p.size()) + " and " +
                               std::to_string(q.size()));
    std::vector<std::size_t> m(p.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p(q(i));
    return Permutation(std::move(m));
}

inline Permutation inverse(const Permutation& p) {
    std::vector<std::size_t> m(p.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[p(i)] = i;
    return Permutation(std::move(m));
}

/// Permutation matrix with a 1 at (i, p(i)). Right-multiplying a matrix by it
/// moves column i to column p(i).
inline Tensor matrix_view(const Permutation& p) {
    Tensor t({p.size(), p.size()});
    for (std::size_t i = 0; i < p.size(); ++i) t(i, p(i)) = 1.0f;
    return t;
}

}  // namespace nwrs
