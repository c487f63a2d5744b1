#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "nwrs/attack.hpp"
#include "nwrs/error.hpp"
#include "nwrs/model.hpp"
#include "nwrs/tensor.hpp"

namespace nwrs {

/// Pairwise cosine between reference neurons (rows) and suspect neurons (columns).
struct SimilarityMatrix {
    Tensor values;

    [[nodiscard]] std::size_t size() const { return values.dim(0); }
    double operator()(std::size_t i, std::size_t j) const { return values(i, j); }
};

/// One weight vector per neuron: FC columns, or conv filters flattened (inC, kh, kw).
/// Bias and scale/shift are not part of the vector.
inline std::vector<std::vector<float>> neuron_vectors(const LayerSpec& s, const Tensor& weight) {
    if (weight.shape() != s.weight_shape())
        throw shape_error("weight of shape " + shape_str(weight.shape()) + " does not match layer " +
                          shape_str(s.weight_shape()));
    std::vector<std::vector<float>> out(s.neurons(), std::vector<float>(s.fan_in()));
    for (std::size_t i = 0; i < s.neurons(); ++i) {
        if (!s.is_conv()) {
            for (std::size_t r = 0; r < s.in_dim; ++r) out[i][r] = weight[r * s.out_dim + i];
        } else {
            std::copy_n(weight.data().begin() + i * s.fan_in(), s.fan_in(), out[i].begin());
        }
    }
    return out;
}

inline SimilarityMatrix similarity_matrix(const LayerSpec& s, const Tensor& reference, const Tensor& suspect) {
    if (reference.shape() != suspect.shape())
        throw shape_error("reference " + shape_str(reference.shape()) + " and suspect " +
                          shape_str(suspect.shape()) + " layers differ in shape");
    const auto a = neuron_vectors(s, reference);
    const auto b = neuron_vectors(s, suspect);
    const std::size_t n = a.size();
    SimilarityMatrix S{Tensor({n, n})};
    // Rows are independent of each other.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) S.values(i, j) = static_cast<float>(cosine(a[i], b[j]));
    return S;
}

inline SimilarityMatrix similarity_matrix(const ModelBundle& reference, const ModelBundle& suspect, std::size_t l) {
    if (l >= reference.num_layers() || l >= suspect.num_layers() || reference.layers[l] != suspect.layers[l])
        throw architecture_error("layer " + std::to_string(l) + " differs between reference and suspect");
    return similarity_matrix(reference.layers[l], reference.params[l].weight, suspect.params[l].weight);
}

enum class MatchMethod { greedy_global, exact_assignment, row_argmax };

inline const char* to_string(MatchMethod m) {
    switch (m) {
        case MatchMethod::greedy_global: return "greedy";
        case MatchMethod::exact_assignment: return "exact";
        case MatchMethod::row_argmax: return "rowargmax";
    }
    return "?";
}

inline MatchMethod parse_match_method(const std::string& s) {
    if (s == "greedy" || s == "GreedyGlobal") return MatchMethod::greedy_global;
    if (s == "exact" || s == "ExactAssignment") return MatchMethod::exact_assignment;
    if (s == "rowargmax" || s == "RowArgmax") return MatchMethod::row_argmax;
    throw validation_error("unknown matching method '" + s + "'");
}

/// `perm(i) = j` pairs reference neuron i with suspect neuron j.
struct MatchResult {
    Permutation perm;
    double total = 0.0;       // sum of matched similarities, accumulated in row order
    double min_margin = 0.0;  // min over rows of matched value minus the best other value in that row
    std::size_t ties = 0;     // rows whose maximum is attained more than once
    std::size_t duplicates = 0;  // row_argmax only: rows that collided on a column
};

inline double assignment_total(const SimilarityMatrix& S, const Permutation& p) {
    double t = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) t += S(i, p(i));
    return t;
}

namespace detail {

inline void check_similarity(const SimilarityMatrix& S) {
    if (S.values.rank() != 2 || S.values.dim(0) != S.values.dim(1))
        throw shape_error("similarity matrix must be square, got " + shape_str(S.values.shape()));
    for (float v : S.values.data())
        if (std::isnan(v)) throw validation_error("similarity matrix contains NaN");
}

inline std::vector<std::size_t> greedy_global(const SimilarityMatrix& S) {
    const std::size_t n = S.size();
    std::vector<std::size_t> cells(n * n);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    // Largest first; equal values resolve to the lowest (row, column).
    std::stable_sort(cells.begin(), cells.end(),
                     [&](std::size_t a, std::size_t b) { return S.values[a] > S.values[b]; });
    std::vector<std::size_t> map(n, n);
    std::vector<char> col_used(n, 0);
    std::size_t matched = 0;
    for (auto c : cells) {
        const std::size_t i = c / n, j = c % n;
        if (map[i] != n || col_used[j]) continue;
        map[i] = j;
        col_used[j] = 1;
        if (++matched == n) break;
    }
    return map;
}

/// Kuhn-Munkres with potentials, O(n^3), maximizing total similarity.
inline std::vector<std::size_t> hungarian_max(const SimilarityMatrix& S) {
    const std::size_t n = S.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = -S(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<std::size_t> map(n);
    for (std::size_t j = 1; j <= n; ++j) map[p[j] - 1] = j - 1;
    return map;
}

inline void fill_diagnostics(const SimilarityMatrix& S, MatchResult& r) {
    const std::size_t n = S.size();
    r.total = assignment_total(S, r.perm);
    r.min_margin = std::numeric_limits<double>::infinity();
    r.ties = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = r.perm(i);
        double best_other = -1.0;  // cosine lower bound; used as-is when n == 1
        double row_max = -std::numeric_limits<double>::infinity();
        std::size_t at_max = 0;
        for (std::size_t k = 0; k < n; ++k) {
            const double v = S(i, k);
            if (k != j) best_other = std::max(best_other, v);
            if (v > row_max) {
                row_max = v;
                at_max = 1;
            } else if (v == row_max) {
                ++at_max;
            }
        }
        if (at_max > 1) ++r.ties;
        r.min_margin = std::min(r.min_margin, S(i, j) - best_other);
    }
}

}  // namespace detail

/// Turns a similarity matrix into a bijection. row_argmax is the literal
/// per-row argmax; when two rows pick the same column the collisions are
/// counted and the greedy global matching is returned instead.
inline MatchResult recover_permutation(const SimilarityMatrix& S, MatchMethod method = MatchMethod::greedy_global) {
    detail::check_similarity(S);
    const std::size_t n = S.size();
    MatchResult r;
    switch (method) {
        case MatchMethod::greedy_global: r.perm = Permutation(detail::greedy_global(S)); break;
        case MatchMethod::exact_assignment: r.perm = Permutation(detail::hungarian_max(S)); break;
        case MatchMethod::row_argmax: {
            std::vector<std::size_t> map(n);
            std::vector<std::size_t> hits(n, 0);
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t best = 0;
                for (std::size_t k = 1; k < n; ++k)
                    if (S(i, k) > S(i, best)) best = k;
                map[i] = best;
                ++hits[best];
            }
            for (auto h : hits)
                if (h > 1) r.duplicates += h - 1;
            r.perm = r.duplicates ? Permutation(detail::greedy_global(S)) : Permutation(std::move(map));
            break;
        }
    }
    detail::fill_diagnostics(S, r);
    return r;
}

/// Percentage of neurons whose recovered position equals the true one.
inline double psi(const Permutation& truth, const Permutation& recovered) {
    if (truth.size() != recovered.size())
        throw validation_error("psi of permutations with sizes " + std::to_string(truth.size()) + " and " +
                               std::to_string(recovered.size()));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (truth(i) == recovered(i)) ++hit;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(truth.size());
}

struct LayerResync {
    std::size_t layer = 0;
    Permutation recovered;
    std::optional<double> psi;
    double min_margin = 0.0;
    std::size_t ties = 0;
    std::size_t duplicates = 0;

    friend bool operator==(const LayerResync&, const LayerResync&) = default;
};

struct ResyncReport {
    std::vector<LayerResync> layers;
    std::optional<double> overall_psi;  // neuron-weighted over all scored layers
    MatchMethod method = MatchMethod::greedy_global;

    [[nodiscard]] const LayerResync& layer(std::size_t l) const {
        for (const auto& r : layers)
            if (r.layer == l) return r;
        throw validation_error("report has no entry for layer " + std::to_string(l));
    }

    friend bool operator==(const ResyncReport&, const ResyncReport&) = default;
};

struct ResyncResult {
    ModelBundle model;
    ResyncReport report;
    std::vector<SimilarityMatrix> similarities;  // one per processed layer
};

/// Known permutations applied by the attacker, keyed by layer. When given,
/// every processed layer is scored; layers absent from the map count as unpermuted.
using PermutationTruth = std::map<std::size_t, Permutation>;

/// Re-synchronizes every permutable layer of `suspect` to `reference`, in
/// order: match layer l, undo the recovered permutation on layer l and on the
/// input channels of layer l+1, move on.
inline ResyncResult resync_model(const ModelBundle& reference, ModelBundle suspect,
                                 MatchMethod method = MatchMethod::greedy_global,
                                 const std::optional<PermutationTruth>& truth = std::nullopt) {
    if (!reference.same_architecture(suspect))
        throw architecture_error("reference and suspect architectures differ");
    suspect.validate();
    ResyncResult out;
    out.report.method = method;
    std::size_t scored = 0;
    double hits = 0.0;
    for (auto l : reference.permutable_layers()) {
        auto S = similarity_matrix(reference, suspect, l);
        auto match = recover_permutation(S, method);
        LayerResync lr;
        lr.layer = l;
        lr.recovered = match.perm;
        lr.min_margin = match.min_margin;
        lr.ties = match.ties;
        lr.duplicates = match.duplicates;
        if (truth) {
            auto it = truth->find(l);
            const auto t = it != truth->end() ? it->second : Permutation::identity(match.perm.size());
            lr.psi = psi(t, match.perm);
            hits += *lr.psi * static_cast<double>(t.size()) / 100.0;
            scored += t.size();
        }
        suspect = permute_layer(std::move(suspect), l, inverse(match.perm));
        out.report.layers.push_back(std::move(lr));
        out.similarities.push_back(std::move(S));
    }
    if (truth && scored) out.report.overall_psi = 100.0 * hits / static_cast<double>(scored);
    out.model = std::move(suspect);
    return out;
}

struct RankingResult {
    Permutation perm;
    std::size_t ties = 0;  // adjacent equal l1 norms in either ranking
};

/// Baseline: pair neurons by their rank in l1 norm (ascending, ties by index).
inline RankingResult baseline_norm_ranking(const LayerSpec& s, const Tensor& reference, const Tensor& suspect) {
    if (reference.shape() != suspect.shape()) throw shape_error("reference and suspect layers differ in shape");
    auto rank = [&](const Tensor& w, std::size_t& ties) {
        const auto vecs = neuron_vectors(s, w);
        std::vector<double> norms;
        for (const auto& v : vecs) norms.push_back(l1_norm(v));
        std::vector<std::size_t> order(vecs.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
        for (std::size_t k = 1; k < order.size(); ++k)
            if (norms[order[k]] == norms[order[k - 1]]) ++ties;
        return order;
    };
    RankingResult r;
    const auto ref_order = rank(reference, r.ties);
    const auto sus_order = rank(suspect, r.ties);
    std::vector<std::size_t> map(ref_order.size());
    for (std::size_t k = 0; k < ref_order.size(); ++k) map[ref_order[k]] = sus_order[k];
    r.perm = Permutation(std::move(map));
    return r;
}

enum class ActivationStage { pre, post };

/// Cosine between the responses of neurons i and j of layer l over the whole
/// dataset (every sample and spatial position), before or after the activation.
inline double output_cosine(const ModelBundle& m, std::size_t l, std::size_t i, std::size_t j, const Dataset& d,
                            ActivationStage stage) {
    if (l >= m.num_layers()) throw validation_error("layer " + std::to_string(l) + " out of range");
    const auto& s = m.layers[l];
    if (i >= s.neurons() || j >= s.neurons())
        throw validation_error("neuron index out of range for layer " + std::to_string(l));
    const std::size_t sp = s.spatial_out();
    std::vector<float> a, b;
    a.reserve(d.size() * sp);
    b.reserve(d.size() * sp);
    for (std::size_t k = 0; k < d.size(); ++k) {
        const auto t = forward(m, d.sample(k));
        const auto& v = stage == ActivationStage::pre ? t.pre[l] : t.post[l];
        a.insert(a.end(), v.begin() + i * sp, v.begin() + (i + 1) * sp);
        b.insert(b.end(), v.begin() + j * sp, v.begin() + (j + 1) * sp);
    }
    return cosine(a, b);
}

}  // namespace nwrs
