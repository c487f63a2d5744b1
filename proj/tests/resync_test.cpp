#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nwrs/nwrs.hpp"
#include "test_util.hpp"

using namespace nwrs;

namespace {

SimilarityMatrix random_similarity(std::size_t n, std::uint64_t seed) {
    auto eng = make_engine(seed, stream::inputs, 1000 + n);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    SimilarityMatrix S{Tensor({n, n})};
    for (auto& v : S.values.data()) v = u(eng);
    return S;
}

double brute_force_max(const SimilarityMatrix& S) {
    std::vector<std::size_t> p(S.size());
    std::iota(p.begin(), p.end(), std::size_t{0});
    double best = -std::numeric_limits<double>::infinity();
    do best = std::max(best, assignment_total(S, Permutation(p)));
    while (std::next_permutation(p.begin(), p.end()));
    return best;
}

ModelBundle fc_layer_model(Tensor w) {
    const auto in = w.dim(0), out = w.dim(1);
    auto m = init_model({in}, {LayerSpec::fc(in, out, Activation::relu, false), LayerSpec::fc(out, 1, Activation::identity)},
                        0);
    m.params[0].weight = std::move(w);
    return m;
}

}  // namespace

TEST(Similarity, SelfHasUnitDiagonal) {
    const auto& ref = fixture::reference();
    const auto S = similarity_matrix(ref, ref, 1);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(S(i, i), 1.0, 1e-6);
}

TEST(Similarity, PermutedSuspectPeaksAtImage) {
    for (bool conv : {false, true}) {
        const auto& ref = fixture::reference(conv);
        const auto n = ref.layers[0].neurons();
        const auto pi = Permutation::random(n, 12);
        const auto S = similarity_matrix(ref, permute_layer(ref, 0, pi), 0);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(S(i, pi(i)), 1.0, 1e-6);
    }
}

TEST(Similarity, OrthogonalColumnsGiveIdentity) {
    const auto m = fc_layer_model(Tensor::matrix(3, 3, {2, 0, 0, 0, -1, 0, 0, 0, 5}));
    EXPECT_EQ(similarity_matrix(m, m, 0).values, Tensor::identity(3));
}

TEST(Similarity, ExcludesBias) {
    const auto& ref = fixture::reference();
    auto sus = ref;
    (*sus.params[1].bias)[0] += 10.0f;
    EXPECT_NEAR(similarity_matrix(ref, sus, 1)(0, 0), 1.0, 1e-6);
}

TEST(Similarity, ShapeMismatchThrows) {
    const auto& ref = fixture::reference();
    EXPECT_THROW(similarity_matrix(ref.layers[1], ref.params[1].weight, ref.params[0].weight), shape_error);
}

TEST(Recover, IdentityDominant) {
    SimilarityMatrix S{Tensor::matrix(3, 3, {0.9f, 0.1f, 0.2f, 0.3f, 0.8f, 0.1f, 0.0f, 0.5f, 0.7f})};
    for (auto m : {MatchMethod::greedy_global, MatchMethod::exact_assignment, MatchMethod::row_argmax})
        EXPECT_TRUE(recover_permutation(S, m).perm.is_identity());
}

TEST(Recover, OneHotRowsReturnThePermutation) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto pi = Permutation::random(8, seed);
        const SimilarityMatrix S{matrix_view(pi)};
        for (auto m : {MatchMethod::greedy_global, MatchMethod::exact_assignment, MatchMethod::row_argmax})
            EXPECT_EQ(recover_permutation(S, m).perm, pi);
    }
}

TEST(Recover, ExactMatchesBruteForceAndBoundsGreedy) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const auto S = random_similarity(1 + seed % 6, seed);
        const double best = brute_force_max(S);
        const auto exact = recover_permutation(S, MatchMethod::exact_assignment);
        EXPECT_EQ(exact.total, best) << "seed " << seed;
        EXPECT_LE(recover_permutation(S, MatchMethod::greedy_global).total, exact.total);
    }
}

TEST(Recover, GreedyIsNotAlwaysOptimal) {
    // greedy takes 1.0 first and is left with -1.0
    SimilarityMatrix S{Tensor::matrix(2, 2, {1.0f, 0.9f, 0.9f, -1.0f})};
    EXPECT_LT(recover_permutation(S).total, recover_permutation(S, MatchMethod::exact_assignment).total);
}

TEST(Recover, RowArgmaxCollisionsFallBackToGreedy) {
    SimilarityMatrix S{Tensor::matrix(2, 2, {1.0f, 0.9f, 1.0f, 0.2f})};
    const auto r = recover_permutation(S, MatchMethod::row_argmax);
    EXPECT_EQ(r.duplicates, 1u);
    EXPECT_TRUE(r.perm.is_identity());
}

TEST(Recover, TiesAndMargin) {
    SimilarityMatrix S{Tensor::matrix(2, 2, {0.5f, 0.5f, 0.1f, 0.9f})};
    const auto r = recover_permutation(S);
    EXPECT_TRUE(r.perm.is_identity());  // lowest column wins
    EXPECT_EQ(r.ties, 1u);
    EXPECT_EQ(r.min_margin, 0.0);
    SimilarityMatrix one{Tensor::matrix(1, 1, {0.25f})};
    EXPECT_DOUBLE_EQ(recover_permutation(one).min_margin, 1.25);
}

TEST(Recover, RejectsNaNAndNonSquare) {
    SimilarityMatrix S{Tensor::matrix(2, 2, {1.0f, std::nanf(""), 0.0f, 1.0f})};
    EXPECT_THROW(recover_permutation(S), validation_error);
    EXPECT_THROW(recover_permutation(SimilarityMatrix{Tensor({2, 3})}), shape_error);
}

TEST(Psi, Examples) {
    const auto id = Permutation::identity(4);
    EXPECT_EQ(psi(id, id), 100.0);
    EXPECT_EQ(psi(id, Permutation({1, 0, 3, 2})), 0.0);
    EXPECT_EQ(psi(id, Permutation({0, 1, 3, 2})), 50.0);
    EXPECT_THROW(psi(id, Permutation::identity(3)), validation_error);
}

TEST(Psi, CompositionInvariant) {
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto a = Permutation::random(10, s), b = Permutation::random(10, s + 100),
                   t = Permutation::random(10, s + 200);
        EXPECT_EQ(psi(compose(a, t), compose(b, t)), psi(a, b));
    }
}

TEST(ResyncModel, SelfRecoveryOnEveryLayer) {
    for (bool conv : {false, true}) {
        const auto& ref = fixture::reference(conv);
        for (std::uint64_t s = 0; s < 10; ++s) {
            auto sus = ref;
            PermutationTruth truth;
            for (auto l : ref.permutable_layers()) {
                truth[l] = Permutation::random(ref.layers[l].neurons(), s * 10 + l);
                sus = permute_layer(sus, l, truth[l]);
            }
            const auto r = resync_model(ref, sus, MatchMethod::greedy_global, truth);
            for (const auto& lr : r.report.layers) {
                EXPECT_EQ(*lr.psi, 100.0);
                EXPECT_GT(lr.min_margin, 0.0);
            }
            EXPECT_EQ(*r.report.overall_psi, 100.0);
            EXPECT_TRUE(r.model.bit_equal(ref));
        }
    }
}

TEST(ResyncModel, ReferenceAgainstItself) {
    const auto& ref = fixture::reference(true);
    const auto r = resync_model(ref, ref);
    for (const auto& lr : r.report.layers) EXPECT_TRUE(lr.recovered.is_identity());
    EXPECT_FALSE(r.report.overall_psi.has_value());
    EXPECT_FALSE(r.report.layers[0].psi.has_value());
    EXPECT_TRUE(r.model.bit_equal(ref));
    EXPECT_EQ(r.similarities.size(), ref.permutable_layers().size());
}

TEST(ResyncModel, AllMethodsAgreeOnCleanPermutation) {
    const auto& ref = fixture::reference();
    const auto pi = Permutation::random(32, 8);
    for (auto m : {MatchMethod::greedy_global, MatchMethod::exact_assignment, MatchMethod::row_argmax}) {
        const auto r = resync_model(ref, permute_layer(ref, 1, pi), m, PermutationTruth{{1, pi}});
        EXPECT_EQ(*r.report.layer(1).psi, 100.0) << to_string(m);
        EXPECT_EQ(r.report.method, m);
    }
}

TEST(ResyncModel, SurvivesShortFineTune) {
    const auto& ref = fixture::reference();
    const auto pi = Permutation::random(32, 4);
    const auto sus = apply_perturbation(permute_layer(ref, 1, pi), {PerturbationKind::fine_tune, 2.0}, 4);
    const auto r = resync_model(ref, sus, MatchMethod::greedy_global, PermutationTruth{{1, pi}});
    EXPECT_EQ(*r.report.layer(1).psi, 100.0);
    EXPECT_EQ(*r.report.overall_psi, 100.0);
}

TEST(ResyncModel, MarginStaysPositiveUnderMildNoise) {
    const auto& ref = fixture::reference();
    const auto pi = Permutation::random(32, 6);
    const auto sus = add_gaussian_noise(permute_layer(ref, 1, pi), 1, 0.5, 6);
    const auto r = resync_model(ref, sus, MatchMethod::greedy_global, PermutationTruth{{1, pi}});
    EXPECT_EQ(*r.report.layer(1).psi, 100.0);
    EXPECT_GT(r.report.layer(1).min_margin, 0.0);
}

TEST(ResyncModel, BlindToScalarAttack) {
    const auto& ref = fixture::reference();
    const auto pi = Permutation::random(32, 2);
    const auto sus = scalar_attack(permute_layer(ref, 1, pi), 1, 5, 0.5);
    const auto r = resync_model(ref, sus, MatchMethod::greedy_global, PermutationTruth{{1, pi}});
    EXPECT_EQ(*r.report.layer(1).psi, 100.0);
}

TEST(ResyncModel, ArchitectureMismatchThrows) {
    EXPECT_THROW(resync_model(fixture::reference(), fixture::reference(true)), architecture_error);
}

TEST(MatchMethodNames, RoundTrip) {
    for (auto m : {MatchMethod::greedy_global, MatchMethod::exact_assignment, MatchMethod::row_argmax})
        EXPECT_EQ(parse_match_method(to_string(m)), m);
    EXPECT_THROW(parse_match_method("auction"), validation_error);
}

TEST(NormRanking, RecoversCleanPermutation) {
    const auto& ref = fixture::reference();
    const auto pi = Permutation::random(32, 1);
    const auto sus = permute_layer(ref, 1, pi);
    const auto r = baseline_norm_ranking(ref.layers[1], ref.params[1].weight, sus.params[1].weight);
    EXPECT_EQ(psi(pi, r.perm), 100.0);
    EXPECT_EQ(r.ties, 0u);
}

TEST(NormRanking, EqualNormsReportTies) {
    const auto m = fc_layer_model(Tensor::matrix(2, 3, {1, 0, 2, 0, -1, 2}));
    EXPECT_EQ(baseline_norm_ranking(m.layers[0], m.params[0].weight, m.params[0].weight).ties, 2u);
}

TEST(NormRanking, FragileUnderQuantizationWhileCosineHolds) {
    const auto ref = fixture::norm_gap_model(3, 1e-5);
    const auto pi = Permutation::random(8, 3);
    const auto sus = quantize(permute_layer(ref, 0, pi), 0, 8);
    EXPECT_LT(psi(pi, baseline_norm_ranking(ref.layers[0], ref.params[0].weight, sus.params[0].weight).perm), 100.0);
    EXPECT_EQ(*resync_model(ref, sus, MatchMethod::greedy_global, PermutationTruth{{0, pi}}).report.layer(0).psi, 100.0);
}

TEST(OutputCosine, SameNeuronAndPositiveClone) {
    auto m = fixture::reference();
    const auto d = dataset_for(m, *m.metadata.dataset);
    EXPECT_NEAR(output_cosine(m, 1, 4, 4, d, ActivationStage::post), 1.0, 1e-9);
    auto v = neuron_weights(m, 1, 2);
    for (auto& x : v) x *= 2.5f;
    set_neuron_weights(m, 1, 7, v);
    (*m.params[1].bias)[7] = 2.5f * (*m.params[1].bias)[2];
    EXPECT_NEAR(output_cosine(m, 1, 2, 7, d, ActivationStage::pre), 1.0, 1e-6);
    EXPECT_THROW(output_cosine(m, 1, 2, 40, d, ActivationStage::pre), validation_error);
}

TEST(OutputCosine, ReluHidesParameterDifference) {
    // w_i = [1, 0] and w_j = [1, 0.5]. On inputs where x2 = 0 whenever x1 > 0,
    // and x1 + 0.5·x2 < 0 otherwise, both ReLU outputs coincide.
    auto m = init_model({2}, {LayerSpec::fc(2, 2, Activation::relu, false), LayerSpec::fc(2, 1, Activation::identity)}, 0);
    m.params[0].weight = Tensor::matrix(2, 2, {1, 1, 0, 0.5f});
    Dataset d;
    d.num_classes = 1;
    std::vector<float> xs;
    for (int k = 1; k <= 20; ++k) {
        const float a = 0.1f * static_cast<float>(k);
        xs.insert(xs.end(), {a, 0.0f});
        xs.insert(xs.end(), {-a, -0.3f * static_cast<float>(k % 4)});
        d.labels.insert(d.labels.end(), {0, 0});
    }
    d.inputs = Tensor({d.labels.size(), 2}, xs);
    const double param_cos = cosine(neuron_weights(m, 0, 0), neuron_weights(m, 0, 1));
    EXPECT_LT(param_cos, 0.95);
    EXPECT_NEAR(output_cosine(m, 0, 0, 1, d, ActivationStage::post), 1.0, 1e-12);
    EXPECT_LT(output_cosine(m, 0, 0, 1, d, ActivationStage::pre), 1.0 - 1e-3);
}
