#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "nwrs/nwrs.hpp"
#include "test_util.hpp"

using namespace nwrs;

namespace {

const SweepSetup& setup() {
    static const SweepSetup s = SweepSetup::from_reference(fixture::reference());
    return s;
}

}  // namespace

TEST(Sweep, SetupComesFromModelMetadata) {
    const auto& s = setup();
    EXPECT_EQ(s.layer, 1u);
    EXPECT_EQ(s.train_data.size(), 400u);
    EXPECT_EQ(s.base_config.epochs, 50u);
    EXPECT_FALSE(s.eval_data.inputs.bit_equal(s.train_data.inputs));
    auto bare = fixture::reference();
    bare.metadata.dataset.reset();
    EXPECT_THROW(SweepSetup::from_reference(bare), validation_error);
}

TEST(Sweep, RowCountAndOrder) {
    const std::vector<double> params{0.0, 0.5, 1.0};
    const auto rows = run_sweep(setup(), PerturbationKind::gaussian_noise, params, 4, 10, 3);
    ASSERT_EQ(rows.size(), params.size() * 4);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        EXPECT_EQ(rows[k].param, params[k / 4]);
        EXPECT_EQ(rows[k].seed, 10 + k % 4);
        EXPECT_EQ(rows[k].kind, PerturbationKind::gaussian_noise);
    }
}

TEST(Sweep, ZeroParameterGivesFullRecovery) {
    for (auto kind : {PerturbationKind::gaussian_noise, PerturbationKind::fine_tune, PerturbationKind::magnitude_prune,
                      PerturbationKind::scalar_multiple})
        for (const auto& r : run_sweep(setup(), kind, {0.0}, 3))
            EXPECT_EQ(r.psi, 100.0) << to_string(kind) << " seed " << r.seed;
}

TEST(Sweep, ThreadCountDoesNotChangeResults) {
    const auto a = run_sweep(setup(), PerturbationKind::magnitude_prune, {0.9, 0.99}, 3, 0, 1);
    const auto b = run_sweep(setup(), PerturbationKind::magnitude_prune, {0.9, 0.99}, 3, 0, 4);
    EXPECT_EQ(sweep_csv(a), sweep_csv(b));
}

TEST(Sweep, CsvHeaderAndRows) {
    const auto rows = run_sweep(setup(), PerturbationKind::quantize, {8.0}, 2);
    std::istringstream in(sweep_csv(rows));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "kind,param,seed,psi,metric");
    std::size_t n = 0;
    while (std::getline(in, line)) {
        EXPECT_EQ(line.rfind("quant,8,", 0), 0u) << line;
        ++n;
    }
    EXPECT_EQ(n, 2u);
}

TEST(Sweep, WholeModelPerturbationTouchesEveryLayer) {
    auto s = SweepSetup::from_reference(fixture::reference(true));
    const auto single = run_cell(s, PerturbationKind::quantize, 2.0, 0);
    s.perturb_all_layers = true;
    const auto all = run_cell(s, PerturbationKind::quantize, 2.0, 0);
    EXPECT_EQ(single.metric, 0.0);
    EXPECT_GT(all.metric, 5.0);
}

TEST(Sweep, ErrorsPropagate) {
    EXPECT_THROW(run_sweep(setup(), PerturbationKind::magnitude_prune, {2.0}, 2, 0, 2), validation_error);
}

TEST(Sweep, ThreadsFromEnvironment) {
    ::setenv("NWRS_THREADS", "3", 1);
    EXPECT_EQ(sweep_threads(), 3u);
    ::setenv("NWRS_THREADS", "zero", 1);
    EXPECT_GE(sweep_threads(), 1u);
    ::unsetenv("NWRS_THREADS");
}
