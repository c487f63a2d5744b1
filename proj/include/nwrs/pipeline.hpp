#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nwrs/attack.hpp"
#include "nwrs/model.hpp"
#include "nwrs/resync.hpp"
#include "nwrs/trainer.hpp"

namespace nwrs {

/// Training set recipe of the reference models.
inline DatasetSpec reference_dataset_spec(std::uint64_t seed, bool conv) {
    return {4, 100, conv ? std::size_t{64} : std::size_t{8}, seed};
}

/// Held-out samples drawn from the same clusters as the training set.
inline DatasetSpec held_out_spec(const DatasetSpec& s) {
    DatasetSpec t = s;
    t.seed = splitmix64(s.seed ^ 0x7e57da7aULL);
    return t;
}

inline TrainConfig reference_train_config(std::uint64_t seed) {
    TrainConfig c;
    c.epochs = 50;
    c.learning_rate = 1e-2;
    c.momentum = 0.9;
    c.weight_decay = 1e-4;
    c.batch_size = 16;
    c.seed = seed;
    return c;
}

/// Embedding schedule: the reference recipe run four times longer. At
/// lambda = 0.01 the summed BCE term needs ~100 epochs to push every bit of a
/// 64-bit mark across the threshold; 200 leaves a margin of ~0.25.
inline TrainConfig watermark_train_config(std::uint64_t seed) {
    auto c = reference_train_config(seed);
    c.epochs = 200;
    return c;
}

/// Trains the reference MLP (or conv net) for `seed`; the bundle records how
/// to rebuild its dataset and training configuration.
inline ModelBundle generate_reference(std::uint64_t seed, bool conv = false) {
    auto m = conv ? make_reference_conv(seed) : make_reference_mlp(seed);
    const auto spec = reference_dataset_spec(seed, conv);
    const auto data = dataset_for(m, spec);
    auto trained = train(std::move(m), data, reference_train_config(seed)).model;
    trained.metadata.seed = seed;
    trained.metadata.dataset = spec;
    return trained;
}

/// Default attack position: the layer before the classifier.
inline std::size_t default_target_layer(const ModelBundle& m) { return m.num_layers() >= 2 ? m.num_layers() - 2 : 0; }

struct SweepRow {
    PerturbationKind kind = PerturbationKind::gaussian_noise;
    double param = 0.0;
    std::uint64_t seed = 0;
    double psi = 0.0;     // target layer
    double metric = 0.0;  // error rate (%) of the perturbed model on held-out data
};

struct SweepSetup {
    ModelBundle reference;
    Dataset train_data;
    Dataset eval_data;
    TrainConfig base_config;
    std::size_t layer = 0;
    bool perturb_all_layers = false;  // perturb every layer, not just `layer`
    MatchMethod method = MatchMethod::greedy_global;

    static SweepSetup from_reference(ModelBundle reference) {
        SweepSetup s;
        if (!reference.metadata.dataset) throw validation_error("reference model does not record its dataset");
        s.train_data = dataset_for(reference, *reference.metadata.dataset);
        s.eval_data = dataset_for(reference, held_out_spec(*reference.metadata.dataset));
        s.base_config = reference.metadata.training ? TrainConfig::from_record(*reference.metadata.training)
                                                    : reference_train_config(reference.metadata.seed);
        s.layer = default_target_layer(reference);
        s.reference = std::move(reference);
        return s;
    }
};

/// permute (seeded) → perturb (seeded) → resync → score one cell.
inline SweepRow run_cell(const SweepSetup& s, PerturbationKind kind, double param, std::uint64_t seed) {
    const auto n = s.reference.layers.at(s.layer).neurons();
    const auto truth = Permutation::random(n, seed);
    auto suspect = permute_layer(s.reference, s.layer, truth);
    PerturbationSpec spec;
    spec.kind = kind;
    spec.param = param;
    if (!s.perturb_all_layers) spec.target_layer = s.layer;
    spec.neuron = static_cast<std::size_t>(seed % n);
    suspect = apply_perturbation(suspect, spec, seed, {&s.train_data, &s.base_config});
    const auto metric = error_rate(suspect, s.eval_data);
    const auto res = resync_model(s.reference, std::move(suspect), s.method, PermutationTruth{{s.layer, truth}});
    return {kind, param, seed, *res.report.layer(s.layer).psi, metric};
}

/// Worker count from NWRS_THREADS, else the hardware concurrency.
inline std::size_t sweep_threads() {
    if (const char* env = std::getenv("NWRS_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Rows come back ordered by (param, seed) whatever order cells finish in.
/// Seeds are 0..seeds-1 offset by `seed_base`.
inline std::vector<SweepRow> run_sweep(const SweepSetup& s, PerturbationKind kind, const std::vector<double>& params,
                                       std::size_t seeds, std::uint64_t seed_base = 0, std::size_t threads = 0) {
    std::vector<SweepRow> rows(params.size() * seeds);
    if (rows.empty()) return rows;
    if (threads == 0) threads = sweep_threads();
    threads = std::min(threads, rows.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    auto worker = [&](std::size_t w) {
        try {
            for (std::size_t k; (k = next.fetch_add(1)) < rows.size();)
                rows[k] = run_cell(s, kind, params[k / seeds], seed_base + k % seeds);
        } catch (...) {
            errors[w] = std::current_exception();
            next = rows.size();
        }
    };
    if (threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker, w);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "kind,param,seed,psi,metric\n";
    for (const auto& r : rows)
        out << to_string(r.kind) << ',' << r.param << ',' << r.seed << ',' << r.psi << ',' << r.metric << '\n';
    return out.str();
}

}  // namespace nwrs
