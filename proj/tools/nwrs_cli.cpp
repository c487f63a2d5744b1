// nwrs: command-line front end for permuting, perturbing, re-synchronizing,
// verifying and watermarking small networks.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nwrs/nwrs.hpp"

using namespace nwrs;

namespace {

// Shortest round-trip decimal, always with a fractional part ("0.0", "0.125").
std::string num(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, end);
    if (std::isfinite(v) && s.find_first_of(".e") == std::string::npos) s += ".0";
    return s;
}

std::string psi_str(double p) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", p);
    return buf;
}

std::size_t layer_or_default(const ModelBundle& m, const std::optional<std::size_t>& layer) {
    const auto l = layer.value_or(default_target_layer(m));
    if (l >= m.num_layers()) throw validation_error("layer " + std::to_string(l) + " out of range");
    return l;
}

ModelBundle fresh_reference(std::uint64_t seed, bool conv) {
    auto m = conv ? make_reference_conv(seed) : make_reference_mlp(seed);
    m.metadata.seed = seed;
    m.metadata.dataset = reference_dataset_spec(seed, conv);
    return m;
}

TrainConfig recorded_config(const ModelBundle& m) {
    return m.metadata.training ? TrainConfig::from_record(*m.metadata.training) : reference_train_config(m.metadata.seed);
}

std::vector<double> parse_params(const std::string& s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        const auto tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        double v = 0.0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (tok.empty() || ec != std::errc{} || p != tok.data() + tok.size())
            throw validation_error("cannot parse parameter '" + tok + "'");
        out.push_back(v);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

struct GenArgs {
    std::string out;
    std::uint64_t seed = 1;
    bool conv = false;
};

void gen_model(const GenArgs& a) {
    save(generate_reference(a.seed, a.conv), a.out);
}

struct PermuteArgs {
    std::string in, out, perm_out;
    std::optional<std::size_t> layer;
    std::uint64_t seed = 0;
    bool derangement = false;
};

void permute(const PermuteArgs& a) {
    const auto m = load(a.in);
    const auto l = layer_or_default(m, a.layer);
    if (l + 1 >= m.num_layers()) throw validation_error("the output layer cannot be permuted");
    const auto n = m.layers[l].neurons();
    const auto pi = a.derangement ? Permutation::random_derangement(n, a.seed) : Permutation::random(n, a.seed);
    save(permute_layer(m, l, pi), a.out);
    if (!a.perm_out.empty()) save_permutation(a.perm_out, l, pi, a.seed);
}

struct PerturbArgs {
    std::string in, out, kind;
    double param = 0.0;
    std::optional<std::size_t> layer;
    bool all_layers = false;
    std::size_t neuron = 0;
    bool noise_variance = false;
    std::uint64_t seed = 0;
};

void perturb(const PerturbArgs& a) {
    const auto m = load(a.in);
    PerturbationSpec spec;
    spec.kind = parse_perturbation_kind(a.kind);
    spec.param = a.param;
    spec.neuron = a.neuron;
    spec.noise_reading = a.noise_variance ? NoiseScale::variance : NoiseScale::std_dev;
    if (!a.all_layers) spec.target_layer = layer_or_default(m, a.layer);
    std::optional<Dataset> data;
    const auto cfg = recorded_config(m);
    if (spec.kind == PerturbationKind::fine_tune) {
        if (!m.metadata.dataset) throw validation_error("fine-tuning needs a dataset (none recorded in the model)");
        data = dataset_for(m, *m.metadata.dataset);
    }
    save(apply_perturbation(m, spec, a.seed, {data ? &*data : nullptr, &cfg}), a.out);
}

struct ResyncArgs {
    std::string ref, suspect, method = "greedy", true_perm, out, report;
};

void resync(const ResyncArgs& a) {
    const auto ref = load(a.ref);
    auto sus = load(a.suspect);
    std::optional<PermutationTruth> truth;
    std::optional<std::size_t> scored;
    if (!a.true_perm.empty()) {
        const auto f = load_permutation(a.true_perm);
        truth = PermutationTruth{{f.layer, f.perm}};
        scored = f.layer;
    }
    const auto r = resync_model(ref, std::move(sus), parse_match_method(a.method), truth);
    if (!a.out.empty()) save(r.model, a.out);
    if (!a.report.empty()) save_report(a.report, r.report);
    for (const auto& lr : r.report.layers)
        std::cout << "layer=" << lr.layer << " margin=" << num(lr.min_margin) << " ties=" << lr.ties
                  << " duplicates=" << lr.duplicates << '\n';
    if (scored) std::cout << "psi=" << psi_str(*r.report.layer(*scored).psi) << '\n';
}

struct VerifyArgs {
    std::string ref, suspect, out;
    std::optional<std::size_t> layer;
    bool correct = false;
    double cosine_eps = 1e-4, norm_eps = 1e-3;
};

int verify(const VerifyArgs& a) {
    const auto ref = load(a.ref);
    const auto sus = load(a.suspect);
    const auto l = layer_or_default(ref, a.layer);
    const auto v = verify_integrity(ref, sus, l, {a.cosine_eps, a.norm_eps});
    auto j = verdict_to_json(v);
    if (a.correct) {
        if (a.out.empty()) throw validation_error("--correct needs --out for the corrected model");
        save(correct_scaling(sus, v), a.out);
        j["corrected"] = a.out;
    }
    std::cout << j.dump(2) << '\n';
    switch (v.layer_verdict) {
        case NeuronFlag::clean: return 0;
        case NeuronFlag::scaled_neuron: return 2;
        case NeuronFlag::modified: return 3;
    }
    return 3;
}

struct EmbedArgs {
    std::string in, out, record;
    std::uint64_t seed = 1;
    bool conv = false;
    std::size_t layer = 1, bits = 64;
    std::uint64_t bits_seed = 42, projection_seed = 4242;
    double lambda = 0.01;
    std::size_t epochs = 200;
};

void wm_embed(const EmbedArgs& a) {
    // continue from --in, or train a reference architecture from scratch
    const auto start = a.in.empty() ? fresh_reference(a.seed, a.conv) : load(a.in);
    if (!start.metadata.dataset) throw validation_error("model records no dataset to train on");
    const auto data = dataset_for(start, *start.metadata.dataset);
    auto cfg = a.in.empty() ? watermark_train_config(a.seed) : recorded_config(start);
    cfg.epochs = a.epochs;
    const auto rec = make_watermark_record(start, a.layer, random_bits(a.bits, a.bits_seed), a.projection_seed, a.lambda);
    auto marked = embed(start, data, cfg, rec).model;
    marked.metadata.dataset = start.metadata.dataset;
    save(marked, a.out);
    write_text(a.record, watermark_to_json(rec).dump(2) + "\n");
    const auto e = extract(marked, rec);
    std::cout << "pearson=" << num(e.pearson) << " ber=" << num(e.ber) << '\n';
}

struct ExtractArgs {
    std::string in, record;
};

void wm_extract(const ExtractArgs& a) {
    const auto m = load(a.in);
    const auto e = extract(m, watermark_from_json(read_json(a.record)));
    std::string bits;
    for (auto b : e.bits) bits += b ? '1' : '0';
    std::cout << "pearson=" << num(e.pearson) << " ber=" << num(e.ber) << "\nbits=" << bits << '\n';
}

struct SweepArgs {
    std::string ref, kind, params, csv, method = "greedy";
    std::uint64_t seed = 1, seed_base = 0;
    bool conv = false, all_layers = false;
    std::size_t seeds = 10, threads = 0;
    std::optional<std::size_t> layer;
};

void sweep(const SweepArgs& a) {
    auto s = SweepSetup::from_reference(a.ref.empty() ? generate_reference(a.seed, a.conv) : load(a.ref));
    if (a.layer) s.layer = layer_or_default(s.reference, a.layer);
    s.perturb_all_layers = a.all_layers;
    s.method = parse_match_method(a.method);
    const auto rows = run_sweep(s, parse_perturbation_kind(a.kind), parse_params(a.params), a.seeds, a.seed_base,
                                a.threads);
    const auto text = sweep_csv(rows);
    if (a.csv.empty()) std::cout << text;
    else write_text(a.csv, text);
}

struct KlArgs {
    double k = 0.0, mu = 0.0, sigma = 1.0;
    bool relu = false;
    std::size_t samples = 1000000;
    std::uint64_t seed = 0;
};

void kl(const KlArgs& a) {
    if (a.relu) {
        std::cout << num(kl_relu_scaled(a.k)) << '\n'
                  << "mc=" << num(mc_kl_relu_scaled(a.k, a.samples, a.seed)) << '\n'
                  << "integral=" << num(kl_relu_scaled_integrated(a.k)) << '\n';
    } else {
        std::cout << num(kl_gaussian_scaled(a.k, a.mu, a.sigma)) << '\n'
                  << "mc=" << num(mc_kl_gaussian_scaled(a.k, a.mu, a.sigma, a.samples, a.seed)) << '\n';
    }
}

int fail(const std::string& category, const std::string& detail) {
    std::string line = detail;
    for (auto& c : line)
        if (c == '\n' || c == '\r') c = ' ';
    std::cerr << "error: " << category << ": " << line << '\n';
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Permute, perturb, re-synchronize and verify small neural networks"};
    app.name("nwrs");
    app.require_subcommand(1);
    int code = 0;

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen-model", "train a reference model and save it");
    c_gen->add_option("--out", gen.out, "output container")->required();
    c_gen->add_option("--seed", gen.seed, "model/data/training seed");
    c_gen->add_flag("--conv", gen.conv, "convolutional reference instead of the MLP");
    c_gen->callback([&] { gen_model(gen); });

    PermuteArgs perm;
    auto* c_perm = app.add_subcommand("permute", "apply a seeded random permutation to one layer");
    c_perm->add_option("--in", perm.in)->required();
    c_perm->add_option("--out", perm.out)->required();
    c_perm->add_option("--layer", perm.layer, "default: the layer before the classifier");
    c_perm->add_option("--seed", perm.seed);
    c_perm->add_option("--perm-out", perm.perm_out, "write the applied permutation as JSON");
    c_perm->add_flag("--derangement", perm.derangement, "move every neuron");
    c_perm->callback([&] { permute(perm); });

    PerturbArgs pert;
    auto* c_pert = app.add_subcommand("perturb", "apply one perturbation");
    c_pert->add_option("--in", pert.in)->required();
    c_pert->add_option("--out", pert.out)->required();
    c_pert->add_option("--kind", pert.kind, "gauss|quant|prune|finetune|scalar")->required();
    c_pert->add_option("--param", pert.param, "Omega, bits, fraction, epochs or k")->required();
    c_pert->add_option("--layer", pert.layer, "default: the layer before the classifier");
    c_pert->add_flag("--all-layers", pert.all_layers, "perturb every layer");
    c_pert->add_option("--neuron", pert.neuron, "neuron for --kind scalar");
    c_pert->add_flag("--noise-variance", pert.noise_variance, "read Omega as a variance multiplier");
    c_pert->add_option("--seed", pert.seed);
    c_pert->callback([&] { perturb(pert); });

    ResyncArgs rs;
    auto* c_rs = app.add_subcommand("resync", "re-synchronize a suspect model to the reference");
    c_rs->add_option("--ref", rs.ref)->required();
    c_rs->add_option("--suspect", rs.suspect)->required();
    c_rs->add_option("--method", rs.method, "greedy|exact|rowargmax");
    c_rs->add_option("--true-perm", rs.true_perm, "permutation JSON; prints psi when given");
    c_rs->add_option("--out", rs.out, "re-synchronized model");
    c_rs->add_option("--report", rs.report, "report JSON");
    c_rs->callback([&] { resync(rs); });

    VerifyArgs ver;
    auto* c_ver = app.add_subcommand("verify", "per-neuron integrity check; exit 0 clean, 2 scaled, 3 modified");
    c_ver->add_option("--ref", ver.ref)->required();
    c_ver->add_option("--suspect", ver.suspect)->required();
    c_ver->add_option("--layer", ver.layer, "default: the layer before the classifier");
    c_ver->add_flag("--correct", ver.correct, "undo pure rescaling");
    c_ver->add_option("--out", ver.out, "corrected model (with --correct)");
    c_ver->add_option("--cosine-eps", ver.cosine_eps);
    c_ver->add_option("--norm-eps", ver.norm_eps);
    c_ver->callback([&] { code = verify(ver); });

    auto* c_wm = app.add_subcommand("wm", "white-box watermark");
    c_wm->require_subcommand(1);
    EmbedArgs emb;
    auto* c_emb = c_wm->add_subcommand("embed", "train with the watermark regularizer");
    c_emb->add_option("--in", emb.in, "start from this model (default: fresh reference)");
    c_emb->add_option("--seed", emb.seed, "seed of the fresh reference");
    c_emb->add_flag("--conv", emb.conv, "fresh convolutional reference");
    c_emb->add_option("--out", emb.out)->required();
    c_emb->add_option("--record", emb.record, "verifier record JSON (holds the bits)")->required();
    c_emb->add_option("--layer", emb.layer);
    c_emb->add_option("--bits", emb.bits, "mark length");
    c_emb->add_option("--bits-seed", emb.bits_seed);
    c_emb->add_option("--projection-seed", emb.projection_seed);
    c_emb->add_option("--lambda", emb.lambda);
    c_emb->add_option("--epochs", emb.epochs);
    c_emb->callback([&] { wm_embed(emb); });
    ExtractArgs ext;
    auto* c_ext = c_wm->add_subcommand("extract", "read the mark; prints pearson and BER");
    c_ext->add_option("--in", ext.in)->required();
    c_ext->add_option("--record", ext.record)->required();
    c_ext->callback([&] { wm_extract(ext); });

    SweepArgs sw;
    auto* c_sw = app.add_subcommand("sweep", "permute, perturb, resync and score a parameter grid");
    c_sw->add_option("--kind", sw.kind, "gauss|quant|prune|finetune|scalar")->required();
    c_sw->add_option("--params", sw.params, "comma-separated values")->required();
    c_sw->add_option("--seeds", sw.seeds, "seeds per parameter");
    c_sw->add_option("--seed-base", sw.seed_base);
    c_sw->add_option("--ref", sw.ref, "reference container (default: train one)");
    c_sw->add_option("--seed", sw.seed, "seed of the trained reference");
    c_sw->add_flag("--conv", sw.conv);
    c_sw->add_option("--layer", sw.layer);
    c_sw->add_flag("--all-layers", sw.all_layers, "perturb every layer");
    c_sw->add_option("--method", sw.method);
    c_sw->add_option("--threads", sw.threads, "default: NWRS_THREADS or all cores");
    c_sw->add_option("--csv", sw.csv, "output file (default: stdout)");
    c_sw->callback([&] { sweep(sw); });

    KlArgs k;
    auto* c_kl = app.add_subcommand("kl", "closed-form KL of a rescaled neuron, then a Monte-Carlo estimate");
    c_kl->add_option("--k", k.k)->required();
    c_kl->add_flag("--relu", k.relu, "ReLU output with zero-mean input");
    c_kl->add_option("--mu", k.mu);
    c_kl->add_option("--sigma", k.sigma);
    c_kl->add_option("--samples", k.samples);
    c_kl->add_option("--seed", k.seed);
    c_kl->callback([&] { kl(k); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what());
    } catch (const nwrs::error& e) {
        return fail(e.category(), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail("io", e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
    return code;
}
