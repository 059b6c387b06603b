#include "fastfit/commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "fastfit/benchkit.hpp"
#include "fastfit/verify.hpp"
#include "fastfit/weights_io.hpp"

namespace fastfit {

int cmd_verify(const RunConfig& config, const VerifyArgs& args, std::ostream& out) {
    VerifyOptions options;
    options.break_mask = args.break_mask;
    const auto results = run_verification(config.model, config.seed, options);
    bool ok = true;
    out << "fastfit verify (64-bit, seed " << config.seed << (args.break_mask ? ", broken mask" : "") << ")\n";
    for (const auto& r : results) {
        ok = ok && r.passed;
        out << (r.passed ? "[PASS] " : "[FAIL] ") << std::left << std::setw(22) << r.name << std::right
            << " max deviation " << std::scientific << std::setprecision(3) << r.max_deviation << " (tolerance "
            << r.tolerance << ")  " << r.detail << "\n";
    }
    out << std::defaultfloat << (ok ? "all suites passed\n" : "verification FAILED\n");
    return ok ? kExitOk : kExitVerifyFailed;
}

int cmd_bench(const RunConfig& config, const BenchArgs& args, std::ostream& out) {
    BenchShape shape;
    shape.model = config.model;
    shape.ref_tokens.assign(config.bench.refs, config.bench.ref_grid_h * config.bench.ref_grid_w);
    shape.steps = config.sampler.steps;
    shape.cfg = config.sampler.cfg;

    BenchOptions options;
    const std::string mode = args.mode.value_or(config.bench.mode);
    if (mode != "all")
        options.modes = {parse_mode(mode)};
    options.runs = args.runs.value_or(config.bench.runs);
    options.warmup = args.warmup.value_or(config.bench.warmup);
    options.threads = args.threads.value_or(config.bench.threads);
    options.seed = config.seed;
    options.guidance = config.sampler.guidance;
    const std::string path = args.out.value_or(config.paths.report_out);
    const ReportFormat format = report_format_for_path(path);

    const BenchReport report = measure(shape, options);
    std::ofstream file(path);
    if (!file)
        throw IoError("cannot open '" + path + "' for writing");
    file << emit_report(report, format);
    out << emit_report(report, ReportFormat::Markdown);
    if (!report.valid)
        out << "warning: report is not valid: " << report.note << "\n";
    out << "report written to " << path << "\n";
    return kExitOk;
}

int cmd_train_demo(const RunConfig& config, const TrainArgs& args, std::ostream& out) {
    TrainConfig tc = config.train;
    if (args.steps)
        tc.steps = *args.steps;
    TrainState<float> state;
    if (args.resume) {
        state = load_train_state<float>(*args.resume);
        if (!(state.params.config == config.model))
            throw ConfigError("weights in '" + *args.resume + "' were trained for a different model config");
        out << "resuming from step " << state.step << "\n";
    } else {
        Rng rng = Rng(config.seed).fork(0);
        state.params = DenoiserParams<double>::init(config.model, rng).cast<float>();
    }
    const SyntheticWorld world(config.model, config.synthetic);
    const std::size_t every = std::max<std::size_t>(1, tc.log_every);
    const auto report = train<float>(state, world, tc, config.seed, [&](std::size_t step, double loss) {
        if (step % every == 0 || step + 1 == tc.steps)
            out << "step " << step << " loss " << std::setprecision(6) << loss << "\n" << std::flush;
    });
    const std::string weights = args.out.value_or(config.paths.weights_out);
    const std::string csv = args.loss_csv.value_or(config.paths.loss_csv);
    save_train_state(state, weights);
    write_loss_csv(csv, state.curve);
    out << "eval loss " << std::setprecision(6) << report.eval_loss_initial << " -> " << report.eval_loss_final
        << " (" << report.steps_run << " steps)\n";
    out << "weights written to " << weights << ", loss curve to " << csv << "\n";
    return kExitOk;
}

int cmd_sample(const RunConfig& config, const SampleArgs& args, std::ostream& out) {
    const std::string weights = args.weights.value_or(config.paths.weights_in);
    if (weights.empty())
        throw ConfigError("sample needs a weights file (--weights or paths.weights_in)");
    const auto params = load_params<float>(weights);
    const ModelConfig& mc = params.config;

    SyntheticConfig syn = config.synthetic;
    syn.random_rectangles = true;
    const SyntheticWorld world(mc, syn);
    Rng rng = Rng(config.seed).fork(7);
    const auto request = make_sample<float>(rng, world);
    Rng noise = Rng(config.seed).fork(8);
    const auto z_T = gaussian<float>(noise, mc.tokens(), mc.latent_channels);

    SamplerConfig sc = config.sampler;
    if (args.mode)
        sc.mode = parse_mode(*args.mode);
    const auto result = sample<float>(z_T, request.person, request.items, params, sc);

    SamplerConfig probe = sc;
    probe.mode = SampleMode::Cached;
    const auto cached = sc.mode == SampleMode::Cached ? result : sample<float>(z_T, request.person, request.items, params, probe);
    probe.mode = SampleMode::UncachedJoint;
    const auto joint =
        sc.mode == SampleMode::UncachedJoint ? result : sample<float>(z_T, request.person, request.items, params, probe);
    const double probe_diff = max_abs_diff(cached.z0, joint.z0);

    const Tensor<float> image = world.vae.decode(result.z0, mc.grid_h, mc.grid_w);
    const std::string prefix = args.out.value_or(config.paths.sample_out);
    write_raw_tensor(prefix + "_z0.bin", result.z0, {{"name", "z0"}});
    write_raw_tensor(prefix + "_image.bin", image, {{"name", "decoded"}});

    const auto& st = result.stats;
    nlohmann::ordered_json meta;
    meta["seed"] = config.seed;
    meta["mode"] = mode_name(sc.mode);
    meta["steps"] = sc.steps;
    meta["guidance"] = sc.guidance;
    meta["cfg"] = sc.cfg;
    meta["shapes"] = {{"z0", result.z0.shape()}, {"image", image.shape()}};
    meta["references"] = nlohmann::ordered_json::array();
    for (const auto& it : request.items)
        meta["references"].push_back({{"category", mc.categories[it.category]}, {"tokens", it.tokens()}});
    meta["equivalence"] = {{"cached_vs_uncached_max_abs_diff", probe_diff}};
    meta["stats"] = {{"reference_branch_calls", st.reference_branch_calls},
                     {"joint_passes", st.joint_passes},
                     {"denoise_calls", st.denoise_calls},
                     {"cache_fingerprint_before", st.cache_fingerprint_before},
                     {"cache_fingerprint_after", st.cache_fingerprint_after},
                     {"cache_hash_before", st.cache_hash_before},
                     {"cache_hash_after", st.cache_hash_after}};
    const double step_mean = st.step_seconds.empty() ? 0.0
                                                     : std::accumulate(st.step_seconds.begin(), st.step_seconds.end(), 0.0) /
                                                           double(st.step_seconds.size());
    meta["timings"] = {{"precompute_s", st.precompute_seconds}, {"total_s", st.total_seconds}, {"step_mean_s", step_mean}};
    std::ofstream file(prefix + ".json");
    if (!file)
        throw IoError("cannot open '" + prefix + ".json' for writing");
    file << meta.dump(2) << "\n";

    out << "sampled " << request.items.size() << " references in mode " << mode_name(sc.mode) << "; cached vs uncached max abs diff "
        << std::scientific << probe_diff << std::defaultfloat << "\n";
    out << "wrote " << prefix << "_z0.bin, " << prefix << "_image.bin, " << prefix << ".json\n";
    return kExitOk;
}

} // namespace fastfit
