#include <iostream>

#include <CLI11.hpp>

#include "fastfit/commands.hpp"

using namespace fastfit;

int main(int argc, char** argv) {
    CLI::App app{"fastfit: cacheable reference conditioning for a desk-scale diffusion denoiser"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    app.add_option("-c,--config", config_path, "JSON run config (defaults apply for missing keys)");
    app.add_option("--seed", seed, "Override the config seed (FASTFIT_SEED takes precedence)");

    VerifyArgs verify_args;
    auto* verify = app.add_subcommand("verify", "Run the equivalence, mask, timestep and gradient suites (64-bit)");
    verify->add_flag("--break-mask", verify_args.break_mask, "Test hook: run joint passes with a leaky mask");

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "Time cached, uncached and full-attention sampling");
    bench->add_option("--mode", bench_args.mode, "cached|uncached|full-attn|all")
        ->check(CLI::IsMember({"cached", "uncached", "full-attn", "all"}));
    bench->add_option("--runs", bench_args.runs, "Measured runs per mode (>= 10)");
    bench->add_option("--warmup", bench_args.warmup, "Warmup runs per mode (>= 3)");
    bench->add_option("--threads", bench_args.threads, "Threads for the shared-cache throughput run");
    bench->add_option("--out", bench_args.out, "Report path; suffix picks the format (.json, .csv, .md)");

    TrainArgs train_args;
    auto* train = app.add_subcommand("train-demo", "Train on the synthetic multi-reference task");
    train->add_option("--steps", train_args.steps, "Total optimizer steps");
    train->add_option("--out", train_args.out, "Weights output path");
    train->add_option("--resume", train_args.resume, "Continue from saved weights and optimizer state");
    train->add_option("--loss-csv", train_args.loss_csv, "Loss curve output path");

    SampleArgs sample_args;
    auto* sample = app.add_subcommand("sample", "Sample one synthetic try-on request and write tensors + metadata");
    sample->add_option("--weights", sample_args.weights, "Weights file");
    sample->add_option("--mode", sample_args.mode, "cached|uncached|full-attn")
        ->check(CLI::IsMember({"cached", "uncached", "full-attn"}));
    sample->add_option("--out", sample_args.out, "Output path prefix");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        RunConfig config = config_path.empty() ? run_config_from_json(nlohmann::json::object())
                                               : load_run_config(config_path);
        if (seed) {
            config.seed = *seed;
            config.sampler.seed = *seed;
        }
        apply_seed_override(config);
        if (*verify)
            return cmd_verify(config, verify_args, std::cout);
        if (*bench)
            return cmd_bench(config, bench_args, std::cout);
        if (*train)
            return cmd_train_demo(config, train_args, std::cout);
        return cmd_sample(config, sample_args, std::cout);
    } catch (const NumericError& e) {
        std::cerr << "numeric fault: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
