#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "fastfit/denoiser.hpp"
#include "fastfit/sampler.hpp"
#include "fastfit/synthetic.hpp"
#include "fastfit/traindemo.hpp"

namespace fastfit {

struct BenchKnobs {
    std::string mode = "all"; // cached | uncached | full-attn | all
    std::size_t runs = 10;
    std::size_t warmup = 3;
    std::size_t threads = 1;
    std::size_t refs = 5;           // K
    std::size_t ref_grid_h = 16;    // reference token grid; defaults to the X grid
    std::size_t ref_grid_w = 12;
};

struct Paths {
    std::string weights_in;
    std::string weights_out = "fastfit_weights.bin";
    std::string report_out = "bench_report.json";
    std::string loss_csv = "loss.csv";
    std::string sample_out = "sample";
};

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    SamplerConfig sampler;
    BenchKnobs bench;
    TrainConfig train;
    SyntheticConfig synthetic;
    Paths paths;

    // Checks every section; throws ConfigError.
    void validate() const;
};

// Strict parse: unknown keys anywhere raise ConfigError. Missing keys keep defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::string& path);

// FASTFIT_SEED, when set, replaces the config seed.
void apply_seed_override(RunConfig& c);

} // namespace fastfit
