#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fastfit/denoiser.hpp"
#include "fastfit/sampler.hpp"

namespace fastfit {

// Geometry of one benchmark request.
struct BenchShape {
    ModelConfig model;
    std::vector<std::size_t> ref_tokens; // n_ri per reference
    std::size_t steps = 20;
    bool cfg = true;

    std::size_t ref_total() const;
};

// Multiply-add counts of the matmul-bearing ops (projections, mixers, time
// MLP, modulation, attention logits and attention-value products).
// Normalization, activations and softmax are excluded.
struct FlopsBreakdown {
    double one_time = 0;  // reference cache precompute (cached mode only)
    double per_step = 0;  // one denoising step including the CFG branch
    double total = 0;     // one_time + steps · per_step
};

FlopsBreakdown flops(const BenchShape& shape, SampleMode mode);

struct BenchOptions {
    std::vector<SampleMode> modes{SampleMode::Cached, SampleMode::UncachedJoint, SampleMode::FullAttention};
    std::size_t runs = 10;
    std::size_t warmup = 3;
    std::size_t threads = 1; // >1 adds a cached-mode throughput measurement with one shared cache
    std::uint64_t seed = 0;
    double guidance = 2.5;

    void validate() const;
};

struct ModeTiming {
    SampleMode mode = SampleMode::Cached;
    std::size_t runs = 0;
    double mean_s = 0, stdev_s = 0;           // end-to-end sample() time
    double step_mean_s = 0, step_stdev_s = 0; // per denoising step
    double flops = 0;                         // analytical total
    double flops_per_step = 0;
    double ratio = 0;          // mean_s / cached mean_s (0 when cached was not measured)
    double analytic_ratio = 0; // flops / cached flops
    std::int64_t peak_workspace_bytes = 0;
};

struct ThroughputResult {
    std::size_t threads = 0;
    std::size_t requests = 0;
    double seconds = 0;
    double requests_per_s = 0;
};

struct BenchReport {
    std::size_t tokens_x = 0;
    std::vector<std::size_t> ref_tokens;
    std::size_t width = 0, heads = 0, blocks = 0, steps = 0;
    bool cfg = true;
    std::size_t warmup = 0, runs = 0;
    std::size_t params = 0;
    double timer_tick_s = 0;
    std::vector<ModeTiming> modes;
    ThroughputResult throughput;
    bool valid = false;
    std::string note; // why the report is invalid, if it is

    const ModeTiming* find(SampleMode mode) const;
};

// Smallest observable steady_clock increment, in seconds.
double timer_tick_seconds();

// Paired protocol: every run times each requested mode once on identical
// inputs, alternating the mode order between runs. Runs in 32-bit.
BenchReport measure(const BenchShape& shape, const BenchOptions& options);

enum class ReportFormat { Json, Csv, Markdown };
ReportFormat parse_report_format(const std::string& name);
// Picks the format from a path suffix (.json, .csv, .md).
ReportFormat report_format_for_path(const std::string& path);

std::string emit_report(const BenchReport& report, ReportFormat format);
BenchReport load_report_json(const std::string& text);

} // namespace fastfit
