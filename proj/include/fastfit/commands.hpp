#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "fastfit/config.hpp"

namespace fastfit {

enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitUsage = 2, kExitNumeric = 3 };

struct VerifyArgs {
    bool break_mask = false;
};

struct BenchArgs {
    std::optional<std::string> mode;
    std::optional<std::size_t> runs, warmup, threads;
    std::optional<std::string> out;
};

struct TrainArgs {
    std::optional<std::size_t> steps;
    std::optional<std::string> out;
    std::optional<std::string> resume;
    std::optional<std::string> loss_csv;
};

struct SampleArgs {
    std::optional<std::string> weights;
    std::optional<std::string> mode;
    std::optional<std::string> out;
};

int cmd_verify(const RunConfig& config, const VerifyArgs& args, std::ostream& out);
int cmd_bench(const RunConfig& config, const BenchArgs& args, std::ostream& out);
int cmd_train_demo(const RunConfig& config, const TrainArgs& args, std::ostream& out);
int cmd_sample(const RunConfig& config, const SampleArgs& args, std::ostream& out);

} // namespace fastfit
