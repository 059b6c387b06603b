#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastfit/autodiff.hpp"
#include "fastfit/denoiser.hpp"

namespace fastfit {

struct SuiteResult {
    std::string name;
    bool passed = false;
    double max_deviation = 0;
    double tolerance = 0;
    std::string detail;
};

struct VerifyOptions {
    bool break_mask = false;       // negative control: joint passes use a leaky mask
    std::size_t lossless_cases = 6; // (seed, K) cases, K cycling through 0..5
    std::size_t lossless_steps = 5;
};

// Cached vs uncached-joint sampling, 64-bit.
SuiteResult verify_losslessness(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options);
// Reference rows unaffected by X or other references; disallowed weights exactly zero.
SuiteResult verify_mask(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options);
// Cached reference K/V vs the reference rows of joint passes at every sampled step.
SuiteResult verify_timestep_independence(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options);
// Autodiff vs central differences on a 1-block width-16 model.
SuiteResult verify_gradients(std::uint64_t seed);

// Gradient report of the training loss for a small model, all parameter tensors.
GradReport denoiser_gradient_report(const ModelConfig& model, std::uint64_t seed, double step, std::size_t min_coords);

ModelConfig gradient_check_model();

std::vector<SuiteResult> run_verification(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options);

} // namespace fastfit
