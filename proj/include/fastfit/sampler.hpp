#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fastfit/conditioning.hpp"
#include "fastfit/denoiser.hpp"
#include "fastfit/refcache.hpp"
#include "fastfit/rng.hpp"

namespace fastfit {

// Linear β over [beta_start, beta_end] assigned to β_1..β_T, with ᾱ_0 = 1.
class NoiseSchedule {
public:
    explicit NoiseSchedule(std::size_t steps = 100, double beta_start = 1e-4, double beta_end = 0.02);

    std::size_t steps() const { return betas_.size(); }
    double beta(std::size_t t) const;       // t in 1..T
    double alpha_bar(std::size_t t) const;  // t in 0..T

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
};

// Deterministic DDIM update from raw ᾱ values:
// ẑ_0 = (z − √(1−ᾱ_t)·ε̂)/√ᾱ_t, z' = √ᾱ_prev·ẑ_0 + √(1−ᾱ_prev)·ε̂.
template <typename T>
Tensor<T> ddim_update(const Tensor<T>& z_t, const Tensor<T>& eps_hat, double abar_t, double abar_prev);

// Requires t_prev < t ≤ T. At t_prev = 0 the result is ẑ_0.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_hat, std::size_t t, std::size_t t_prev,
                    const NoiseSchedule& schedule);

// Uniform stride T/N starting at T−1: N=20, T=100 gives 99, 94, ..., 4.
std::vector<std::size_t> ddim_timesteps(std::size_t steps, std::size_t t_max);

template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, T guidance);

// z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε
template <typename T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, std::size_t t, const NoiseSchedule& schedule);

template <typename T>
Tensor<T> gaussian(Rng& rng, std::size_t rows, std::size_t cols);

enum class SampleMode { Cached, UncachedJoint, FullAttention };

std::string mode_name(SampleMode mode);
SampleMode parse_mode(const std::string& name);

struct SamplerConfig {
    std::size_t steps = 20;
    double guidance = 2.5;
    bool cfg = true;
    SampleMode mode = SampleMode::Cached;
    double eta = 0.0; // only the deterministic sampler is supported
    std::uint64_t seed = 0;

    void validate(std::size_t t_max) const;
};

struct SampleStats {
    std::uint64_t reference_branch_calls = 0;
    std::uint64_t joint_passes = 0;       // conditional passes that recomputed reference tokens
    std::uint64_t denoise_calls = 0;      // X-only passes (cached conditional or unconditional)
    std::uint64_t cache_fingerprint_before = 0;
    std::uint64_t cache_fingerprint_after = 0;
    std::uint64_t cache_hash_before = 0;
    std::uint64_t cache_hash_after = 0;
    double precompute_seconds = 0.0;
    std::vector<double> step_seconds;
    double total_seconds = 0.0;
};

template <typename T>
struct SampleResult {
    Tensor<T> z0;
    SampleStats stats;
};

// Runs the N-step loop from z_T. Cached mode precomputes the reference cache
// once (or uses `cache` when given); the other modes rebuild the joint
// sequence every step. CFG evaluates an unconditional branch with no
// references. Passing a cache with a non-cached mode is an error.
template <typename T>
SampleResult<T> sample(const Tensor<T>& z_T, const PersonCondition<T>& person, std::span<const ReferenceItem<T>> items,
                       const DenoiserParams<T>& params, const SamplerConfig& config,
                       const ReferenceKVCache<T>* cache = nullptr);

} // namespace fastfit
