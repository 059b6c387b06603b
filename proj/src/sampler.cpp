#include "fastfit/sampler.hpp"

#include <chrono>
#include <cmath>

namespace fastfit {

NoiseSchedule::NoiseSchedule(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 2)
        throw ConfigError("noise schedule needs at least 2 steps");
    if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1))
        throw ConfigError("noise schedule needs 0 < beta_start < beta_end < 1");
    betas_.resize(steps);
    alpha_bar_.resize(steps + 1);
    alpha_bar_[0] = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
        betas_[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
        alpha_bar_[i + 1] = alpha_bar_[i] * (1.0 - betas_[i]);
    }
}

double NoiseSchedule::beta(std::size_t t) const {
    if (t < 1 || t > betas_.size())
        throw ArgumentError("beta index " + std::to_string(t) + " outside 1.." + std::to_string(betas_.size()));
    return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
    if (t >= alpha_bar_.size())
        throw ArgumentError("alpha_bar index " + std::to_string(t) + " outside 0.." + std::to_string(betas_.size()));
    return alpha_bar_[t];
}

template <typename T>
Tensor<T> ddim_update(const Tensor<T>& z_t, const Tensor<T>& eps_hat, double abar_t, double abar_prev) {
    if (z_t.shape() != eps_hat.shape())
        throw DimensionError("ddim: latent " + shape_str(z_t.shape()) + " vs noise " + shape_str(eps_hat.shape()));
    const double a = std::sqrt(abar_t), s = std::sqrt(1.0 - abar_t);
    const double ap = std::sqrt(abar_prev), sp = std::sqrt(1.0 - abar_prev);
    Tensor<T> out(z_t.shape());
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const double e = static_cast<double>(eps_hat[i]);
        const double z0 = (static_cast<double>(z_t[i]) - s * e) / a;
        out[i] = static_cast<T>(ap * z0 + sp * e);
    }
    ensure_finite(out, "ddim_update");
    return out;
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_hat, std::size_t t, std::size_t t_prev,
                    const NoiseSchedule& schedule) {
    if (t > schedule.steps() || t_prev >= t)
        throw ArgumentError("ddim step " + std::to_string(t) + " -> " + std::to_string(t_prev) +
                            " is outside the schedule");
    return ddim_update(z_t, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
}

std::vector<std::size_t> ddim_timesteps(std::size_t steps, std::size_t t_max) {
    if (steps == 0 || steps >= t_max)
        throw ConfigError("step count must be in 1.." + std::to_string(t_max - 1));
    const std::size_t stride = t_max / steps;
    std::vector<std::size_t> ts(steps);
    for (std::size_t i = 0; i < steps; ++i)
        ts[i] = t_max - 1 - i * stride;
    return ts;
}

template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, T guidance) {
    if (eps_cond.shape() != eps_uncond.shape())
        throw DimensionError("cfg: mismatched predictions");
    Tensor<T> out(eps_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = eps_uncond[i] + guidance * (eps_cond[i] - eps_uncond[i]);
    return out;
}

template <typename T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, std::size_t t, const NoiseSchedule& schedule) {
    if (z0.shape() != eps.shape())
        throw DimensionError("add_noise: mismatched shapes");
    const double abar = schedule.alpha_bar(t);
    const T a = static_cast<T>(std::sqrt(abar)), s = static_cast<T>(std::sqrt(1.0 - abar));
    Tensor<T> out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a * z0[i] + s * eps[i];
    return out;
}

template <typename T>
Tensor<T> gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor<T> out({rows, cols});
    for (auto& v : out.values())
        v = static_cast<T>(rng.normal());
    return out;
}

std::string mode_name(SampleMode mode) {
    switch (mode) {
    case SampleMode::Cached:
        return "cached";
    case SampleMode::UncachedJoint:
        return "uncached";
    case SampleMode::FullAttention:
        return "full-attn";
    }
    return "?";
}

SampleMode parse_mode(const std::string& name) {
    if (name == "cached")
        return SampleMode::Cached;
    if (name == "uncached" || name == "uncached-joint")
        return SampleMode::UncachedJoint;
    if (name == "full-attn" || name == "full-attention")
        return SampleMode::FullAttention;
    throw ConfigError("unknown sampling mode '" + name + "' (cached|uncached|full-attn)");
}

void SamplerConfig::validate(std::size_t t_max) const {
    if (steps == 0 || steps >= t_max)
        throw ConfigError("sampler.steps must be in 1.." + std::to_string(t_max - 1));
    if (!(guidance >= 0) || !std::isfinite(guidance))
        throw ConfigError("sampler.guidance must be a finite value >= 0");
    if (eta != 0.0)
        throw ConfigError("sampler.eta must be 0; only the deterministic sampler is implemented");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

} // namespace

template <typename T>
SampleResult<T> sample(const Tensor<T>& z_T, const PersonCondition<T>& person, std::span<const ReferenceItem<T>> items,
                       const DenoiserParams<T>& params, const SamplerConfig& config,
                       const ReferenceKVCache<T>* cache) {
    const auto& mc = params.config;
    config.validate(mc.t_max);
    if (cache && config.mode != SampleMode::Cached)
        throw ArgumentError("a precomputed cache was supplied for mode '" + mode_name(config.mode) + "'");
    if (z_T.rank() != 2 || z_T.rows() != mc.tokens() || z_T.cols() != mc.latent_channels)
        throw DimensionError("initial latent " + shape_str(z_T.shape()) + " does not match the model grid");

    const NoiseSchedule schedule(mc.t_max);
    const auto ts = ddim_timesteps(config.steps, mc.t_max);
    const auto sorted = canonical_order(items, mc.categories.size());
    const std::uint64_t calls_before = reference_branch_calls();

    SampleResult<T> result;
    auto& st = result.stats;
    const auto run_start = Clock::now();

    ReferenceKVCache<T> owned;
    const ReferenceKVCache<T>* active = nullptr;
    if (config.mode == SampleMode::Cached) {
        if (cache) {
            if (cache->fingerprint() != cache_fingerprint(items, params))
                throw ArgumentError("supplied cache does not match these references and weights");
            active = cache;
        } else {
            const auto t0 = Clock::now();
            owned = precompute_cache(items, params);
            st.precompute_seconds = seconds_since(t0);
            active = &owned;
        }
        st.cache_fingerprint_before = active->fingerprint();
        st.cache_hash_before = active->content_hash();
    }

    const JointAttention kind =
        config.mode == SampleMode::FullAttention ? JointAttention::Full : JointAttention::Semi;
    const T guidance = static_cast<T>(config.guidance);

    Tensor<T> z = z_T;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const auto t0 = Clock::now();
        const std::size_t t = ts[i];
        const std::size_t t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        const Tensor<T> x = denoiser_input(z, person);

        Tensor<T> eps;
        if (active) {
            eps = forward_denoise<T>(x, t, active->span(), params);
            ++st.denoise_calls;
        } else {
            eps = forward_joint<T>(x, t, sorted, params, kind).eps;
            if (!sorted.empty())
                ++st.joint_passes;
            else
                ++st.denoise_calls;
        }
        if (config.cfg) {
            Tensor<T> uncond = forward_denoise<T>(x, t, {}, params);
            ++st.denoise_calls;
            eps = cfg_combine(eps, uncond, guidance);
        }
        z = ddim_step(z, eps, t, t_prev, schedule);
        st.step_seconds.push_back(seconds_since(t0));
    }

    if (active) {
        st.cache_fingerprint_after = active->fingerprint();
        st.cache_hash_after = active->content_hash();
    }
    st.reference_branch_calls = reference_branch_calls() - calls_before;
    st.total_seconds = seconds_since(run_start);
    result.z0 = std::move(z);
    return result;
}

#define FASTFIT_INSTANTIATE(T)                                                                                     \
    template Tensor<T> ddim_update<T>(const Tensor<T>&, const Tensor<T>&, double, double);                         \
    template Tensor<T> ddim_step<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t,                  \
                                    const NoiseSchedule&);                                                         \
    template Tensor<T> cfg_combine<T>(const Tensor<T>&, const Tensor<T>&, T);                                      \
    template Tensor<T> add_noise<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, const NoiseSchedule&);        \
    template Tensor<T> gaussian<T>(Rng&, std::size_t, std::size_t);                                                \
    template SampleResult<T> sample<T>(const Tensor<T>&, const PersonCondition<T>&,                                \
                                       std::span<const ReferenceItem<T>>, const DenoiserParams<T>&,                \
                                       const SamplerConfig&, const ReferenceKVCache<T>*);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

} // namespace fastfit
