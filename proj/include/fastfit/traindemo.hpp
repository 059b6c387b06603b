#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fastfit/denoiser.hpp"
#include "fastfit/graph.hpp"
#include "fastfit/sampler.hpp"
#include "fastfit/synthetic.hpp"

namespace fastfit {

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    double lr = 1e-3;
    double rms_decay = 0.99;
    double rms_eps = 1e-8;
    double ref_dropout = 0.2;
    std::size_t dataset = 512;
    std::size_t eval_samples = 32;
    std::size_t log_every = 100;

    void validate() const;
};

// Per-sample draws of one training step.
struct StepDraws {
    std::size_t t = 1;
    bool dropped = false;
};

template <typename T>
struct StepResult {
    double loss = 0.0;
    std::vector<Tensor<T>> grads; // aligned with DenoiserParams::for_each order
    std::vector<StepDraws> draws;
};

// Loss of one sample: ε-prediction MSE at step t with noise eps. When
// `dropped`, the references are removed. Recorded on `tape`; returns the loss node.
template <typename T>
NodeId record_sample_loss(TapeContext<T>& ctx, const DenoiserParams<T>& params, const SyntheticSample<T>& sample,
                          std::size_t t, const Tensor<T>& eps, bool dropped, const NoiseSchedule& schedule);

// Batch-mean loss and gradients. t ~ U{1..T−1}, ε ~ N(0, I) and the joint
// reference dropout are drawn from rng per sample in batch order; gradients
// are accumulated in that order.
template <typename T>
StepResult<T> training_step(const DenoiserParams<T>& params, std::span<const SyntheticSample<T>> batch, Rng& rng,
                            const NoiseSchedule& schedule, double ref_dropout);

// Momentum-free per-parameter RMS scaling.
template <typename T>
class RmsOptimizer {
public:
    RmsOptimizer(const DenoiserParams<T>& params, double lr, double decay, double eps);

    void apply(DenoiserParams<T>& params, const std::vector<Tensor<T>>& grads);

    std::vector<Tensor<T>>& state() { return mean_sq_; }
    const std::vector<Tensor<T>>& state() const { return mean_sq_; }

private:
    double lr_, decay_, eps_;
    std::vector<Tensor<T>> mean_sq_;
};

// Fixed evaluation set: samples plus per-sample (t, ε), no dropout.
template <typename T>
struct EvalSet {
    std::vector<SyntheticSample<T>> samples;
    std::vector<std::size_t> ts;
    std::vector<Tensor<T>> noise;
};

template <typename T>
EvalSet<T> make_eval_set(const SyntheticWorld& world, std::uint64_t seed, std::size_t count);

template <typename T>
double eval_loss(const DenoiserParams<T>& params, const EvalSet<T>& eval, const NoiseSchedule& schedule);

template <typename T>
struct TrainState {
    DenoiserParams<T> params;
    std::vector<Tensor<T>> optimizer;        // RMS accumulators; empty before the first step
    std::size_t step = 0;                    // steps completed
    std::vector<std::pair<std::size_t, double>> curve; // (step, batch loss)
};

struct TrainReport {
    double eval_loss_initial = 0.0;
    double eval_loss_final = 0.0;
    std::size_t steps_run = 0;
    double seconds = 0.0;
};

// Runs steps [state.step, cfg.steps). Data order, per-step draws and the
// evaluation set depend only on seed and the step index, so a resumed run
// continues the same curve. Aborts with NumericError on a non-finite loss.
template <typename T>
TrainReport train(TrainState<T>& state, const SyntheticWorld& world, const TrainConfig& cfg, std::uint64_t seed,
                  const std::function<void(std::size_t, double)>& on_step = {});

template <typename T>
void save_train_state(const TrainState<T>& state, const std::string& weights_path);
// Reads weights and, if present, the "<weights>.opt" optimizer sidecar.
template <typename T>
TrainState<T> load_train_state(const std::string& weights_path);

void write_loss_csv(const std::string& path, const std::vector<std::pair<std::size_t, double>>& curve);

// Mean squared error over masked tokens between 20-step cached samples and
// the targets, for the first `count` evaluation samples.
template <typename T>
double masked_reconstruction_mse(const DenoiserParams<T>& params, const EvalSet<T>& eval, const SamplerConfig& cfg,
                                 std::size_t count, std::uint64_t seed);

struct RoutingReport {
    std::size_t regions = 0;     // regions scored
    std::size_t follows_label = 0; // regions closer to the reference now carrying their label
};

// Swaps the category labels of the first two references of each multi-reference
// evaluation sample and checks which reference's content each region follows.
template <typename T>
RoutingReport class_routing_check(const DenoiserParams<T>& params, const EvalSet<T>& eval, const SamplerConfig& cfg,
                                  std::size_t count, std::uint64_t seed);

} // namespace fastfit
