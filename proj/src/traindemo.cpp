#include "fastfit/traindemo.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "fastfit/weights_io.hpp"

namespace fastfit {

void TrainConfig::validate() const {
    if (steps < 1)
        throw ConfigError("train.steps must be >= 1");
    if (batch < 1)
        throw ConfigError("train.batch must be >= 1");
    if (!(lr >= 0) || !std::isfinite(lr))
        throw ConfigError("train.lr must be a finite value >= 0");
    if (!(rms_decay > 0 && rms_decay < 1))
        throw ConfigError("train.rms_decay must lie in (0, 1)");
    if (!(rms_eps > 0))
        throw ConfigError("train.rms_eps must be > 0");
    if (!(ref_dropout >= 0 && ref_dropout <= 1))
        throw ConfigError("train.ref_dropout must lie in [0, 1]");
    if (dataset < batch)
        throw ConfigError("train.dataset must be at least train.batch");
    if (eval_samples < 1)
        throw ConfigError("train.eval_samples must be >= 1");
}

template <typename T>
NodeId record_sample_loss(TapeContext<T>& ctx, const DenoiserParams<T>& params, const SyntheticSample<T>& sample,
                          std::size_t t, const Tensor<T>& eps, bool dropped, const NoiseSchedule& schedule) {
    const Tensor<T> x = denoiser_input(add_noise(sample.z0, eps, t, schedule), sample.person);
    TapeRefs refs;
    if (!dropped && !sample.items.empty()) {
        refs.keys.resize(params.blocks.size());
        refs.values.resize(params.blocks.size());
        for (const auto& item : sample.items) {
            auto branch = graph::reference_branch(ctx, params, item);
            for (std::size_t l = 0; l < params.blocks.size(); ++l) {
                refs.keys[l].push_back(branch.keys[l]);
                refs.values[l].push_back(branch.values[l]);
            }
        }
    }
    NodeId pred = graph::denoise(ctx, params, x, t, refs);
    return ctx.tape().mse(pred, ctx.constant(eps));
}

template <typename T>
StepResult<T> training_step(const DenoiserParams<T>& params, std::span<const SyntheticSample<T>> batch, Rng& rng,
                            const NoiseSchedule& schedule, double ref_dropout) {
    if (batch.empty())
        throw ArgumentError("training batch is empty");
    StepResult<T> out;
    params.for_each([&](const std::string&, const Tensor<T>& p) { out.grads.emplace_back(p.shape()); });
    const T inv_b = T(1) / static_cast<T>(batch.size());
    for (const auto& sample : batch) {
        StepDraws d;
        d.t = 1 + static_cast<std::size_t>(rng.below(schedule.steps() - 1));
        const Tensor<T> eps = gaussian<T>(rng, sample.z0.rows(), sample.z0.cols());
        d.dropped = rng.bernoulli(ref_dropout);
        out.draws.push_back(d);

        Tape<T> tape;
        TapeContext<T> ctx(tape);
        const NodeId loss = record_sample_loss(ctx, params, sample, d.t, eps, d.dropped, schedule);
        out.loss += static_cast<double>(tape.value(loss)[0]) / static_cast<double>(batch.size());
        const Gradients<T> g = tape.backward(loss);
        std::size_t i = 0;
        params.for_each([&](const std::string&, const Tensor<T>& p) {
            const NodeId* id = ctx.leaf_of(p);
            const Tensor<T>* gp = id ? g.find(*id) : nullptr;
            if (gp) {
                auto& acc = out.grads[i];
                for (std::size_t k = 0; k < acc.size(); ++k)
                    acc[k] += (*gp)[k] * inv_b;
            }
            ++i;
        });
    }
    return out;
}

template <typename T>
RmsOptimizer<T>::RmsOptimizer(const DenoiserParams<T>& params, double lr, double decay, double eps)
    : lr_(lr), decay_(decay), eps_(eps) {
    params.for_each([&](const std::string&, const Tensor<T>& p) { mean_sq_.emplace_back(p.shape()); });
}

template <typename T>
void RmsOptimizer<T>::apply(DenoiserParams<T>& params, const std::vector<Tensor<T>>& grads) {
    if (grads.size() != mean_sq_.size())
        throw DimensionError("optimizer state does not match the parameter set");
    const T decay = static_cast<T>(decay_), keep = static_cast<T>(1 - decay_);
    const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_);
    std::size_t i = 0;
    params.for_each([&](const std::string& name, Tensor<T>& p) {
        const auto& g = grads[i];
        auto& v = mean_sq_[i];
        if (g.shape() != p.shape() || v.shape() != p.shape())
            throw DimensionError("gradient for '" + name + "' has the wrong shape");
        for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = decay * v[k] + keep * g[k] * g[k];
            p[k] -= lr * g[k] / (std::sqrt(v[k]) + eps);
        }
        ++i;
    });
}

template <typename T>
EvalSet<T> make_eval_set(const SyntheticWorld& world, std::uint64_t seed, std::size_t count) {
    EvalSet<T> eval;
    const Rng root = Rng(seed).fork(2);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = root.fork(i);
        eval.samples.push_back(make_sample<T>(rng, world));
        eval.ts.push_back(1 + static_cast<std::size_t>(rng.below(world.model.t_max - 1)));
        eval.noise.push_back(gaussian<T>(rng, world.model.tokens(), world.model.latent_channels));
    }
    return eval;
}

template <typename T>
double eval_loss(const DenoiserParams<T>& params, const EvalSet<T>& eval, const NoiseSchedule& schedule) {
    double total = 0;
    for (std::size_t i = 0; i < eval.samples.size(); ++i) {
        const auto& s = eval.samples[i];
        auto cache = precompute_cache<T>(s.items, params);
        const Tensor<T> x = denoiser_input(add_noise(s.z0, eval.noise[i], eval.ts[i], schedule), s.person);
        const Tensor<T> pred = forward_denoise<T>(x, eval.ts[i], cache.span(), params);
        total += static_cast<double>(mean_squared_error(pred, eval.noise[i]));
    }
    return total / static_cast<double>(eval.samples.size());
}

template <typename T>
TrainReport train(TrainState<T>& state, const SyntheticWorld& world, const TrainConfig& cfg, std::uint64_t seed,
                  const std::function<void(std::size_t, double)>& on_step) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const NoiseSchedule schedule(world.model.t_max);
    if (!(state.params.config == world.model))
        throw ConfigError("weights were trained for a different model config");

    std::vector<SyntheticSample<T>> data;
    const Rng data_root = Rng(seed).fork(1);
    for (std::size_t i = 0; i < cfg.dataset; ++i) {
        Rng r = data_root.fork(i);
        data.push_back(make_sample<T>(r, world));
    }
    const EvalSet<T> eval = make_eval_set<T>(world, seed, cfg.eval_samples);

    TrainReport report;
    report.eval_loss_initial = eval_loss(state.params, eval, schedule);

    RmsOptimizer<T> opt(state.params, cfg.lr, cfg.rms_decay, cfg.rms_eps);
    if (!state.optimizer.empty()) {
        if (state.optimizer.size() != opt.state().size())
            throw ConfigError("optimizer state does not match the model");
        opt.state() = state.optimizer;
    }

    const Rng step_root = Rng(seed).fork(3);
    const Rng order_root = Rng(seed).fork(4);
    std::vector<std::size_t> order(cfg.dataset);
    std::size_t order_epoch = static_cast<std::size_t>(-1);
    std::vector<SyntheticSample<T>> batch;
    for (std::size_t step = state.step; step < cfg.steps; ++step) {
        batch.clear();
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const std::size_t pos = step * cfg.batch + b;
            const std::size_t epoch = pos / cfg.dataset;
            if (epoch != order_epoch) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                Rng shuffle = order_root.fork(epoch);
                for (std::size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[shuffle.below(i)]);
                order_epoch = epoch;
            }
            batch.push_back(data[order[pos % cfg.dataset]]);
        }
        Rng rng = step_root.fork(step);
        auto r = training_step<T>(state.params, batch, rng, schedule, cfg.ref_dropout);
        if (!std::isfinite(r.loss)) {
            std::ostringstream msg;
            msg << "training diverged at step " << step << ": loss " << r.loss << " (lr " << cfg.lr << ")";
            throw NumericError(msg.str());
        }
        opt.apply(state.params, r.grads);
        state.curve.emplace_back(step, r.loss);
        ++report.steps_run;
        if (on_step)
            on_step(step, r.loss);
    }
    state.optimizer = opt.state();
    state.step = std::max(state.step, cfg.steps);
    report.eval_loss_final = eval_loss(state.params, eval, schedule);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

template <typename T>
void save_train_state(const TrainState<T>& state, const std::string& weights_path) {
    save_params(state.params, weights_path, {{"step", state.step}});
    std::vector<NamedTensor> tensors;
    std::size_t i = 0;
    state.params.for_each([&](const std::string& name, const Tensor<T>&) {
        if (i < state.optimizer.size())
            tensors.push_back({name, state.optimizer[i].template cast<float>()});
        ++i;
    });
    nlohmann::json meta;
    meta["kind"] = "optimizer_state";
    meta["step"] = state.step;
    meta["curve"] = state.curve;
    write_container(weights_path + ".opt", meta, tensors);
}

template <typename T>
TrainState<T> load_train_state(const std::string& weights_path) {
    TrainState<T> state;
    nlohmann::json extra;
    state.params = load_params<T>(weights_path, &extra);
    state.step = extra.is_object() ? extra.value("step", std::size_t{0}) : 0;
    const std::string opt_path = weights_path + ".opt";
    if (!std::filesystem::exists(opt_path))
        return state;
    auto [meta, tensors] = read_container(opt_path);
    if (meta.value("kind", "") != "optimizer_state")
        throw IoError(opt_path + ": not an optimizer state file");
    if (meta.value("step", std::size_t{0}) != state.step)
        throw IoError(opt_path + ": step does not match the weights file");
    state.curve = meta.at("curve").get<std::vector<std::pair<std::size_t, double>>>();
    std::size_t i = 0;
    state.params.for_each([&](const std::string& name, const Tensor<T>& p) {
        if (!tensors.empty()) {
            if (i >= tensors.size() || tensors[i].name != name || tensors[i].value.shape() != p.shape())
                throw IoError(opt_path + ": state for '" + name + "' is missing or malformed");
            state.optimizer.push_back(tensors[i].value.template cast<T>());
        }
        ++i;
    });
    return state;
}

void write_loss_csv(const std::string& path, const std::vector<std::pair<std::size_t, double>>& curve) {
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot open '" + path + "' for writing");
    out << "step,loss\n" << std::setprecision(9);
    for (const auto& [step, loss] : curve)
        out << step << ',' << loss << '\n';
}

namespace {

template <typename T>
double masked_mse(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& token_mask, std::size_t* count) {
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        if (token_mask(r, 0) == T(0))
            continue;
        for (std::size_t c = 0; c < a.cols(); ++c) {
            const double d = static_cast<double>(a(r, c)) - static_cast<double>(b(r, c));
            acc += d * d;
        }
        n += a.cols();
    }
    if (count)
        *count = n;
    return n ? acc / static_cast<double>(n) : 0.0;
}

template <typename T>
Tensor<T> region_mask(const Region& reg, const Tensor<T>& token_mask, const ModelConfig& mc) {
    Tensor<T> m({mc.tokens(), 1});
    for (std::size_t r = reg.row_begin; r < reg.row_end; ++r)
        for (std::size_t c = reg.col_begin; c < reg.col_end; ++c)
            m(r * mc.grid_w + c, 0) = token_mask(r * mc.grid_w + c, 0);
    return m;
}

} // namespace

template <typename T>
double masked_reconstruction_mse(const DenoiserParams<T>& params, const EvalSet<T>& eval, const SamplerConfig& cfg,
                                 std::size_t count, std::uint64_t seed) {
    SamplerConfig sc = cfg;
    sc.mode = SampleMode::Cached;
    const auto& mc = params.config;
    double acc = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < std::min(count, eval.samples.size()); ++i) {
        const auto& s = eval.samples[i];
        Rng rng = Rng(seed).fork(i);
        const Tensor<T> z_T = gaussian<T>(rng, mc.tokens(), mc.latent_channels);
        const auto out = sample<T>(z_T, s.person, s.items, params, sc);
        std::size_t n = 0;
        const double m = masked_mse(out.z0, s.z0, s.token_mask, &n);
        acc += m * static_cast<double>(n);
        total += n;
    }
    return total ? acc / static_cast<double>(total) : 0.0;
}

template <typename T>
RoutingReport class_routing_check(const DenoiserParams<T>& params, const EvalSet<T>& eval, const SamplerConfig& cfg,
                                  std::size_t count, std::uint64_t seed) {
    SamplerConfig sc = cfg;
    sc.mode = SampleMode::Cached;
    const auto& mc = params.config;
    RoutingReport report;
    std::size_t used = 0;
    for (std::size_t i = 0; i < eval.samples.size() && used < count; ++i) {
        const auto& s = eval.samples[i];
        if (s.items.size() < 2)
            continue;
        ++used;
        auto swapped = s.items;
        std::swap(swapped[0].category, swapped[1].category);
        Rng rng = Rng(seed).fork(i);
        const Tensor<T> z_T = gaussian<T>(rng, mc.tokens(), mc.latent_channels);
        const auto out = sample<T>(z_T, s.person, swapped, params, sc);
        // Region of each swapped label, scored against both candidate placements.
        const Tensor<T> follow = place_references<T>(s.person_latent, swapped, s.token_mask, mc);
        for (std::size_t k = 0; k < 2; ++k) {
            const Region reg = category_region(swapped[k].category, mc);
            const Tensor<T> m = region_mask(reg, s.token_mask, mc);
            const double to_label = masked_mse(out.z0, follow, m, nullptr);
            const double to_original = masked_mse(out.z0, s.z0, m, nullptr);
            ++report.regions;
            if (to_label < to_original)
                ++report.follows_label;
        }
    }
    return report;
}

#define FASTFIT_INSTANTIATE(T)                                                                                     \
    template NodeId record_sample_loss<T>(TapeContext<T>&, const DenoiserParams<T>&, const SyntheticSample<T>&,    \
                                          std::size_t, const Tensor<T>&, bool, const NoiseSchedule&);              \
    template StepResult<T> training_step<T>(const DenoiserParams<T>&, std::span<const SyntheticSample<T>>, Rng&,   \
                                            const NoiseSchedule&, double);                                         \
    template class RmsOptimizer<T>;                                                                                \
    template EvalSet<T> make_eval_set<T>(const SyntheticWorld&, std::uint64_t, std::size_t);                       \
    template double eval_loss<T>(const DenoiserParams<T>&, const EvalSet<T>&, const NoiseSchedule&);               \
    template TrainReport train<T>(TrainState<T>&, const SyntheticWorld&, const TrainConfig&, std::uint64_t,        \
                                  const std::function<void(std::size_t, double)>&);                                \
    template void save_train_state<T>(const TrainState<T>&, const std::string&);                                   \
    template TrainState<T> load_train_state<T>(const std::string&);                                                \
    template double masked_reconstruction_mse<T>(const DenoiserParams<T>&, const EvalSet<T>&,                      \
                                                 const SamplerConfig&, std::size_t, std::uint64_t);                \
    template RoutingReport class_routing_check<T>(const DenoiserParams<T>&, const EvalSet<T>&,                     \
                                                  const SamplerConfig&, std::size_t, std::uint64_t);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

} // namespace fastfit
