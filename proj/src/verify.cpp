#include "fastfit/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fastfit/graph.hpp"
#include "fastfit/refcache.hpp"
#include "fastfit/sampler.hpp"
#include "fastfit/traindemo.hpp"

namespace fastfit {

namespace {

std::vector<ReferenceItem<double>> random_items(Rng& rng, std::size_t k, const ModelConfig& model, std::size_t rh,
                                                std::size_t rw) {
    std::vector<std::size_t> cats(model.categories.size());
    for (std::size_t i = 0; i < cats.size(); ++i)
        cats[i] = i;
    for (std::size_t i = cats.size(); i > 1; --i)
        std::swap(cats[i - 1], cats[rng.below(i)]);
    std::vector<ReferenceItem<double>> items;
    for (std::size_t i = 0; i < k; ++i) {
        Tensor<double> lat({rh * rw, model.latent_channels});
        for (auto& v : lat.values())
            v = rng.uniform(-1, 1);
        items.push_back({std::move(lat), cats[i], rh, rw});
    }
    return items;
}

PersonCondition<double> random_person(Rng& rng, const ModelConfig& model) {
    PersonCondition<double> p{Tensor<double>({model.tokens(), 1}), Tensor<double>({model.tokens(), model.latent_channels})};
    for (auto& v : p.mask.values())
        v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    for (auto& v : p.composite.values())
        v = rng.uniform(-1, 1);
    return p;
}

Tensor<double> random_tokens(Rng& rng, const ModelConfig& model) {
    Tensor<double> x({model.tokens(), model.input_channels()});
    for (auto& v : x.values())
        v = rng.uniform(-1, 1);
    return x;
}

double rows_diff(const Tensor<double>& a, const Tensor<double>& b, std::size_t begin, std::size_t end) {
    double m = 0;
    for (std::size_t r = begin; r < end; ++r)
        for (std::size_t c = 0; c < a.cols(); ++c)
            m = std::max(m, std::abs(a(r, c) - b(r, c)));
    return m;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(3);
    s << std::scientific << v;
    return s.str();
}

} // namespace

SuiteResult verify_losslessness(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options) {
    SuiteResult r{"losslessness", true, 0.0, 1e-10, ""};
    for (std::size_t i = 0; i < options.lossless_cases; ++i) {
        Rng rng = Rng(seed).fork(100 + i);
        Rng prng = rng.fork(0);
        const auto params = DenoiserParams<double>::init(model, prng);
        const auto items = random_items(rng, i % 6, model, 8, 6);
        const auto person = random_person(rng, model);
        const auto z_T = gaussian<double>(rng, model.tokens(), model.latent_channels);
        SamplerConfig sc;
        sc.steps = options.lossless_steps;
        const auto cached = sample<double>(z_T, person, items, params, sc);
        sc.mode = SampleMode::UncachedJoint;
        const auto joint = sample<double>(z_T, person, items, params, sc);
        r.max_deviation = std::max(r.max_deviation, max_abs_diff(cached.z0, joint.z0));
    }
    r.passed = r.max_deviation <= r.tolerance;
    r.detail = std::to_string(options.lossless_cases) + " cases, K = 0..5, " + std::to_string(options.lossless_steps) +
               " steps with CFG";
    return r;
}

SuiteResult verify_mask(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options) {
    SuiteResult r{"mask", true, 0.0, 0.0, ""};
    Rng rng = Rng(seed).fork(200);
    Rng prng = rng.fork(0);
    const auto params = DenoiserParams<double>::init(model, prng);
    auto items = canonical_order<double>(random_items(rng, 3, model, 8, 6), model.categories.size());
    std::vector<std::size_t> lengths{model.tokens()};
    for (const auto& it : items)
        lengths.push_back(it.tokens());
    const auto mask = SemiAttentionMask::build(lengths);
    const auto used = options.break_mask ? mask.leaky() : mask;
    const std::size_t t = 37;

    const auto x = random_tokens(rng, model);
    const auto base = forward_joint<double>(x, t, items, params, JointAttention::Semi, &used);

    // X perturbation: every reference row must stay bit-identical.
    auto x2 = x;
    for (auto& v : x2.values())
        v += 0.25;
    const auto px = forward_joint<double>(x2, t, items, params, JointAttention::Semi, &used);
    double dev_x = 0;
    for (std::size_t l = 0; l < base.features.size(); ++l)
        dev_x = std::max(dev_x, rows_diff(base.features[l], px.features[l], model.tokens(), mask.total()));

    // R_0 perturbation: rows of R_1.. must stay bit-identical.
    auto items2 = items;
    for (auto& v : items2[0].latent.values())
        v = -v;
    const auto pr = forward_joint<double>(x, t, items2, params, JointAttention::Semi, &used);
    double dev_r = 0;
    const std::size_t r1 = model.tokens() + items[0].tokens();
    for (std::size_t l = 0; l < base.features.size(); ++l)
        dev_r = std::max(dev_r, rows_diff(base.features[l], pr.features[l], r1, mask.total()));

    // Disallowed attention weights.
    Tensor<double> seq({mask.total(), model.width});
    for (auto& v : seq.values())
        v = rng.uniform(-1, 1);
    double dev_p = 0;
    for (const auto& p : semi_attention_probabilities(seq, used, params.blocks[0], model.heads))
        for (std::size_t q = 0; q < mask.total(); ++q)
            for (std::size_t k = 0; k < mask.total(); ++k)
                if (!mask.allowed(q, k))
                    dev_p = std::max(dev_p, std::abs(p(q, k)));

    r.max_deviation = std::max({dev_x, dev_r, dev_p});
    r.passed = r.max_deviation == 0.0;
    r.detail = "X->R " + fmt(dev_x) + ", R_j->R_i " + fmt(dev_r) + ", masked weight " + fmt(dev_p);
    return r;
}

SuiteResult verify_timestep_independence(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options) {
    SuiteResult r{"timestep-independence", true, 0.0, 1e-10, ""};
    Rng rng = Rng(seed).fork(300);
    Rng prng = rng.fork(0);
    const auto params = DenoiserParams<double>::init(model, prng);
    const auto items = canonical_order<double>(random_items(rng, std::min<std::size_t>(5, model.categories.size()),
                                                            model, 8, 6),
                                               model.categories.size());
    const auto cache = precompute_cache<double>(items, params);
    std::vector<std::size_t> lengths{model.tokens()};
    for (const auto& it : items)
        lengths.push_back(it.tokens());
    const auto mask = SemiAttentionMask::build(lengths);
    const auto used = options.break_mask ? mask.leaky() : mask;
    const auto ts = ddim_timesteps(20, model.t_max);
    for (std::size_t t : ts) {
        const auto x = random_tokens(rng, model);
        const auto joint = forward_joint<double>(x, t, items, params, JointAttention::Semi, &used);
        for (std::size_t l = 0; l < params.blocks.size(); ++l) {
            std::size_t row = model.tokens();
            for (std::size_t i = 0; i < items.size(); ++i) {
                const std::size_t n = items[i].tokens();
                const auto k = slice_rows(joint.keys[l], row, row + n);
                const auto v = slice_rows(joint.values[l], row, row + n);
                r.max_deviation = std::max({r.max_deviation, max_abs_diff(k, cache.layers()[l].keys[i]),
                                            max_abs_diff(v, cache.layers()[l].values[i])});
                row += n;
            }
        }
    }
    r.passed = r.max_deviation <= r.tolerance;
    r.detail = std::to_string(ts.size()) + " timesteps, " + std::to_string(items.size()) + " references";
    return r;
}

ModelConfig gradient_check_model() {
    ModelConfig m;
    m.width = 16;
    m.heads = 2;
    m.blocks = 1;
    m.grid_h = 8;
    m.grid_w = 6;
    return m;
}

GradReport denoiser_gradient_report(const ModelConfig& model, std::uint64_t seed, double step, std::size_t min_coords) {
    Rng rng = Rng(seed).fork(400);
    Rng prng = rng.fork(0);
    auto params = DenoiserParams<double>::init(model, prng);
    SyntheticConfig sc;
    sc.ref_grid_h = 4;
    sc.ref_grid_w = 3;
    sc.min_refs = 2;
    sc.max_refs = 3;
    const SyntheticWorld world(model, sc);
    Rng srng = rng.fork(1);
    const auto sample = make_sample<double>(srng, world);
    const NoiseSchedule schedule(model.t_max);
    const std::size_t t = 30;
    const auto eps = gaussian<double>(rng, model.tokens(), model.latent_channels);

    Tape<double> tape;
    TapeContext<double> ctx(tape);
    const NodeId loss = record_sample_loss(ctx, params, sample, t, eps, false, schedule);
    const auto grads = tape.backward(loss);

    std::vector<Tensor<double>> analytic;
    std::vector<CheckedParam> checked;
    params.for_each([&](const std::string&, Tensor<double>& p) {
        const NodeId* id = ctx.leaf_of(p);
        const Tensor<double>* g = id ? grads.find(*id) : nullptr;
        analytic.push_back(g ? *g : Tensor<double>(p.shape()));
    });
    std::size_t i = 0;
    params.for_each([&](const std::string& name, Tensor<double>& p) {
        checked.push_back({name, &p, &analytic[i++]});
    });

    const Tensor<double> x = denoiser_input(add_noise(sample.z0, eps, t, schedule), sample.person);
    auto f = [&]() {
        const auto cache = precompute_cache<double>(sample.items, params);
        return mean_squared_error(forward_denoise<double>(x, t, cache.span(), params), eps);
    };
    Rng coords = rng.fork(2);
    return finite_diff_check(f, checked, step, coords, min_coords);
}

SuiteResult verify_gradients(std::uint64_t seed) {
    SuiteResult r{"gradients", true, 0.0, 1e-4, ""};
    const auto report = denoiser_gradient_report(gradient_check_model(), seed, 1e-2, 64);
    r.max_deviation = report.max_rel_error();
    std::size_t coords = 0;
    std::string worst;
    double worst_err = -1;
    for (const auto& p : report.params) {
        coords += p.coords_checked;
        if (p.max_rel_error > worst_err) {
            worst_err = p.max_rel_error;
            worst = p.name;
        }
    }
    r.passed = r.max_deviation <= r.tolerance;
    r.detail = std::to_string(report.params.size()) + " tensors, " + std::to_string(coords) + " coords, worst " + worst;
    return r;
}

std::vector<SuiteResult> run_verification(const ModelConfig& model, std::uint64_t seed, const VerifyOptions& options) {
    return {verify_losslessness(model, seed, options), verify_mask(model, seed, options),
            verify_timestep_independence(model, seed, options), verify_gradients(seed)};
}

} // namespace fastfit
