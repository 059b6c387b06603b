#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fastfit/traindemo.hpp"
#include "fastfit/verify.hpp"

using namespace fastfit;

namespace {

ModelConfig tiny_model() {
    ModelConfig m;
    m.width = 8;
    m.heads = 2;
    m.blocks = 1;
    m.grid_h = 4;
    m.grid_w = 3;
    return m;
}

SyntheticConfig tiny_synth() {
    SyntheticConfig s;
    s.ref_grid_h = 2;
    s.ref_grid_w = 2;
    return s;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("category regions tile the grid") {
    const ModelConfig m;
    std::vector<int> owner(m.tokens(), 0);
    for (std::size_t c = 0; c < 5; ++c) {
        const Region r = category_region(c, m);
        CHECK(r.rows() > 0);
        CHECK(r.cols() > 0);
        for (std::size_t i = r.row_begin; i < r.row_end; ++i)
            for (std::size_t j = r.col_begin; j < r.col_end; ++j)
                ++owner[i * m.grid_w + j];
    }
    for (int o : owner)
        CHECK(o == 1);
}

TEST_CASE("synthetic samples follow the construction rule") {
    const ModelConfig m;
    const SyntheticWorld world(m, SyntheticConfig{});
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng a(seed), b(seed);
        const auto s = make_sample<double>(a, world);
        const auto again = make_sample<double>(b, world);
        CHECK(s.z0 == again.z0);
        CHECK(s.person.composite == again.person.composite);

        REQUIRE(!s.items.empty());
        CHECK(s.items.size() <= 5);
        for (std::size_t i = 1; i < s.items.size(); ++i)
            CHECK(s.items[i - 1].category < s.items[i].category);
        for (const auto& it : s.items)
            CHECK(max_abs(it.latent) <= 1.0);

        // Re-placement oracle.
        Tensor<double> want = s.person_latent;
        std::vector<int> region_hits(5, 0);
        for (const auto& it : s.items) {
            const Region r = category_region(it.category, m);
            for (std::size_t i = r.row_begin; i < r.row_end; ++i)
                for (std::size_t j = r.col_begin; j < r.col_end; ++j) {
                    const std::size_t tok = i * m.grid_w + j;
                    if (s.token_mask[tok] != 1.0)
                        continue;
                    ++region_hits[it.category];
                    const std::size_t src = ((i - r.row_begin) % it.grid_h) * it.grid_w + (j - r.col_begin) % it.grid_w;
                    for (std::size_t c = 0; c < m.latent_channels; ++c)
                        want(tok, c) = it.latent(src, c);
                }
        }
        CHECK(s.z0 == want);
        std::size_t masked = 0;
        for (double v : s.token_mask.values())
            masked += v == 1.0;
        std::size_t hits = 0;
        for (std::size_t c = 0; c < 5; ++c) {
            hits += region_hits[c];
            bool present = false;
            for (const auto& it : s.items)
                present = present || it.category == c;
            CHECK((region_hits[c] > 0) == present);
        }
        CHECK(hits == masked);
        for (std::size_t t = 0; t < m.tokens(); ++t)
            CHECK(s.person.mask[t] == s.token_mask[t]);
    }
}

TEST_CASE("a one-reference sample masks exactly one category region") {
    const ModelConfig m;
    SyntheticConfig sc;
    sc.min_refs = sc.max_refs = 1;
    const SyntheticWorld world(m, sc);
    Rng rng(3);
    const auto s = make_sample<double>(rng, world);
    REQUIRE(s.items.size() == 1);
    const Region r = category_region(s.items[0].category, m);
    for (std::size_t i = 0; i < m.grid_h; ++i)
        for (std::size_t j = 0; j < m.grid_w; ++j)
            CHECK(s.token_mask[i * m.grid_w + j] == (r.contains(i, j) ? 1.0 : 0.0));
}

TEST_CASE("zero-noise limit with a perfect predictor") {
    Rng rng(4);
    const auto z0 = gaussian<double>(rng, 5, 3), eps = gaussian<double>(rng, 5, 3);
    const NoiseSchedule s;
    CHECK(add_noise(z0, eps, 0, s) == z0);
    CHECK(mean_squared_error(eps, eps) == 0.0);
}

TEST_CASE("training gradients match central differences") {
    const auto report = denoiser_gradient_report(gradient_check_model(), 11, 1e-2, 64);
    CHECK(report.max_rel_error() <= 1e-4);
    const auto model = gradient_check_model();
    Rng rng(0);
    const auto p = DenoiserParams<double>::init(model, rng);
    std::size_t i = 0;
    p.for_each([&](const std::string& name, const Tensor<double>& t) {
        REQUIRE(i < report.params.size());
        CHECK(report.params[i].name == name);
        CHECK(report.params[i].coords_checked == std::min<std::size_t>(64, t.size()));
        ++i;
    });
}

TEST_CASE("training step averages per-sample gradients") {
    const auto m = tiny_model();
    const SyntheticWorld world(m, tiny_synth());
    Rng prng(5);
    const auto p = DenoiserParams<double>::init(m, prng);
    Rng srng(6);
    const std::vector batch{make_sample<double>(srng, world), make_sample<double>(srng, world)};
    const NoiseSchedule schedule;
    Rng rng(7);
    const auto step = training_step<double>(p, batch, rng, schedule, 0.0);
    REQUIRE(step.draws.size() == 2);

    Rng replay(7);
    double loss = 0;
    std::vector<Tensor<double>> sum;
    for (std::size_t b = 0; b < 2; ++b) {
        const std::size_t t = 1 + replay.below(schedule.steps() - 1);
        CHECK(t == step.draws[b].t);
        const auto eps = gaussian<double>(replay, m.tokens(), m.latent_channels);
        (void)replay.bernoulli(0.0);
        Tape<double> tape;
        TapeContext<double> ctx(tape);
        const NodeId l = record_sample_loss(ctx, p, batch[b], t, eps, false, schedule);
        loss += tape.value(l)[0] / 2;
        const auto g = tape.backward(l);
        std::size_t i = 0;
        p.for_each([&](const std::string&, const Tensor<double>& param) {
            const NodeId* id = ctx.leaf_of(param);
            const Tensor<double>* gi = id ? g.find(*id) : nullptr;
            Tensor<double> add_g = gi ? *gi : Tensor<double>(param.shape());
            if (b == 0)
                sum.push_back(scale(add_g, 0.5));
            else
                sum[i] = add(sum[i], scale(add_g, 0.5));
            ++i;
        });
    }
    CHECK(std::abs(step.loss - loss) <= 1e-12);
    REQUIRE(sum.size() == step.grads.size());
    for (std::size_t i = 0; i < sum.size(); ++i)
        CHECK(max_abs_diff(sum[i], step.grads[i]) <= 1e-12);
}

TEST_CASE("reference dropout frequency") {
    ModelConfig m = tiny_model();
    m.grid_w = 2;
    SyntheticConfig sc;
    sc.ref_grid_h = sc.ref_grid_w = 1;
    sc.max_refs = 1;
    const SyntheticWorld world(m, sc);
    Rng prng(8);
    const auto p = DenoiserParams<double>::init(m, prng);
    Rng srng(9);
    std::vector<SyntheticSample<double>> batch;
    for (int i = 0; i < 100; ++i)
        batch.push_back(make_sample<double>(srng, world));
    const NoiseSchedule schedule;
    std::size_t dropped = 0, total = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng = Rng(10).fork(s);
        for (const auto& d : training_step<double>(p, batch, rng, schedule, 0.2).draws) {
            dropped += d.dropped;
            ++total;
        }
    }
    CHECK(total == 10000);
    const double rate = double(dropped) / double(total);
    CHECK(rate >= 0.18);
    CHECK(rate <= 0.22);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    const auto m = tiny_model();
    const SyntheticWorld world(m, tiny_synth());
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch = 2;
    cfg.dataset = 8;
    cfg.eval_samples = 2;
    cfg.lr = 0;
    TrainState<float> state;
    Rng rng(11);
    state.params = DenoiserParams<float>::init(m, rng);
    const auto before = state.params.fingerprint();
    (void)train<float>(state, world, cfg, 1);
    CHECK(state.params.fingerprint() == before);
    CHECK(state.step == 3);
    CHECK(state.curve.size() == 3);
}

TEST_CASE("training is reproducible and resumes onto the same curve") {
    const auto m = tiny_model();
    const SyntheticWorld world(m, tiny_synth());
    TrainConfig cfg;
    cfg.steps = 6;
    cfg.batch = 2;
    cfg.dataset = 8;
    cfg.eval_samples = 2;
    auto fresh = [&]() {
        TrainState<float> s;
        Rng rng(12);
        s.params = DenoiserParams<float>::init(m, rng);
        return s;
    };
    auto a = fresh(), b = fresh();
    const auto ra = train<float>(a, world, cfg, 5);
    (void)train<float>(b, world, cfg, 5);
    CHECK(a.params.fingerprint() == b.params.fingerprint());
    CHECK(a.curve == b.curve);
    CHECK(ra.steps_run == 6);

    auto c = fresh();
    TrainConfig half = cfg;
    half.steps = 3;
    (void)train<float>(c, world, half, 5);
    const auto path = temp_path("fastfit_test_resume.bin");
    save_train_state(c, path);
    auto resumed = load_train_state<float>(path);
    CHECK(resumed.step == 3);
    CHECK(resumed.curve == c.curve);
    CHECK(resumed.params.fingerprint() == c.params.fingerprint());
    (void)train<float>(resumed, world, cfg, 5);
    CHECK(resumed.params.fingerprint() == a.params.fingerprint());
    CHECK(resumed.curve == a.curve);
    std::filesystem::remove(path);
    std::filesystem::remove(path + ".opt");
}

TEST_CASE("a non-finite loss aborts training") {
    const auto m = tiny_model();
    const SyntheticWorld world(m, tiny_synth());
    TrainConfig cfg;
    cfg.steps = 2;
    cfg.batch = 1;
    cfg.dataset = 2;
    cfg.eval_samples = 1;
    TrainState<float> state;
    Rng rng(13);
    state.params = DenoiserParams<float>::init(m, rng);
    state.params.out_b[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(train<float>(state, world, cfg, 1), NumericError);
}

TEST_CASE("train config validation and loss csv") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.batch = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.batch = 8;
    cfg.ref_dropout = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    const auto path = temp_path("fastfit_test_loss.csv");
    write_loss_csv(path, {{0, 1.5}, {1, 0.25}});
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == "step,loss\n0,1.5\n1,0.25\n");
    std::filesystem::remove(path);
}
