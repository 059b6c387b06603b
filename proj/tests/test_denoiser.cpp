#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fastfit/conditioning.hpp"
#include "fastfit/graph.hpp"
#include "fastfit/pseudo_vae.hpp"
#include "fastfit/refcache.hpp"
#include "fastfit/sampler.hpp"
#include "fastfit/traindemo.hpp"

using namespace fastfit;

namespace {

ModelConfig small_model() {
    ModelConfig m;
    m.width = 16;
    m.heads = 2;
    m.blocks = 2;
    m.grid_h = 4;
    m.grid_w = 3;
    return m;
}

Tensor<double> random_tensor(Rng& rng, Shape shape) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values())
        v = rng.uniform(-1, 1);
    return t;
}

ReferenceItem<double> random_item(Rng& rng, const ModelConfig& m, std::size_t category, std::size_t h = 2,
                                  std::size_t w = 3) {
    return {random_tensor(rng, {h * w, m.latent_channels}), category, h, w};
}

double rows_diff(const Tensor<double>& a, const Tensor<double>& b, std::size_t begin, std::size_t end) {
    return max_abs_diff(slice_rows(a, begin, end), slice_rows(b, begin, end));
}

} // namespace

TEST_CASE("timestep sinusoid") {
    auto t0 = timestep_sinusoid<double>(0, 8, 100);
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(t0[i] == (i % 2 == 0 ? 0.0 : 1.0));

    auto t1 = timestep_sinusoid<double>(1, 4, 100);
    const double want[] = {std::sin(1.0), std::cos(1.0), std::sin(1e-4), std::cos(1e-4)};
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(std::abs(t1[i] - want[i]) <= 1e-15);

    for (std::size_t a = 0; a < 100; ++a)
        for (std::size_t b = a + 1; b < 100; ++b)
            CHECK(max_abs_diff(timestep_sinusoid<double>(a, 16, 100), timestep_sinusoid<double>(b, 16, 100)) > 0);
    CHECK_THROWS_AS(timestep_sinusoid<double>(100, 4, 100), ArgumentError);
}

TEST_CASE("timestep embedding is deterministic and injective on the grid") {
    Rng rng(1);
    const auto p = DenoiserParams<double>::init(small_model(), rng);
    CHECK(timestep_embed(p, 17) == timestep_embed(p, 17));
    for (std::size_t t = 1; t < 100; ++t)
        CHECK(max_abs_diff(timestep_embed(p, t - 1), timestep_embed(p, t)) > 0);
    CHECK_THROWS_AS(timestep_embed(p, 100), ArgumentError);
}

TEST_CASE("class embedding lookup") {
    Rng rng(2);
    const auto p = DenoiserParams<double>::init(small_model(), rng);
    CHECK(class_embed(p, 3) == class_embed(p, 3));
    CHECK(max_abs_diff(class_embed(p, 0), class_embed(p, 1)) > 0);
    CHECK_THROWS_AS(class_embed(p, 5), ArgumentError);

    auto off = small_model();
    off.class_embedding = false;
    Rng rng2(2);
    const auto q = DenoiserParams<double>::init(off, rng2);
    CHECK(q.class_table.empty());
    CHECK(max_abs(class_embed(q, 4)) == 0.0);
}

TEST_CASE("class-table gradient is nonzero only for categories present") {
    auto model = small_model();
    Rng rng(3);
    auto params = DenoiserParams<double>::init(model, rng);
    SyntheticConfig sc;
    sc.ref_grid_h = 2;
    sc.ref_grid_w = 3;
    SyntheticWorld world(model, sc);
    Rng srng(4);
    auto sample = make_sample<double>(srng, world);
    sample.items = canonical_order<double>(std::vector{random_item(srng, model, 1), random_item(srng, model, 3)}, 5);

    Tape<double> tape;
    TapeContext<double> ctx(tape);
    const NoiseSchedule schedule;
    const auto eps = random_tensor(srng, {model.tokens(), model.latent_channels});
    const auto grads = tape.backward(record_sample_loss(ctx, params, sample, 20, eps, false, schedule));
    const NodeId* leaf = ctx.leaf_of(params.class_table);
    REQUIRE(leaf != nullptr);
    const auto& g = grads.at(*leaf);
    for (std::size_t c = 0; c < 5; ++c) {
        double row = 0;
        for (std::size_t j = 0; j < model.embed_dim(); ++j)
            row = std::max(row, std::abs(g(c, j)));
        if (c == 1 || c == 3)
            CHECK(row > 0);
        else
            CHECK(row == 0.0);
    }
}

TEST_CASE("modulated resblock") {
    auto model = small_model();
    Rng rng(5);
    auto p = DenoiserParams<double>::init(model, rng);
    auto block = p.blocks[0];
    const auto x = random_tensor(rng, {6, model.width});
    const auto e1 = random_tensor(rng, {1, model.embed_dim()}), e2 = random_tensor(rng, {1, model.embed_dim()});

    CHECK(max_abs_diff(modulated_resblock(x, e1, block), modulated_resblock(x, e2, block)) > 1e-6);

    auto zero_mixer = block;
    zero_mixer.mixer_w = Tensor<double>(block.mixer_w.shape());
    CHECK(modulated_resblock(x, e1, zero_mixer) == x);

    auto plain = block;
    plain.mod_scale_w = Tensor<double>(block.mod_scale_w.shape());
    plain.mod_shift_w = Tensor<double>(block.mod_shift_w.shape());
    const Tensor<double> zero_emb({1, model.embed_dim()});
    const auto want = add(x, add_row(matmul(silu(layer_norm(x, block.res_norm_gain, block.res_norm_bias)), block.mixer_w),
                                     block.mixer_b));
    CHECK(max_abs_diff(modulated_resblock(x, zero_emb, plain), want) <= 1e-14);
    CHECK_THROWS_AS(modulated_resblock(random_tensor(rng, {6, 5}), e1, block), DimensionError);
}

TEST_CASE("semi-attention mask enumeration") {
    const auto m = SemiAttentionMask::build({1, 1, 1});
    const int want[3][3] = {{1, 1, 1}, {0, 1, 0}, {0, 0, 1}};
    for (std::size_t q = 0; q < 3; ++q)
        for (std::size_t k = 0; k < 3; ++k)
            CHECK(m.allowed(q, k) == bool(want[q][k]));

    const auto m21 = SemiAttentionMask::build({2, 1});
    for (std::size_t q = 0; q < 2; ++q)
        for (std::size_t k = 0; k < 3; ++k)
            CHECK(m21.allowed(q, k));
    CHECK_FALSE(m21.allowed(2, 0));
    CHECK_FALSE(m21.allowed(2, 1));
    CHECK(m21.allowed(2, 2));

    const auto x_only = SemiAttentionMask::build({4});
    for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(x_only.allowed(q, k));

    CHECK_THROWS_AS(SemiAttentionMask::build({}), DimensionError);
    CHECK_THROWS(SemiAttentionMask::build({3, 0}));
}

TEST_CASE("mask layout agrees with the predicate") {
    const auto m = SemiAttentionMask::build({5, 3, 2, 4});
    std::vector<std::vector<bool>> seen(m.total(), std::vector<bool>(m.total(), false));
    for (const auto& s : m.layout())
        for (std::size_t q = s.row_begin; q < s.row_end; ++q)
            for (std::size_t k = s.col_begin; k < s.col_end; ++k)
                seen[q][k] = true;
    for (std::size_t q = 0; q < m.total(); ++q)
        for (std::size_t k = 0; k < m.total(); ++k)
            CHECK(seen[q][k] == m.allowed(q, k));
}

TEST_CASE("semi-attention information flow") {
    auto model = small_model();
    Rng rng(6);
    const auto p = DenoiserParams<double>::init(model, rng);
    const auto mask = SemiAttentionMask::build({4, 3, 2});
    const auto seq = random_tensor(rng, {9, model.width});
    const auto base = semi_attention_joint(seq, mask, p.blocks[0], model.heads);

    auto ref_changed = seq;
    ref_changed(5, 0) += 0.5;
    const auto a = semi_attention_joint(ref_changed, mask, p.blocks[0], model.heads);
    CHECK(rows_diff(a, base, 0, 4) > 0);
    CHECK(rows_diff(a, base, 7, 9) == 0.0);

    auto x_changed = seq;
    for (std::size_t c = 0; c < model.width; ++c)
        x_changed(1, c) -= 0.3;
    const auto b = semi_attention_joint(x_changed, mask, p.blocks[0], model.heads);
    CHECK(rows_diff(b, base, 4, 9) == 0.0);

    for (const auto& probs : semi_attention_probabilities(seq, mask, p.blocks[0], model.heads))
        for (std::size_t q = 0; q < 9; ++q)
            for (std::size_t k = 0; k < 9; ++k)
                if (!mask.allowed(q, k))
                    CHECK(probs(q, k) == 0.0);
    CHECK_THROWS_AS(semi_attention_joint(random_tensor(rng, {8, model.width}), mask, p.blocks[0], model.heads),
                    DimensionError);
}

TEST_CASE("single-token attention returns token plus projected value") {
    auto model = small_model();
    Rng rng(7);
    const auto p = DenoiserParams<double>::init(model, rng);
    const auto& b = p.blocks[0];
    const auto tok = random_tensor(rng, {1, model.width});
    const auto out = semi_attention_joint(tok, SemiAttentionMask::build({1}), b, model.heads);
    const auto v = matmul(layer_norm(tok, b.attn_norm_gain, b.attn_norm_bias), b.wv);
    const auto want = add(tok, add_row(matmul(v, b.wo), b.bo));
    CHECK(max_abs_diff(out, want) <= 1e-14);
}

TEST_CASE("reference branch is pure and matches joint-pass slices at every t") {
    auto model = small_model();
    Rng rng(8);
    const auto p = DenoiserParams<double>::init(model, rng);
    const std::vector items{random_item(rng, model, 0), random_item(rng, model, 2, 3, 2), random_item(rng, model, 4)};
    const auto first = forward_reference_branch(items[1], p);
    const auto second = forward_reference_branch(items[1], p);
    for (std::size_t l = 0; l < model.blocks; ++l) {
        CHECK(first.keys[l] == second.keys[l]);
        CHECK(first.values[l] == second.values[l]);
    }

    double worst = 0;
    for (std::size_t t = 0; t < model.t_max; t += 7) {
        const auto x = random_tensor(rng, {model.tokens(), model.input_channels()});
        const auto joint = forward_joint<double>(x, t, items, p);
        std::size_t row = model.tokens();
        for (const auto& it : items) {
            const auto br = forward_reference_branch(it, p);
            for (std::size_t l = 0; l < model.blocks; ++l) {
                worst = std::max({worst, max_abs_diff(slice_rows(joint.keys[l], row, row + it.tokens()), br.keys[l]),
                                  max_abs_diff(slice_rows(joint.values[l], row, row + it.tokens()), br.values[l])});
            }
            row += it.tokens();
        }
    }
    CHECK(worst <= 1e-10);
    CHECK_THROWS_AS(forward_reference_branch(random_item(rng, model, 9), p), ArgumentError);
}

TEST_CASE("cached denoise equals the X segment of a joint pass") {
    auto model = small_model();
    Rng rng(9);
    const auto p = DenoiserParams<double>::init(model, rng);
    for (std::size_t k = 0; k <= 5; ++k) {
        std::vector<ReferenceItem<double>> items;
        for (std::size_t c = 0; c < k; ++c)
            items.push_back(random_item(rng, model, c));
        const auto cache = precompute_cache<double>(items, p);
        const auto x = random_tensor(rng, {model.tokens(), model.input_channels()});
        const auto eps = forward_denoise<double>(x, 42, cache.span(), p);
        CHECK(eps.rows() == model.tokens());
        CHECK(eps.cols() == model.latent_channels);
        CHECK(max_abs_diff(eps, forward_joint<double>(x, 42, items, p).eps) <= 1e-10);
    }
    const auto x = random_tensor(rng, {model.tokens(), model.input_channels()});
    std::vector<LayerKV<double>> wrong(model.blocks + 1);
    CHECK_THROWS_AS(forward_denoise<double>(x, 3, wrong, p), DimensionError);
}

TEST_CASE("changing only a category changes the X output") {
    auto model = small_model();
    Rng rng(10);
    const auto p = DenoiserParams<double>::init(model, rng);
    auto item = random_item(rng, model, 0);
    const auto x = random_tensor(rng, {model.tokens(), model.input_channels()});
    const auto a = forward_joint<double>(x, 10, std::vector{item}, p).eps;
    item.category = 1;
    const auto b = forward_joint<double>(x, 10, std::vector{item}, p).eps;
    CHECK(max_abs_diff(a, b) > 1e-8);
}

TEST_CASE("full attention makes references depend on X") {
    auto model = small_model();
    Rng rng(11);
    const auto p = DenoiserParams<double>::init(model, rng);
    const std::vector items{random_item(rng, model, 0)};
    const auto x1 = random_tensor(rng, {model.tokens(), model.input_channels()});
    const auto x2 = random_tensor(rng, {model.tokens(), model.input_channels()});
    const auto a = forward_joint<double>(x1, 10, items, p, JointAttention::Full);
    const auto b = forward_joint<double>(x2, 10, items, p, JointAttention::Full);
    CHECK(rows_diff(a.keys[1], b.keys[1], model.tokens(), model.tokens() + 6) > 0);
}

TEST_CASE("parameter count matches the closed form and the class table adds 5 rows") {
    for (std::size_t blocks : {1, 2, 3}) {
        auto model = small_model();
        model.blocks = blocks;
        Rng rng(12);
        const auto p = DenoiserParams<double>::init(model, rng);
        std::size_t visited = 0;
        p.for_each([&](const std::string&, const Tensor<double>& t) { visited += t.size(); });
        CHECK(p.parameter_count() == closed_form_parameter_count(model));
        CHECK(visited == closed_form_parameter_count(model));

        auto off = model;
        off.class_embedding = false;
        CHECK(closed_form_parameter_count(model) - closed_form_parameter_count(off) == 5 * model.embed_dim());
    }
    const ModelConfig defaults;
    CHECK(closed_form_parameter_count(defaults) == 25 * 64 + 64 + 2 * (64 * 64 + 64) + 5 * 64 +
                                                      2 * (2 * 64 + 2 * (64 * 64 + 64) + 64 * 64 + 64 + 2 * 64 +
                                                           4 * 64 * 64 + 64) +
                                                      2 * 64 + 64 * 12 + 12);
}

TEST_CASE("parameter names do not depend on the number of references") {
    Rng rng(13);
    const auto p = DenoiserParams<double>::init(small_model(), rng);
    std::size_t with_ref = 0;
    p.for_each([&](const std::string& name, const Tensor<double>&) {
        if (name.find("ref") != std::string::npos || name.find("item") != std::string::npos)
            ++with_ref;
    });
    CHECK(with_ref == 0);
}

TEST_CASE("pseudo-VAE") {
    PseudoVae vae(2, 3);
    const auto& q = vae.basis();
    CHECK(max_abs_diff(matmul_tn(q, q), Tensor<double>::identity(12)) <= 1e-12);

    Rng rng(14);
    const auto img = random_tensor(rng, {8, 6, 3});
    const auto lat = vae.encode(img);
    CHECK(lat.rows() == 12);
    CHECK(lat.cols() == 12);
    CHECK(max_abs_diff(vae.decode(lat, 4, 3), img) <= 1e-12);

    for (std::size_t gi = 0; gi < 4; ++gi)
        for (std::size_t gj = 0; gj < 3; ++gj) {
            double patch = 0, latent = 0;
            for (std::size_t di = 0; di < 2; ++di)
                for (std::size_t dj = 0; dj < 2; ++dj)
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        patch += img(2 * gi + di, 2 * gj + dj, ch) * img(2 * gi + di, 2 * gj + dj, ch);
            for (std::size_t c = 0; c < 12; ++c)
                latent += lat(gi * 3 + gj, c) * lat(gi * 3 + gj, c);
            CHECK(std::abs(patch - latent) <= 1e-6);
        }

    CHECK(max_abs(vae.encode(Tensor<double>({4, 4, 3}))) == 0.0);
    CHECK_THROWS_AS(vae.encode(Tensor<double>({5, 4, 3})), DimensionError);
    CHECK_THROWS_AS(vae.encode(Tensor<double>({4, 4, 2})), DimensionError);

    const auto f = vae.encode(img.cast<float>());
    CHECK(max_abs_diff(vae.decode(f, 4, 3), img.cast<float>()) <= 1e-6f);
}

TEST_CASE("person condition") {
    Tensor<double> checker({4, 4});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            checker(i, j) = double((i + j) % 2);
    const auto d = downsample_mask(checker, 2);
    CHECK(d.rows() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(d[i] == 0.5);

    ModelConfig model;
    PseudoVae vae(2, 3);
    Rng rng(15);
    const auto person = random_tensor(rng, {model.tokens(), 12});
    const PoseRaster no_pose{Tensor<double>({32, 24, 3}), Tensor<double>({32, 24})};
    const auto full = assemble_person_condition(person, Tensor<double>::filled({32, 24}, 1.0), no_pose, vae, 16, 12);
    CHECK(max_abs(full.composite) <= 1e-12);
    for (double v : full.mask.values())
        CHECK(v == 1.0);
    const auto none = assemble_person_condition(person, Tensor<double>({32, 24}), no_pose, vae, 16, 12);
    CHECK(max_abs_diff(none.composite, person) <= 1e-12);
    CHECK_THROWS_AS(assemble_person_condition(person, Tensor<double>::filled({32, 24}, 2.0), no_pose, vae, 16, 12),
                    ArgumentError);

    const auto input = denoiser_input(person, none);
    CHECK(input.cols() == model.input_channels());
    CHECK(input(5, 12) == none.mask[5]);
    CHECK(input(5, 13) == none.composite(5, 0));
}
