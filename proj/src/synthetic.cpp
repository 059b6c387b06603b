#include "fastfit/synthetic.hpp"

#include <algorithm>
#include <numeric>

namespace fastfit {

Region category_region(std::size_t category, const ModelConfig& config) {
    if (category >= 5 || category >= config.categories.size())
        throw ArgumentError("no synthetic region for category index " + std::to_string(category));
    const std::size_t h = config.grid_h, w = config.grid_w;
    if (h < 4 || w < 2)
        throw ConfigError("synthetic regions need a grid of at least 4x2 tokens");
    const std::size_t band = h / 4;
    switch (category) {
    case 0:
        return {0, band, 0, w};
    case 1:
        return {band, 2 * band, 0, w};
    case 2:
        return {2 * band, 3 * band, 0, w};
    case 3:
        return {3 * band, h, 0, w / 2};
    default:
        return {3 * band, h, w / 2, w};
    }
}

template <typename T>
Tensor<T> place_references(const Tensor<T>& base, std::span<const ReferenceItem<T>> items, const Tensor<T>& token_mask,
                           const ModelConfig& config) {
    if (base.rows() != config.tokens() || token_mask.rows() != config.tokens())
        throw DimensionError("placement inputs do not match the model grid");
    Tensor<T> out = base;
    for (const auto& item : items) {
        if (item.latent.cols() != base.cols())
            throw DimensionError("reference latent width does not match the person latent");
        const Region reg = category_region(item.category, config);
        for (std::size_t r = reg.row_begin; r < reg.row_end; ++r)
            for (std::size_t c = reg.col_begin; c < reg.col_end; ++c) {
                const std::size_t tok = r * config.grid_w + c;
                if (token_mask(tok, 0) == T(0))
                    continue;
                const std::size_t src = ((r - reg.row_begin) % item.grid_h) * item.grid_w +
                                        (c - reg.col_begin) % item.grid_w;
                std::copy_n(item.latent.row(src), base.cols(), out.row(tok));
            }
    }
    return out;
}

SyntheticWorld::SyntheticWorld(const ModelConfig& m, const SyntheticConfig& s, std::size_t patch)
    : model(m), synth(s), vae(patch, m.latent_channels / (patch * patch)),
      pose(make_pose_raster(m.grid_h * patch, m.grid_w * patch, m.latent_channels / (patch * patch))) {
    if (m.latent_channels % (patch * patch) != 0)
        throw ConfigError("latent_channels must be a multiple of patch^2");
    if (s.min_refs < 1 || s.max_refs < s.min_refs || s.max_refs > std::min<std::size_t>(5, m.categories.size()))
        throw ConfigError("synthetic reference count range is invalid");
}

template <typename T>
SyntheticSample<T> make_sample(Rng& rng, const SyntheticWorld& world) {
    const auto& mc = world.model;
    const auto& sc = world.synth;
    const std::size_t n = mc.tokens(), dl = mc.latent_channels, p = world.vae.patch();
    const std::size_t n_cat = std::min<std::size_t>(5, mc.categories.size());

    Tensor<double> person({n, dl});
    for (auto& v : person.values())
        v = rng.uniform(-1.0, 1.0);

    const std::size_t k = sc.min_refs + rng.below(sc.max_refs - sc.min_refs + 1);
    std::vector<std::size_t> cats(n_cat);
    std::iota(cats.begin(), cats.end(), 0);
    for (std::size_t i = 0; i < k; ++i)
        std::swap(cats[i], cats[i + rng.below(n_cat - i)]);
    cats.resize(k);
    std::sort(cats.begin(), cats.end());

    std::vector<ReferenceItem<double>> items;
    const std::size_t nr = sc.ref_grid_h * sc.ref_grid_w;
    for (std::size_t cat : cats) {
        std::vector<double> base(dl);
        for (auto& b : base)
            b = rng.uniform(-sc.base_range, sc.base_range);
        Tensor<double> lat({nr, dl});
        for (std::size_t i = 0; i < nr; ++i)
            for (std::size_t j = 0; j < dl; ++j)
                lat(i, j) = base[j] + rng.uniform(-sc.texture_range, sc.texture_range);
        items.push_back({std::move(lat), cat, sc.ref_grid_h, sc.ref_grid_w});
    }

    Tensor<double> token_mask({n, 1});
    for (std::size_t cat : cats) {
        Region reg = category_region(cat, mc);
        if (sc.random_rectangles) {
            const std::size_t h = 1 + rng.below(reg.rows()), w = 1 + rng.below(reg.cols());
            const std::size_t r0 = reg.row_begin + rng.below(reg.rows() - h + 1);
            const std::size_t c0 = reg.col_begin + rng.below(reg.cols() - w + 1);
            reg = {r0, r0 + h, c0, c0 + w};
        }
        for (std::size_t r = reg.row_begin; r < reg.row_end; ++r)
            for (std::size_t c = reg.col_begin; c < reg.col_end; ++c)
                token_mask(r * mc.grid_w + c, 0) = 1.0;
    }
    Tensor<double> mask_full({mc.grid_h * p, mc.grid_w * p});
    for (std::size_t r = 0; r < mask_full.dim(0); ++r)
        for (std::size_t c = 0; c < mask_full.dim(1); ++c)
            mask_full(r, c) = token_mask((r / p) * mc.grid_w + c / p, 0);

    Tensor<double> z0 = place_references<double>(person, items, token_mask, mc);
    auto cond = assemble_person_condition(person, mask_full, world.pose, world.vae, mc.grid_h, mc.grid_w);

    SyntheticSample<T> s;
    s.z0 = z0.cast<T>();
    s.person_latent = person.cast<T>();
    s.mask_fullres = mask_full.cast<T>();
    s.token_mask = token_mask.cast<T>();
    s.person = {cond.mask.cast<T>(), cond.composite.cast<T>()};
    for (const auto& it : items)
        s.items.push_back(it.cast<T>());
    return s;
}

template Tensor<float> place_references<float>(const Tensor<float>&, std::span<const ReferenceItem<float>>,
                                               const Tensor<float>&, const ModelConfig&);
template Tensor<double> place_references<double>(const Tensor<double>&, std::span<const ReferenceItem<double>>,
                                                 const Tensor<double>&, const ModelConfig&);
template SyntheticSample<float> make_sample<float>(Rng&, const SyntheticWorld&);
template SyntheticSample<double> make_sample<double>(Rng&, const SyntheticWorld&);

} // namespace fastfit
