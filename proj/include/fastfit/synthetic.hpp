#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fastfit/conditioning.hpp"
#include "fastfit/denoiser.hpp"
#include "fastfit/pseudo_vae.hpp"
#include "fastfit/rng.hpp"

namespace fastfit {

// Token-grid rectangle [row_begin, row_end) × [col_begin, col_end).
struct Region {
    std::size_t row_begin = 0, row_end = 0, col_begin = 0, col_end = 0;

    std::size_t rows() const { return row_end - row_begin; }
    std::size_t cols() const { return col_end - col_begin; }
    bool contains(std::size_t r, std::size_t c) const {
        return r >= row_begin && r < row_end && c >= col_begin && c < col_end;
    }
};

// Where each of the five default categories lives on the person grid: top,
// bottom and dress take horizontal bands, shoes and bag split the last band.
Region category_region(std::size_t category, const ModelConfig& config);

struct SyntheticConfig {
    std::size_t ref_grid_h = 8;
    std::size_t ref_grid_w = 6;
    std::size_t min_refs = 1;
    std::size_t max_refs = 5;
    // false: each item's whole category region is masked; true: a random
    // sub-rectangle of it.
    bool random_rectangles = false;
    double base_range = 0.7;
    double texture_range = 0.3;
};

template <typename T>
struct SyntheticSample {
    Tensor<T> z0;            // target latent
    Tensor<T> person_latent; // latent of the person before try-on
    Tensor<T> mask_fullres;  // H × W
    Tensor<T> token_mask;    // n_X × 1, 0 or 1
    PersonCondition<T> person;
    std::vector<ReferenceItem<T>> items; // canonical category order
};

// Copies reference tokens into their category regions wherever token_mask is
// 1: region-local (i, j) takes token (i mod h_r, j mod w_r).
template <typename T>
Tensor<T> place_references(const Tensor<T>& base, std::span<const ReferenceItem<T>> items, const Tensor<T>& token_mask,
                           const ModelConfig& config);

// Shared pieces of the synthetic pipeline for one model geometry.
struct SyntheticWorld {
    ModelConfig model;
    SyntheticConfig synth;
    PseudoVae vae;
    PoseRaster pose;

    SyntheticWorld(const ModelConfig& model, const SyntheticConfig& synth, std::size_t patch = 2);
};

template <typename T>
SyntheticSample<T> make_sample(Rng& rng, const SyntheticWorld& world);

} // namespace fastfit
