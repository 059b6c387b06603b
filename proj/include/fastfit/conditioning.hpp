#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fastfit/denoiser.hpp"
#include "fastfit/pseudo_vae.hpp"
#include "fastfit/tensor.hpp"

namespace fastfit {

// Person-side conditioning channels for the denoising tokens.
template <typename T>
struct PersonCondition {
    Tensor<T> mask;      // n_X × 1, values in [0, 1]
    Tensor<T> composite; // n_X × d_lat, encoded masked person with the pose drawn on top
};

// Fixed sparse stick-figure raster. Pixels where `present` is 1 replace the
// underlying image with `pixels`.
struct PoseRaster {
    Tensor<double> pixels;  // H × W × c
    Tensor<double> present; // H × W, 0 or 1
};

PoseRaster make_pose_raster(std::size_t height, std::size_t width, std::size_t channels);

// Area average over non-overlapping factor×factor blocks: H×W -> (H/f · W/f)×1.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t factor);

// Decodes the person latent, zeroes masked pixels, draws the pose, re-encodes.
template <typename T>
PersonCondition<T> assemble_person_condition(const Tensor<T>& person_latent, const Tensor<T>& mask_fullres,
                                             const PoseRaster& pose, const PseudoVae& vae, std::size_t grid_h,
                                             std::size_t grid_w);

// [z_t | mask | composite], the per-step denoiser input.
template <typename T>
Tensor<T> denoiser_input(const Tensor<T>& z_t, const PersonCondition<T>& person);

template <typename T>
struct ReferenceImage {
    Tensor<T> image; // H × W × c
    std::size_t category = 0;
};

// Encodes each image; rejects duplicate or unknown categories and more
// references than categories.
template <typename T>
std::vector<ReferenceItem<T>> encode_references(std::span<const ReferenceImage<T>> images, const PseudoVae& vae,
                                                std::size_t categories);

} // namespace fastfit
