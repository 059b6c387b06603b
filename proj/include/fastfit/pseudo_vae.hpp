#pragma once

#include <cstddef>
#include <cstdint>

#include "fastfit/tensor.hpp"

namespace fastfit {

// Fixed orthonormal patchify transform: each p×p×c patch, flattened in
// (row, col, channel) order, is multiplied by a seeded orthonormal matrix Q.
// Decoding multiplies by Qᵀ and un-patchifies, so decode(encode(x)) == x.
class PseudoVae {
public:
    static constexpr std::uint64_t kDefaultSeed = 0x5eed0fae;

    PseudoVae(std::size_t patch, std::size_t channels, std::uint64_t seed = kDefaultSeed);

    std::size_t patch() const { return patch_; }
    std::size_t channels() const { return channels_; }
    std::size_t latent_channels() const { return patch_ * patch_ * channels_; }
    const Tensor<double>& basis() const { return basis_; }

    // H×W×c image -> (H/p · W/p)×d_lat token grid, row-major over tokens.
    template <typename T>
    Tensor<T> encode(const Tensor<T>& image) const;
    template <typename T>
    Tensor<T> decode(const Tensor<T>& latent, std::size_t grid_h, std::size_t grid_w) const;

private:
    std::size_t patch_;
    std::size_t channels_;
    Tensor<double> basis_; // d_lat × d_lat, orthonormal columns
};

} // namespace fastfit
