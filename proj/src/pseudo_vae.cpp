#include "fastfit/pseudo_vae.hpp"

#include <cmath>

#include "fastfit/rng.hpp"

namespace fastfit {

PseudoVae::PseudoVae(std::size_t patch, std::size_t channels, std::uint64_t seed)
    : patch_(patch), channels_(channels) {
    if (patch == 0 || channels == 0)
        throw ArgumentError("pseudo-VAE needs a positive patch size and channel count");
    const std::size_t n = latent_channels();
    Rng rng(seed);
    // Modified Gram-Schmidt on Gaussian columns; redraw on (improbable) rank loss.
    basis_ = Tensor<double>({n, n});
    for (std::size_t j = 0; j < n; ++j) {
        for (;;) {
            std::vector<double> v(n);
            for (auto& x : v)
                x = rng.normal();
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0;
                for (std::size_t i = 0; i < n; ++i)
                    dot += v[i] * basis_(i, k);
                for (std::size_t i = 0; i < n; ++i)
                    v[i] -= dot * basis_(i, k);
            }
            double norm = 0;
            for (double x : v)
                norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-6)
                continue;
            for (std::size_t i = 0; i < n; ++i)
                basis_(i, j) = v[i] / norm;
            break;
        }
    }
}

template <typename T>
Tensor<T> PseudoVae::encode(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(2) != channels_)
        throw DimensionError("pseudo-VAE expects H×W×" + std::to_string(channels_) + ", got " +
                             shape_str(image.shape()));
    const std::size_t H = image.dim(0), W = image.dim(1), p = patch_;
    if (H % p != 0 || W % p != 0)
        throw DimensionError("image " + shape_str(image.shape()) + " is not divisible by patch " + std::to_string(p));
    const std::size_t gh = H / p, gw = W / p, n = latent_channels();
    Tensor<T> out({gh * gw, n});
    std::vector<double> patch(n);
    for (std::size_t gi = 0; gi < gh; ++gi)
        for (std::size_t gj = 0; gj < gw; ++gj) {
            std::size_t idx = 0;
            for (std::size_t di = 0; di < p; ++di)
                for (std::size_t dj = 0; dj < p; ++dj)
                    for (std::size_t c = 0; c < channels_; ++c)
                        patch[idx++] = static_cast<double>(image(gi * p + di, gj * p + dj, c));
            T* row = out.row(gi * gw + gj);
            for (std::size_t k = 0; k < n; ++k) {
                double acc = 0;
                for (std::size_t i = 0; i < n; ++i)
                    acc += patch[i] * basis_(i, k);
                row[k] = static_cast<T>(acc);
            }
        }
    return out;
}

template <typename T>
Tensor<T> PseudoVae::decode(const Tensor<T>& latent, std::size_t grid_h, std::size_t grid_w) const {
    const std::size_t n = latent_channels(), p = patch_;
    if (latent.rank() != 2 || latent.rows() != grid_h * grid_w || latent.cols() != n)
        throw DimensionError("latent " + shape_str(latent.shape()) + " does not match a " + std::to_string(grid_h) +
                             "x" + std::to_string(grid_w) + " grid of width " + std::to_string(n));
    Tensor<T> image({grid_h * p, grid_w * p, channels_});
    std::vector<double> patch(n);
    for (std::size_t gi = 0; gi < grid_h; ++gi)
        for (std::size_t gj = 0; gj < grid_w; ++gj) {
            const T* row = latent.row(gi * grid_w + gj);
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0;
                for (std::size_t k = 0; k < n; ++k)
                    acc += basis_(i, k) * static_cast<double>(row[k]);
                patch[i] = acc;
            }
            std::size_t idx = 0;
            for (std::size_t di = 0; di < p; ++di)
                for (std::size_t dj = 0; dj < p; ++dj)
                    for (std::size_t c = 0; c < channels_; ++c)
                        image(gi * p + di, gj * p + dj, c) = static_cast<T>(patch[idx++]);
        }
    return image;
}

template Tensor<float> PseudoVae::encode<float>(const Tensor<float>&) const;
template Tensor<double> PseudoVae::encode<double>(const Tensor<double>&) const;
template Tensor<float> PseudoVae::decode<float>(const Tensor<float>&, std::size_t, std::size_t) const;
template Tensor<double> PseudoVae::decode<double>(const Tensor<double>&, std::size_t, std::size_t) const;

} // namespace fastfit
