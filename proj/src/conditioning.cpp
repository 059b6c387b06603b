#include "fastfit/conditioning.hpp"

#include <algorithm>
#include <cmath>

namespace fastfit {

namespace {

void draw_line(PoseRaster& pose, double r0, double c0, double r1, double c1) {
    const std::size_t H = pose.present.dim(0), W = pose.present.dim(1), C = pose.pixels.dim(2);
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(r1 - r0), std::abs(c1 - c0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
        const double a = static_cast<double>(s) / steps;
        const auto r = static_cast<long>(std::lround(r0 + a * (r1 - r0)));
        const auto c = static_cast<long>(std::lround(c0 + a * (c1 - c0)));
        if (r < 0 || c < 0 || r >= static_cast<long>(H) || c >= static_cast<long>(W))
            continue;
        pose.present(r, c) = 1.0;
        for (std::size_t ch = 0; ch < C; ++ch)
            pose.pixels(r, c, ch) = ch % 2 == 0 ? 1.0 : -1.0;
    }
}

} // namespace

PoseRaster make_pose_raster(std::size_t height, std::size_t width, std::size_t channels) {
    PoseRaster pose{Tensor<double>({height, width, channels}), Tensor<double>({height, width})};
    const double h = static_cast<double>(height - 1), w = static_cast<double>(width - 1);
    const double mid = w / 2;
    draw_line(pose, 0.10 * h, mid, 0.55 * h, mid);             // spine
    draw_line(pose, 0.20 * h, 0.20 * w, 0.20 * h, 0.80 * w);   // shoulders
    draw_line(pose, 0.20 * h, 0.20 * w, 0.45 * h, 0.10 * w);   // arms
    draw_line(pose, 0.20 * h, 0.80 * w, 0.45 * h, 0.90 * w);
    draw_line(pose, 0.55 * h, mid, 0.95 * h, 0.30 * w);        // legs
    draw_line(pose, 0.55 * h, mid, 0.95 * h, 0.70 * w);
    return pose;
}

template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t factor) {
    if (mask.rank() != 2)
        throw DimensionError("mask must be H×W, got " + shape_str(mask.shape()));
    const std::size_t H = mask.dim(0), W = mask.dim(1);
    if (factor == 0 || H % factor != 0 || W % factor != 0)
        throw DimensionError("mask " + shape_str(mask.shape()) + " is not divisible by " + std::to_string(factor));
    const std::size_t gh = H / factor, gw = W / factor;
    Tensor<T> out({gh * gw, 1});
    const T inv = T(1) / static_cast<T>(factor * factor);
    for (std::size_t gi = 0; gi < gh; ++gi)
        for (std::size_t gj = 0; gj < gw; ++gj) {
            T acc = 0;
            for (std::size_t di = 0; di < factor; ++di)
                for (std::size_t dj = 0; dj < factor; ++dj)
                    acc += mask(gi * factor + di, gj * factor + dj);
            out(gi * gw + gj, 0) = acc * inv;
        }
    return out;
}

template <typename T>
PersonCondition<T> assemble_person_condition(const Tensor<T>& person_latent, const Tensor<T>& mask_fullres,
                                             const PoseRaster& pose, const PseudoVae& vae, std::size_t grid_h,
                                             std::size_t grid_w) {
    const std::size_t H = grid_h * vae.patch(), W = grid_w * vae.patch();
    if (mask_fullres.rank() != 2 || mask_fullres.dim(0) != H || mask_fullres.dim(1) != W)
        throw DimensionError("mask " + shape_str(mask_fullres.shape()) + " does not match the " + std::to_string(H) +
                             "x" + std::to_string(W) + " image");
    if (pose.present.dim(0) != H || pose.present.dim(1) != W || pose.pixels.dim(2) != vae.channels())
        throw DimensionError("pose raster does not match the image");
    for (T m : mask_fullres.values())
        if (!(m >= T(0) && m <= T(1)))
            throw ArgumentError("mask values must lie in [0, 1]");

    Tensor<T> image = vae.decode(person_latent, grid_h, grid_w);
    const std::size_t C = vae.channels();
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            const T keep = T(1) - mask_fullres(r, c);
            const bool drawn = pose.present(r, c) != 0.0;
            for (std::size_t ch = 0; ch < C; ++ch)
                image(r, c, ch) = drawn ? static_cast<T>(pose.pixels(r, c, ch)) : image(r, c, ch) * keep;
        }
    return {downsample_mask(mask_fullres, vae.patch()), vae.encode(image)};
}

template <typename T>
Tensor<T> denoiser_input(const Tensor<T>& z_t, const PersonCondition<T>& person) {
    const std::size_t n = z_t.rows(), d = z_t.cols();
    if (person.mask.rows() != n || person.mask.cols() != 1 || person.composite.rows() != n ||
        person.composite.cols() != d)
        throw DimensionError("person condition does not match latent " + shape_str(z_t.shape()));
    Tensor<T> out({n, 2 * d + 1});
    for (std::size_t i = 0; i < n; ++i) {
        T* row = out.row(i);
        std::copy_n(z_t.row(i), d, row);
        row[d] = person.mask(i, 0);
        std::copy_n(person.composite.row(i), d, row + d + 1);
    }
    return out;
}

template <typename T>
std::vector<ReferenceItem<T>> encode_references(std::span<const ReferenceImage<T>> images, const PseudoVae& vae,
                                                std::size_t categories) {
    if (images.size() > categories)
        throw ArgumentError("at most " + std::to_string(categories) + " references per request");
    std::vector<bool> seen(categories, false);
    std::vector<ReferenceItem<T>> items;
    for (const auto& ref : images) {
        if (ref.category >= categories)
            throw ArgumentError("unknown category index " + std::to_string(ref.category));
        if (seen[ref.category])
            throw ArgumentError("duplicate reference category index " + std::to_string(ref.category));
        seen[ref.category] = true;
        if (ref.image.rank() != 3)
            throw DimensionError("reference image must be H×W×c");
        items.push_back({vae.encode(ref.image), ref.category, ref.image.dim(0) / vae.patch(),
                         ref.image.dim(1) / vae.patch()});
    }
    return items;
}

#define FASTFIT_INSTANTIATE(T)                                                                                     \
    template Tensor<T> downsample_mask<T>(const Tensor<T>&, std::size_t);                                          \
    template PersonCondition<T> assemble_person_condition<T>(const Tensor<T>&, const Tensor<T>&, const PoseRaster&, \
                                                             const PseudoVae&, std::size_t, std::size_t);          \
    template Tensor<T> denoiser_input<T>(const Tensor<T>&, const PersonCondition<T>&);                             \
    template std::vector<ReferenceItem<T>> encode_references<T>(std::span<const ReferenceImage<T>>,               \
                                                                const PseudoVae&, std::size_t);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

} // namespace fastfit
