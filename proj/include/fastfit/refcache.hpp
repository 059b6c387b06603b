#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fastfit/denoiser.hpp"

namespace fastfit {

// Per-layer reference keys/values computed once per request and reused at
// every denoising step. Immutable after construction.
template <typename T>
class ReferenceKVCache {
public:
    ReferenceKVCache() = default;

    const std::vector<LayerKV<T>>& layers() const { return layers_; }
    std::span<const LayerKV<T>> span() const { return layers_; }
    std::size_t layer_count() const { return layers_.size(); }
    std::size_t reference_count() const { return categories_.size(); }
    bool empty() const { return categories_.empty(); }
    // Categories in canonical (category-table) order.
    const std::vector<std::size_t>& categories() const { return categories_; }
    const std::vector<std::size_t>& segment_lengths() const { return segment_lengths_; }
    std::uint64_t fingerprint() const { return fingerprint_; }

    // Hash over every cached byte; equal before and after any read-only use.
    std::uint64_t content_hash() const;

    template <typename U>
    friend ReferenceKVCache<U> precompute_cache(std::span<const ReferenceItem<U>> items,
                                                const DenoiserParams<U>& params);
    template <typename U>
    friend ReferenceKVCache<U> load_cache(const std::string& path);

private:
    std::vector<LayerKV<T>> layers_;
    std::vector<std::size_t> categories_;
    std::vector<std::size_t> segment_lengths_;
    std::uint64_t fingerprint_ = 0;
};

// Sorts references into category-table order; rejects duplicate categories,
// empty latents and unknown categories.
template <typename T>
std::vector<ReferenceItem<T>> canonical_order(std::span<const ReferenceItem<T>> items, std::size_t categories);

// Hash of (params, reference latents, categories) that identifies a cache.
template <typename T>
std::uint64_t cache_fingerprint(std::span<const ReferenceItem<T>> items, const DenoiserParams<T>& params);

template <typename T>
ReferenceKVCache<T> precompute_cache(std::span<const ReferenceItem<T>> items, const DenoiserParams<T>& params);

// K_full = [K_X; K_1; ...; K_K], V_full likewise.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_kv(const Tensor<T>& k_x, const Tensor<T>& v_x, const LayerKV<T>& layer);

// softmax(Q_X K_fullᵀ / sqrt(d_k)) V_full per head. No mask: denoising
// queries may read every key.
template <typename T>
Tensor<T> cached_attention(const Tensor<T>& q_x, const Tensor<T>& k_full, const Tensor<T>& v_full,
                           std::size_t heads);

// Debug dump in the weights-file container (tensor names layer<l>.<category>.k/v).
template <typename T>
void save_cache(const ReferenceKVCache<T>& cache, const ModelConfig& config, const std::string& path);
template <typename T>
ReferenceKVCache<T> load_cache(const std::string& path);

// Reuses one cache across requests whose references hash identically.
template <typename T>
class CacheRegistry {
public:
    // Returns the cached entry for these references or builds and stores it.
    const ReferenceKVCache<T>& get_or_build(std::span<const ReferenceItem<T>> items, const DenoiserParams<T>& params);
    std::size_t size() const { return entries_.size(); }
    std::size_t builds() const { return builds_; }

private:
    std::deque<ReferenceKVCache<T>> entries_;
    std::size_t builds_ = 0;
};

} // namespace fastfit
