#include "fastfit/refcache.hpp"

#include <algorithm>

#include "fastfit/weights_io.hpp"

namespace fastfit {

template <typename T>
std::uint64_t ReferenceKVCache<T>::content_hash() const {
    std::uint64_t h = fnv1a(&fingerprint_, sizeof fingerprint_);
    for (const auto& layer : layers_) {
        for (const auto& k : layer.keys)
            h = byte_hash(k, h);
        for (const auto& v : layer.values)
            h = byte_hash(v, h);
    }
    for (auto c : categories_)
        h = fnv1a(&c, sizeof c, h);
    return h;
}

template <typename T>
std::vector<ReferenceItem<T>> canonical_order(std::span<const ReferenceItem<T>> items, std::size_t categories) {
    std::vector<ReferenceItem<T>> out(items.begin(), items.end());
    for (const auto& it : out) {
        if (it.category >= categories)
            throw ArgumentError("unknown category index " + std::to_string(it.category));
        if (it.latent.empty() || it.latent.rows() == 0)
            throw ArgumentError("reference item has an empty latent");
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.category < b.category; });
    for (std::size_t i = 1; i < out.size(); ++i)
        if (out[i].category == out[i - 1].category)
            throw ArgumentError("duplicate reference category index " + std::to_string(out[i].category));
    return out;
}

template <typename T>
std::uint64_t cache_fingerprint(std::span<const ReferenceItem<T>> items, const DenoiserParams<T>& params) {
    auto sorted = canonical_order(items, params.config.categories.size());
    std::uint64_t h = params.fingerprint();
    for (const auto& it : sorted) {
        h = fnv1a(&it.category, sizeof it.category, h);
        h = fnv1a(&it.grid_h, sizeof it.grid_h, h);
        h = fnv1a(&it.grid_w, sizeof it.grid_w, h);
        h = byte_hash(it.latent, h);
    }
    return h;
}

template <typename T>
ReferenceKVCache<T> precompute_cache(std::span<const ReferenceItem<T>> items, const DenoiserParams<T>& params) {
    auto sorted = canonical_order(items, params.config.categories.size());
    ReferenceKVCache<T> cache;
    cache.fingerprint_ = cache_fingerprint(items, params);
    cache.layers_.resize(params.blocks.size());
    for (const auto& item : sorted) {
        auto branch = forward_reference_branch(item, params);
        for (std::size_t l = 0; l < params.blocks.size(); ++l) {
            cache.layers_[l].keys.push_back(std::move(branch.keys[l]));
            cache.layers_[l].values.push_back(std::move(branch.values[l]));
        }
        cache.categories_.push_back(item.category);
        cache.segment_lengths_.push_back(item.tokens());
    }
    return cache;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_kv(const Tensor<T>& k_x, const Tensor<T>& v_x, const LayerKV<T>& layer) {
    if (layer.keys.size() != layer.values.size())
        throw DimensionError("cache layer has mismatched key/value counts");
    std::vector<const Tensor<T>*> ks{&k_x}, vs{&v_x};
    for (std::size_t i = 0; i < layer.keys.size(); ++i) {
        if (layer.keys[i].cols() != k_x.cols() || layer.values[i].cols() != v_x.cols())
            throw DimensionError("cached K/V width " + std::to_string(layer.keys[i].cols()) +
                                 " does not match dynamic width " + std::to_string(k_x.cols()));
        if (layer.keys[i].rows() != layer.values[i].rows())
            throw DimensionError("cached K and V row counts differ");
        ks.push_back(&layer.keys[i]);
        vs.push_back(&layer.values[i]);
    }
    return {concat_rows<T>(ks), concat_rows<T>(vs)};
}

template <typename T>
Tensor<T> cached_attention(const Tensor<T>& q_x, const Tensor<T>& k_full, const Tensor<T>& v_full,
                           std::size_t heads) {
    return attention(q_x, k_full, v_full, dense_layout(q_x.rows(), k_full.rows()), heads);
}

template <typename T>
void save_cache(const ReferenceKVCache<T>& cache, const ModelConfig& config, const std::string& path) {
    std::vector<NamedTensor> tensors;
    for (std::size_t l = 0; l < cache.layer_count(); ++l) {
        const auto& layer = cache.layers()[l];
        for (std::size_t i = 0; i < layer.keys.size(); ++i) {
            const std::string base =
                "layer" + std::to_string(l) + "." + config.categories.at(cache.categories()[i]) + ".";
            tensors.push_back({base + "k", layer.keys[i].template cast<float>()});
            tensors.push_back({base + "v", layer.values[i].template cast<float>()});
        }
    }
    nlohmann::json meta;
    meta["kind"] = "reference_kv_cache";
    meta["fingerprint"] = cache.fingerprint();
    meta["categories"] = cache.categories();
    meta["segment_lengths"] = cache.segment_lengths();
    meta["layers"] = cache.layer_count();
    write_container(path, meta, tensors);
}

template <typename T>
ReferenceKVCache<T> load_cache(const std::string& path) {
    auto [meta, tensors] = read_container(path);
    if (meta.value("kind", "") != "reference_kv_cache")
        throw IoError(path + ": not a reference cache container");
    ReferenceKVCache<T> cache;
    cache.fingerprint_ = meta.at("fingerprint").get<std::uint64_t>();
    cache.categories_ = meta.at("categories").get<std::vector<std::size_t>>();
    cache.segment_lengths_ = meta.at("segment_lengths").get<std::vector<std::size_t>>();
    const std::size_t layers = meta.at("layers").get<std::size_t>();
    const std::size_t refs = cache.categories_.size();
    if (tensors.size() != 2 * layers * refs)
        throw IoError(path + ": expected " + std::to_string(2 * layers * refs) + " tensors");
    cache.layers_.resize(refs == 0 ? 0 : layers);
    std::size_t idx = 0;
    for (std::size_t l = 0; l < cache.layers_.size(); ++l) {
        for (std::size_t i = 0; i < refs; ++i) {
            cache.layers_[l].keys.push_back(tensors[idx++].value.template cast<T>());
            cache.layers_[l].values.push_back(tensors[idx++].value.template cast<T>());
        }
    }
    return cache;
}

template <typename T>
const ReferenceKVCache<T>& CacheRegistry<T>::get_or_build(std::span<const ReferenceItem<T>> items,
                                                          const DenoiserParams<T>& params) {
    const std::uint64_t fp = cache_fingerprint(items, params);
    for (const auto& c : entries_)
        if (c.fingerprint() == fp)
            return c;
    ++builds_;
    entries_.push_back(precompute_cache(items, params));
    return entries_.back();
}

#define FASTFIT_INSTANTIATE(T)                                                                                 \
    template class ReferenceKVCache<T>;                                                                        \
    template class CacheRegistry<T>;                                                                           \
    template std::vector<ReferenceItem<T>> canonical_order<T>(std::span<const ReferenceItem<T>>, std::size_t); \
    template std::uint64_t cache_fingerprint<T>(std::span<const ReferenceItem<T>>, const DenoiserParams<T>&);  \
    template ReferenceKVCache<T> precompute_cache<T>(std::span<const ReferenceItem<T>>, const DenoiserParams<T>&); \
    template std::pair<Tensor<T>, Tensor<T>> concat_kv<T>(const Tensor<T>&, const Tensor<T>&, const LayerKV<T>&); \
    template Tensor<T> cached_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);  \
    template void save_cache<T>(const ReferenceKVCache<T>&, const ModelConfig&, const std::string&);           \
    template ReferenceKVCache<T> load_cache<T>(const std::string&);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

} // namespace fastfit
