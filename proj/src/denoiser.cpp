#include "fastfit/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

#include "fastfit/graph.hpp"
#include "fastfit/refcache.hpp"

namespace fastfit {

void ModelConfig::validate() const {
    if (width == 0 || heads == 0 || width % heads != 0)
        throw ConfigError("model width " + std::to_string(width) + " must be a positive multiple of heads " +
                          std::to_string(heads));
    if (width % 4 != 0)
        throw ConfigError("model width must be divisible by 4 for the 2-D position code");
    if (blocks < 1)
        throw ConfigError("model needs at least one block");
    if (grid_h == 0 || grid_w == 0)
        throw ConfigError("latent grid must be non-empty");
    if (latent_channels == 0)
        throw ConfigError("latent_channels must be positive");
    if (categories.empty())
        throw ConfigError("category list is empty");
    for (std::size_t i = 0; i < categories.size(); ++i)
        for (std::size_t j = i + 1; j < categories.size(); ++j)
            if (categories[i] == categories[j])
                throw ConfigError("duplicate category name '" + categories[i] + "'");
    if (t_max < 2)
        throw ConfigError("t_max must be at least 2");
}

std::size_t ModelConfig::category_index(const std::string& name) const {
    auto it = std::find(categories.begin(), categories.end(), name);
    if (it == categories.end())
        throw ArgumentError("unknown category '" + name + "'");
    return static_cast<std::size_t>(it - categories.begin());
}

template <typename T>
DenoiserParams<T> DenoiserParams<T>::init(const ModelConfig& config, Rng& rng) {
    config.validate();
    const std::size_t d = config.width;
    const std::size_t e = config.embed_dim();
    const std::size_t cin = config.input_channels();
    const std::size_t dl = config.latent_channels;
    auto uniform = [&](Shape s) { return init_weights<T>(s, rng, InitScheme::UniformFanIn); };
    auto zeros = [&](Shape s) { return init_weights<T>(s, rng, InitScheme::Zeros); };
    auto ones = [&](Shape s) { return init_weights<T>(s, rng, InitScheme::Identity); };

    DenoiserParams p;
    p.config = config;
    p.in_w = uniform({cin, d});
    p.in_b = zeros({d});
    p.time_w1 = uniform({e, e});
    p.time_b1 = zeros({e});
    p.time_w2 = uniform({e, e});
    p.time_b2 = zeros({e});
    if (config.class_embedding) {
        // Unit-scale rows, comparable to the magnitude of γ(t).
        Tensor<T> table({config.categories.size(), e});
        for (auto& v : table.values())
            v = static_cast<T>(rng.uniform(-1.0, 1.0));
        p.class_table = std::move(table);
    }
    for (std::size_t b = 0; b < config.blocks; ++b) {
        BlockParams<T> bp;
        bp.res_norm_gain = ones({d});
        bp.res_norm_bias = zeros({d});
        bp.mod_scale_w = uniform({e, d});
        bp.mod_scale_b = zeros({d});
        bp.mod_shift_w = uniform({e, d});
        bp.mod_shift_b = zeros({d});
        bp.mixer_w = uniform({d, d});
        bp.mixer_b = zeros({d});
        bp.attn_norm_gain = ones({d});
        bp.attn_norm_bias = zeros({d});
        bp.wq = uniform({d, d});
        bp.wk = uniform({d, d});
        bp.wv = uniform({d, d});
        bp.wo = uniform({d, d});
        bp.bo = zeros({d});
        p.blocks.push_back(std::move(bp));
    }
    p.out_norm_gain = ones({d});
    p.out_norm_bias = zeros({d});
    p.out_w = uniform({d, dl});
    p.out_b = zeros({dl});
    return p;
}

template <typename T>
std::size_t DenoiserParams<T>::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
}

template <typename T>
std::uint64_t DenoiserParams<T>::fingerprint() const {
    std::uint64_t h = fnv1a(&config.width, sizeof config.width);
    for_each([&](const std::string& name, const Tensor<T>& t) {
        h = fnv1a(name.data(), name.size(), h);
        h = byte_hash(t, h);
    });
    return h;
}

template <typename T>
template <typename U>
DenoiserParams<U> DenoiserParams<T>::cast() const {
    DenoiserParams<U> out;
    out.config = config;
    out.blocks.resize(blocks.size());
    std::vector<Tensor<U>*> dst;
    out.for_each([&](const std::string&, Tensor<U>& t) { dst.push_back(&t); });
    std::size_t i = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { *dst[i++] = t.template cast<U>(); });
    return out;
}

std::size_t closed_form_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.width;
    const std::size_t e = c.embed_dim();
    const std::size_t dl = c.latent_channels;
    std::size_t n = 0;
    n += c.input_channels() * d + d;            // input projection
    n += 2 * (e * e + e);                       // timestep MLP
    if (c.class_embedding)
        n += c.categories.size() * e;           // class embedding rows
    const std::size_t per_block = 2 * d               // resblock norm
                                  + 2 * (e * d + d)   // scale / shift projections
                                  + d * d + d         // mixer
                                  + 2 * d             // attention norm
                                  + 4 * d * d + d;    // q, k, v, o (+ output bias)
    n += c.blocks * per_block;
    n += 2 * d + d * dl + dl;                   // output norm + projection
    return n;
}

SemiAttentionMask SemiAttentionMask::build(std::vector<std::size_t> segment_lengths) {
    if (segment_lengths.empty())
        throw DimensionError("semi-attention mask needs at least the denoising segment");
    SemiAttentionMask m;
    std::size_t offset = 0;
    for (auto len : segment_lengths) {
        if (len == 0)
            throw DimensionError("semi-attention mask: empty segment");
        m.offsets_.push_back(offset);
        offset += len;
    }
    m.lengths_ = std::move(segment_lengths);
    m.total_ = offset;
    return m;
}

std::size_t SemiAttentionMask::segment_of(std::size_t token) const {
    if (token >= total_)
        throw DimensionError("token " + std::to_string(token) + " outside mask of length " + std::to_string(total_));
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), token);
    return static_cast<std::size_t>(it - offsets_.begin()) - 1;
}

bool SemiAttentionMask::allowed(std::size_t query, std::size_t key) const {
    const std::size_t sq = segment_of(query);
    const std::size_t sk = segment_of(key);
    return sq == 0 || leaky_ || sq == sk;
}

AttentionLayout SemiAttentionMask::layout() const {
    AttentionLayout out;
    out.push_back({0, lengths_[0], 0, total_});
    for (std::size_t s = 1; s < lengths_.size(); ++s) {
        const std::size_t b = offsets_[s];
        const std::size_t e = b + lengths_[s];
        if (leaky_)
            out.push_back({b, e, 0, total_});
        else
            out.push_back({b, e, b, e});
    }
    return out;
}

SemiAttentionMask SemiAttentionMask::leaky() const {
    SemiAttentionMask m = *this;
    m.leaky_ = true;
    return m;
}

template <typename T>
Tensor<T> sinusoid(double position, std::size_t dim, double base) {
    if (dim < 2 || dim % 2 != 0)
        throw DimensionError("sinusoid width must be even and >= 2, got " + std::to_string(dim));
    const std::size_t pairs = dim / 2;
    Tensor<T> out({dim});
    for (std::size_t k = 0; k < pairs; ++k) {
        const double exponent = pairs == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(pairs - 1);
        const double freq = std::pow(base, -exponent);
        out[2 * k] = static_cast<T>(std::sin(position * freq));
        out[2 * k + 1] = static_cast<T>(std::cos(position * freq));
    }
    return out;
}

template <typename T>
Tensor<T> timestep_sinusoid(std::size_t t, std::size_t dim, std::size_t t_max) {
    if (t >= t_max)
        throw ArgumentError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(t_max) + ")");
    return sinusoid<T>(static_cast<double>(t), dim, 10000.0);
}

template <typename T>
const Tensor<T>& grid_position_code(std::size_t grid_h, std::size_t grid_w, std::size_t width) {
    static std::mutex mu;
    static std::map<std::tuple<std::size_t, std::size_t, std::size_t>, Tensor<T>> codes;
    std::lock_guard lock(mu);
    auto key = std::make_tuple(grid_h, grid_w, width);
    auto it = codes.find(key);
    if (it != codes.end())
        return it->second;
    const std::size_t half = width / 2;
    Tensor<T> code({grid_h * grid_w, width});
    for (std::size_t r = 0; r < grid_h; ++r) {
        auto rc = sinusoid<T>(static_cast<double>(r), half, 100.0);
        for (std::size_t c = 0; c < grid_w; ++c) {
            auto cc = sinusoid<T>(static_cast<double>(c), half, 100.0);
            T* row = code.row(r * grid_w + c);
            std::copy(rc.data(), rc.data() + half, row);
            std::copy(cc.data(), cc.data() + half, row + half);
        }
    }
    return codes.emplace(key, std::move(code)).first->second;
}

template <typename T>
Tensor<T> timestep_embed(const DenoiserParams<T>& params, std::size_t t) {
    EagerContext<T> ctx;
    return graph::time_embedding(ctx, params, t);
}

template <typename T>
Tensor<T> class_embed(const DenoiserParams<T>& params, std::size_t category) {
    EagerContext<T> ctx;
    return graph::reference_embedding(ctx, params, category);
}

template <typename T>
Tensor<T> modulated_resblock(const Tensor<T>& x, const Tensor<T>& emb, const BlockParams<T>& block) {
    if (x.rank() != 2 || x.cols() != block.mixer_w.rows())
        throw DimensionError("resblock input " + shape_str(x.shape()) + " vs width " +
                             std::to_string(block.mixer_w.rows()));
    if (emb.cols() != block.mod_scale_w.rows())
        throw DimensionError("resblock embedding " + shape_str(emb.shape()) + " vs embedding width " +
                             std::to_string(block.mod_scale_w.rows()));
    EagerContext<T> ctx;
    return graph::resblock(ctx, block, x, emb.reshaped({1, emb.size()}));
}

template <typename T>
Tensor<T> semi_attention_joint(const Tensor<T>& seq, const SemiAttentionMask& mask, const BlockParams<T>& block,
                               std::size_t heads) {
    if (seq.rank() != 2 || seq.rows() != mask.total())
        throw DimensionError("sequence " + shape_str(seq.shape()) + " vs mask length " + std::to_string(mask.total()));
    EagerContext<T> ctx;
    auto qkv = graph::project_qkv(ctx, block, seq);
    auto a = fastfit::attention(qkv.q, qkv.k, qkv.v, mask.layout(), heads);
    return graph::attention_residual(ctx, block, seq, a);
}

template <typename T>
std::vector<Tensor<T>> semi_attention_probabilities(const Tensor<T>& seq, const SemiAttentionMask& mask,
                                                    const BlockParams<T>& block, std::size_t heads) {
    if (seq.rows() != mask.total())
        throw DimensionError("sequence " + shape_str(seq.shape()) + " vs mask length " + std::to_string(mask.total()));
    EagerContext<T> ctx;
    auto qkv = graph::project_qkv(ctx, block, seq);
    std::vector<Tensor<T>> probs;
    const auto layout = mask.layout();
    fastfit::attention(qkv.q, qkv.k, qkv.v, layout, heads, &probs);
    const std::size_t L = mask.total();
    std::vector<Tensor<T>> dense(heads, Tensor<T>({L, L}));
    std::size_t idx = 0;
    for (const auto& s : layout) {
        for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const auto& p = probs[idx];
            for (std::size_t i = 0; i < p.rows(); ++i)
                for (std::size_t j = 0; j < p.cols(); ++j)
                    dense[h](s.row_begin + i, s.col_begin + j) = p(i, j);
        }
    }
    return dense;
}

template <typename T>
Tensor<T> reference_input(const ReferenceItem<T>& item) {
    const std::size_t n = item.latent.rows();
    const std::size_t dl = item.latent.cols();
    if (item.latent.rank() != 2 || n == 0)
        throw DimensionError("reference latent must be a non-empty token matrix, got " + shape_str(item.latent.shape()));
    if (n != item.grid_h * item.grid_w)
        throw DimensionError("reference latent has " + std::to_string(n) + " tokens, grid is " +
                             std::to_string(item.grid_h) + "x" + std::to_string(item.grid_w));
    Tensor<T> out({n, 2 * dl + 1});
    for (std::size_t i = 0; i < n; ++i) {
        const T* src = item.latent.row(i);
        T* dst = out.row(i);
        std::copy(src, src + dl, dst);
        dst[dl] = T(0);
        std::copy(src, src + dl, dst + dl + 1);
    }
    return out;
}

std::uint64_t& reference_branch_calls() {
    thread_local std::uint64_t calls = 0;
    return calls;
}

template <typename T>
ReferenceFeatures<T> forward_reference_branch(const ReferenceItem<T>& item, const DenoiserParams<T>& params) {
    ++reference_branch_calls();
    EagerContext<T> ctx;
    auto b = graph::reference_branch(ctx, params, item);
    return ReferenceFeatures<T>{std::move(b.features), std::move(b.keys), std::move(b.values)};
}

template <typename T>
Tensor<T> forward_denoise(const Tensor<T>& x_tokens, std::size_t t, std::span<const LayerKV<T>> ref_kv,
                          const DenoiserParams<T>& params) {
    EagerContext<T> ctx;
    return graph::denoise(ctx, params, x_tokens, t, ref_kv);
}

template <typename T>
JointOutput<T> forward_joint(const Tensor<T>& x_tokens, std::size_t t, std::span<const ReferenceItem<T>> items,
                             const DenoiserParams<T>& params, JointAttention kind,
                             const SemiAttentionMask* mask_override) {
    std::vector<std::size_t> lengths{x_tokens.rows()};
    for (const auto& it : items)
        lengths.push_back(it.tokens());
    const auto mask = mask_override ? *mask_override : SemiAttentionMask::build(lengths);
    if (mask.segment_lengths() != lengths)
        throw DimensionError("mask segments do not match the joint sequence");
    const AttentionLayout layout =
        kind == JointAttention::Semi ? mask.layout() : dense_layout(mask.total(), mask.total());
    EagerContext<T> ctx;
    auto j = graph::joint(ctx, params, x_tokens, t, items, layout);
    return JointOutput<T>{std::move(j.eps), lengths, std::move(j.keys), std::move(j.values), std::move(j.features)};
}

#define FASTFIT_INSTANTIATE(T)                                                                                  \
    template struct DenoiserParams<T>;                                                                          \
    template Tensor<T> sinusoid<T>(double, std::size_t, double);                                                \
    template Tensor<T> timestep_sinusoid<T>(std::size_t, std::size_t, std::size_t);                             \
    template const Tensor<T>& grid_position_code<T>(std::size_t, std::size_t, std::size_t);                     \
    template Tensor<T> timestep_embed<T>(const DenoiserParams<T>&, std::size_t);                                \
    template Tensor<T> class_embed<T>(const DenoiserParams<T>&, std::size_t);                                   \
    template Tensor<T> modulated_resblock<T>(const Tensor<T>&, const Tensor<T>&, const BlockParams<T>&);        \
    template Tensor<T> semi_attention_joint<T>(const Tensor<T>&, const SemiAttentionMask&, const BlockParams<T>&, \
                                               std::size_t);                                                    \
    template std::vector<Tensor<T>> semi_attention_probabilities<T>(const Tensor<T>&, const SemiAttentionMask&, \
                                                                    const BlockParams<T>&, std::size_t);        \
    template Tensor<T> reference_input<T>(const ReferenceItem<T>&);                                             \
    template ReferenceFeatures<T> forward_reference_branch<T>(const ReferenceItem<T>&, const DenoiserParams<T>&); \
    template Tensor<T> forward_denoise<T>(const Tensor<T>&, std::size_t, std::span<const LayerKV<T>>,           \
                                          const DenoiserParams<T>&);                                            \
    template JointOutput<T> forward_joint<T>(const Tensor<T>&, std::size_t, std::span<const ReferenceItem<T>>,  \
                                             const DenoiserParams<T>&, JointAttention, const SemiAttentionMask*);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

template DenoiserParams<double> DenoiserParams<float>::cast<double>() const;
template DenoiserParams<float> DenoiserParams<double>::cast<float>() const;
template DenoiserParams<float> DenoiserParams<float>::cast<float>() const;
template DenoiserParams<double> DenoiserParams<double>::cast<double>() const;

} // namespace fastfit
