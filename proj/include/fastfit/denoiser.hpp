#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fastfit/kernels.hpp"
#include "fastfit/rng.hpp"
#include "fastfit/tensor.hpp"

namespace fastfit {

inline const std::vector<std::string>& default_categories() {
    static const std::vector<std::string> names{"top", "bottom", "dress", "shoes", "bag"};
    return names;
}

struct ModelConfig {
    std::size_t width = 64;           // channels per token; also the embedding width
    std::size_t heads = 4;
    std::size_t blocks = 2;           // (modulated resblock, semi-attention) pairs
    std::size_t grid_h = 16;          // denoising token grid
    std::size_t grid_w = 12;
    std::size_t latent_channels = 12; // per-token latent width
    std::vector<std::string> categories = default_categories();
    std::size_t t_max = 100;
    // Off reproduces the "no class embedding" ablation: references are
    // modulated by a fixed zero vector and the table is absent.
    bool class_embedding = true;

    std::size_t tokens() const { return grid_h * grid_w; }
    std::size_t input_channels() const { return 2 * latent_channels + 1; }
    std::size_t embed_dim() const { return width; }

    void validate() const;
    std::size_t category_index(const std::string& name) const;

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct BlockParams {
    Tensor<T> res_norm_gain, res_norm_bias;
    Tensor<T> mod_scale_w, mod_scale_b, mod_shift_w, mod_shift_b;
    Tensor<T> mixer_w, mixer_b;
    Tensor<T> attn_norm_gain, attn_norm_bias;
    Tensor<T> wq, wk, wv, wo, bo;

    template <typename Self, typename F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + "res_norm_gain", self.res_norm_gain);
        f(prefix + "res_norm_bias", self.res_norm_bias);
        f(prefix + "mod_scale_w", self.mod_scale_w);
        f(prefix + "mod_scale_b", self.mod_scale_b);
        f(prefix + "mod_shift_w", self.mod_shift_w);
        f(prefix + "mod_shift_b", self.mod_shift_b);
        f(prefix + "mixer_w", self.mixer_w);
        f(prefix + "mixer_b", self.mixer_b);
        f(prefix + "attn_norm_gain", self.attn_norm_gain);
        f(prefix + "attn_norm_bias", self.attn_norm_bias);
        f(prefix + "wq", self.wq);
        f(prefix + "wk", self.wk);
        f(prefix + "wv", self.wv);
        f(prefix + "wo", self.wo);
        f(prefix + "bo", self.bo);
    }
};

// All weights of the shared denoiser. Row-major projections: y = x·W + b.
template <typename T>
struct DenoiserParams {
    ModelConfig config;
    Tensor<T> in_w, in_b;
    Tensor<T> time_w1, time_b1, time_w2, time_b2;
    Tensor<T> class_table; // categories × embed_dim; empty when class_embedding is off
    std::vector<BlockParams<T>> blocks;
    Tensor<T> out_norm_gain, out_norm_bias, out_w, out_b;

    static DenoiserParams init(const ModelConfig& config, Rng& rng);

    // Visits (name, tensor) in a fixed order; the order defines the weights-file layout.
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    std::size_t parameter_count() const;
    // Hash of config and every weight byte; identifies the parameter set in cache fingerprints.
    std::uint64_t fingerprint() const;

    template <typename U>
    DenoiserParams<U> cast() const;

private:
    template <typename Self, typename F>
    static void visit(Self& self, F&& f) {
        f(std::string("in_w"), self.in_w);
        f(std::string("in_b"), self.in_b);
        f(std::string("time_w1"), self.time_w1);
        f(std::string("time_b1"), self.time_b1);
        f(std::string("time_w2"), self.time_w2);
        f(std::string("time_b2"), self.time_b2);
        if (self.config.class_embedding)
            f(std::string("class_table"), self.class_table);
        for (std::size_t b = 0; b < self.blocks.size(); ++b)
            BlockParams<T>::visit(self.blocks[b], "block" + std::to_string(b) + ".", f);
        f(std::string("out_norm_gain"), self.out_norm_gain);
        f(std::string("out_norm_bias"), self.out_norm_bias);
        f(std::string("out_w"), self.out_w);
        f(std::string("out_b"), self.out_b);
    }
};

// Parameter count derived from the config alone.
std::size_t closed_form_parameter_count(const ModelConfig& config);

// One encoded reference: a token grid flattened row-major plus its category.
template <typename T>
struct ReferenceItem {
    Tensor<T> latent; // (grid_h·grid_w) × latent_channels
    std::size_t category = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    std::size_t tokens() const { return latent.rows(); }

    template <typename U>
    ReferenceItem<U> cast() const {
        return ReferenceItem<U>{latent.template cast<U>(), category, grid_h, grid_w};
    }
};

// Per-layer key/value blocks of the references, one entry per reference in
// canonical category order.
template <typename T>
struct LayerKV {
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;
};

// Block attention pattern over [X; R_1; ...; R_K]: X rows see every column,
// reference rows see only their own segment.
class SemiAttentionMask {
public:
    static SemiAttentionMask build(std::vector<std::size_t> segment_lengths);

    const std::vector<std::size_t>& segment_lengths() const { return lengths_; }
    std::size_t total() const { return total_; }
    std::size_t segment_of(std::size_t token) const;
    bool allowed(std::size_t query, std::size_t key) const;
    AttentionLayout layout() const;

    // Test hook: a broken mask whose reference rows also see every column.
    SemiAttentionMask leaky() const;
    bool is_leaky() const { return leaky_; }

private:
    std::vector<std::size_t> lengths_;
    std::vector<std::size_t> offsets_;
    std::size_t total_ = 0;
    bool leaky_ = false;
};

inline SemiAttentionMask build_semi_attention_mask(std::vector<std::size_t> segment_lengths) {
    return SemiAttentionMask::build(std::move(segment_lengths));
}

// Sinusoidal code of a scalar position: pairs (sin(p·f_k), cos(p·f_k)) with
// frequencies geometric from 1 down to 1/base over dim/2 pairs.
template <typename T>
Tensor<T> sinusoid(double position, std::size_t dim, double base);

// Pre-projection timestep code (base 10000), shape [dim]. Requires t < t_max.
template <typename T>
Tensor<T> timestep_sinusoid(std::size_t t, std::size_t dim, std::size_t t_max);

// Fixed 2-D positional code for a token grid: first half of the channels
// encodes the row, second half the column. No parameters.
template <typename T>
const Tensor<T>& grid_position_code(std::size_t grid_h, std::size_t grid_w, std::size_t width);

// γ(t): sinusoid followed by a two-layer projection with silu, shape [1×embed_dim].
template <typename T>
Tensor<T> timestep_embed(const DenoiserParams<T>& params, std::size_t t);

// E_i lookup, shape [1×embed_dim]. Independent of any timestep.
template <typename T>
Tensor<T> class_embed(const DenoiserParams<T>& params, std::size_t category);

template <typename T>
Tensor<T> modulated_resblock(const Tensor<T>& x, const Tensor<T>& emb, const BlockParams<T>& block);

// Masked multi-head attention with its pre-norm and residual, over a joint
// sequence of already-embedded tokens.
template <typename T>
Tensor<T> semi_attention_joint(const Tensor<T>& seq, const SemiAttentionMask& mask, const BlockParams<T>& block,
                               std::size_t heads);

// Dense per-head attention probabilities (L×L each) of semi_attention_joint,
// with disallowed positions holding exact zeros.
template <typename T>
std::vector<Tensor<T>> semi_attention_probabilities(const Tensor<T>& seq, const SemiAttentionMask& mask,
                                                    const BlockParams<T>& block, std::size_t heads);

// Reference input rows [R | 0 | R] matching the denoising input contract.
template <typename T>
Tensor<T> reference_input(const ReferenceItem<T>& item);

template <typename T>
struct ReferenceFeatures {
    std::vector<Tensor<T>> features; // residual stream after each attention layer
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;
};

// Time-free reference path conditioned on the item's class embedding.
template <typename T>
ReferenceFeatures<T> forward_reference_branch(const ReferenceItem<T>& item, const DenoiserParams<T>& params);

// Noise prediction for the denoising tokens. ref_kv has one entry per block,
// or is empty for the unconditional branch.
template <typename T>
Tensor<T> forward_denoise(const Tensor<T>& x_tokens, std::size_t t, std::span<const LayerKV<T>> ref_kv,
                          const DenoiserParams<T>& params);

enum class JointAttention { Semi, Full };

template <typename T>
struct JointOutput {
    Tensor<T> eps;
    std::vector<std::size_t> segment_lengths;
    std::vector<Tensor<T>> keys;     // per layer, whole sequence
    std::vector<Tensor<T>> values;   // per layer, whole sequence
    std::vector<Tensor<T>> features; // per layer, whole sequence after attention
};

// Uncached pass over [X; R_1; ...; R_K] (items must be in canonical order).
// Full attention lets references read X, which makes them step-dependent.
template <typename T>
JointOutput<T> forward_joint(const Tensor<T>& x_tokens, std::size_t t, std::span<const ReferenceItem<T>> items,
                             const DenoiserParams<T>& params, JointAttention kind = JointAttention::Semi,
                             const SemiAttentionMask* mask_override = nullptr);

// Count of calls to forward_reference_branch on this thread.
std::uint64_t& reference_branch_calls();

} // namespace fastfit
