#pragma once

// One definition of the denoiser forward pass, evaluated either eagerly on
// tensors (inference) or by recording onto an autodiff tape (training,
// gradient checks). Both contexts expose the same operation set.

#include <map>
#include <span>
#include <vector>

#include "fastfit/autodiff.hpp"
#include "fastfit/denoiser.hpp"
#include "fastfit/kernels.hpp"
#include "fastfit/refcache.hpp"

namespace fastfit {

template <typename T>
class EagerContext {
public:
    using Value = Tensor<T>;

    const Tensor<T>& param(const Tensor<T>& p) { return p; }
    Tensor<T> constant(Tensor<T> t) { return t; }

    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) { return fastfit::matmul(a, b); }
    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return fastfit::add(a, b); }
    Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& r) { return fastfit::add_row(a, r); }
    Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& b) {
        return fastfit::scale_shift(x, s, b);
    }
    Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b) {
        return fastfit::layer_norm(x, g, b);
    }
    Tensor<T> silu(const Tensor<T>& x) { return fastfit::silu(x); }
    Tensor<T> slice_rows(const Tensor<T>& x, std::size_t b, std::size_t e) { return fastfit::slice_rows(x, b, e); }
    Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
        std::vector<const Tensor<T>*> ptrs;
        for (const auto& p : parts)
            ptrs.push_back(&p);
        return fastfit::concat_rows<T>(ptrs);
    }
    Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionLayout& layout,
                        std::size_t heads) {
        return fastfit::attention(q, k, v, layout, heads);
    }
    // refs is empty for the unconditional branch, else one LayerKV per block.
    Tensor<T> cached_attention(const Tensor<T>& q, const Tensor<T>& k_x, const Tensor<T>& v_x,
                               std::span<const LayerKV<T>> refs, std::size_t layer, std::size_t heads) {
        if (refs.empty())
            return fastfit::cached_attention(q, k_x, v_x, heads);
        auto [k_full, v_full] = concat_kv(k_x, v_x, refs[layer]);
        return fastfit::cached_attention(q, k_full, v_full, heads);
    }
};

// Reference K/V as tape nodes, indexed [layer][reference].
struct TapeRefs {
    std::vector<std::vector<NodeId>> keys;
    std::vector<std::vector<NodeId>> values;

    std::size_t size() const { return keys.size(); }
    bool empty() const { return keys.empty(); }
};

template <typename T>
class TapeContext {
public:
    using Value = NodeId;

    explicit TapeContext(Tape<T>& tape) : tape_(tape) {}

    // Parameters become trainable leaves, one per distinct tensor.
    NodeId param(const Tensor<T>& p) {
        auto it = leaves_.find(&p);
        if (it != leaves_.end())
            return it->second;
        NodeId id = tape_.leaf(p, true);
        leaves_.emplace(&p, id);
        return id;
    }
    NodeId constant(Tensor<T> t) { return tape_.leaf(std::move(t), false); }

    NodeId matmul(NodeId a, NodeId b) { return tape_.matmul(a, b); }
    NodeId add(NodeId a, NodeId b) { return tape_.add(a, b); }
    NodeId add_row(NodeId a, NodeId r) { return tape_.add_row(a, r); }
    NodeId scale_shift(NodeId x, NodeId s, NodeId b) { return tape_.scale_shift(x, s, b); }
    NodeId layer_norm(NodeId x, NodeId g, NodeId b) { return tape_.layer_norm(x, g, b); }
    NodeId silu(NodeId x) { return tape_.silu(x); }
    NodeId slice_rows(NodeId x, std::size_t b, std::size_t e) { return tape_.slice_rows(x, b, e); }
    NodeId concat_rows(const std::vector<NodeId>& parts) { return tape_.concat_rows(parts); }
    NodeId attention(NodeId q, NodeId k, NodeId v, const AttentionLayout& layout, std::size_t heads) {
        return tape_.attention(q, k, v, layout, heads);
    }
    NodeId cached_attention(NodeId q, NodeId k_x, NodeId v_x, const TapeRefs& refs, std::size_t layer,
                            std::size_t heads) {
        NodeId k_full = k_x, v_full = v_x;
        if (!refs.empty() && !refs.keys[layer].empty()) {
            std::vector<NodeId> ks{k_x}, vs{v_x};
            ks.insert(ks.end(), refs.keys[layer].begin(), refs.keys[layer].end());
            vs.insert(vs.end(), refs.values[layer].begin(), refs.values[layer].end());
            k_full = tape_.concat_rows(ks);
            v_full = tape_.concat_rows(vs);
        }
        const std::size_t nq = tape_.value(q).rows();
        const std::size_t nk = tape_.value(k_full).rows();
        return tape_.attention(q, k_full, v_full, dense_layout(nq, nk), heads);
    }

    Tape<T>& tape() { return tape_; }
    // Leaf id of a parameter tensor, if the graph used it.
    const NodeId* leaf_of(const Tensor<T>& p) const {
        auto it = leaves_.find(&p);
        return it == leaves_.end() ? nullptr : &it->second;
    }

private:
    Tape<T>& tape_;
    std::map<const Tensor<T>*, NodeId> leaves_;
};

namespace graph {

template <class Ctx, typename T>
typename Ctx::Value time_embedding(Ctx& ctx, const DenoiserParams<T>& p, std::size_t t) {
    const std::size_t e = p.config.embed_dim();
    auto s = ctx.constant(timestep_sinusoid<T>(t, e, p.config.t_max).reshaped({1, e}));
    auto h = ctx.silu(ctx.add_row(ctx.matmul(s, ctx.param(p.time_w1)), ctx.param(p.time_b1)));
    return ctx.add_row(ctx.matmul(h, ctx.param(p.time_w2)), ctx.param(p.time_b2));
}

template <class Ctx, typename T>
typename Ctx::Value reference_embedding(Ctx& ctx, const DenoiserParams<T>& p, std::size_t category) {
    if (category >= p.config.categories.size())
        throw ArgumentError("unknown category index " + std::to_string(category));
    if (!p.config.class_embedding)
        return ctx.constant(Tensor<T>({1, p.config.embed_dim()}));
    return ctx.slice_rows(ctx.param(p.class_table), category, category + 1);
}

template <class Ctx, typename T>
typename Ctx::Value embed_tokens(Ctx& ctx, const DenoiserParams<T>& p, const Tensor<T>& tokens, std::size_t grid_h,
                                 std::size_t grid_w) {
    if (tokens.rank() != 2 || tokens.cols() != p.config.input_channels() || tokens.rows() != grid_h * grid_w)
        throw DimensionError("token input " + shape_str(tokens.shape()) + " does not match a " +
                             std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid with " +
                             std::to_string(p.config.input_channels()) + " channels");
    auto x = ctx.constant(tokens);
    auto h = ctx.add_row(ctx.matmul(x, ctx.param(p.in_w)), ctx.param(p.in_b));
    return ctx.add(h, ctx.constant(grid_position_code<T>(grid_h, grid_w, p.config.width)));
}

// x + mixer(silu(norm(x)) ⊙ (1 + scale(emb)) + shift(emb))
template <class Ctx, typename T>
typename Ctx::Value resblock(Ctx& ctx, const BlockParams<T>& b, const typename Ctx::Value& x,
                             const typename Ctx::Value& emb) {
    auto h = ctx.silu(ctx.layer_norm(x, ctx.param(b.res_norm_gain), ctx.param(b.res_norm_bias)));
    auto s = ctx.add_row(ctx.matmul(emb, ctx.param(b.mod_scale_w)), ctx.param(b.mod_scale_b));
    auto sh = ctx.add_row(ctx.matmul(emb, ctx.param(b.mod_shift_w)), ctx.param(b.mod_shift_b));
    h = ctx.scale_shift(h, s, sh);
    h = ctx.add_row(ctx.matmul(h, ctx.param(b.mixer_w)), ctx.param(b.mixer_b));
    return ctx.add(x, h);
}

template <typename V>
struct Projections {
    V q, k, v;
};

template <class Ctx, typename T>
Projections<typename Ctx::Value> project_qkv(Ctx& ctx, const BlockParams<T>& b, const typename Ctx::Value& x) {
    auto h = ctx.layer_norm(x, ctx.param(b.attn_norm_gain), ctx.param(b.attn_norm_bias));
    return {ctx.matmul(h, ctx.param(b.wq)), ctx.matmul(h, ctx.param(b.wk)), ctx.matmul(h, ctx.param(b.wv))};
}

template <class Ctx, typename T>
typename Ctx::Value attention_residual(Ctx& ctx, const BlockParams<T>& b, const typename Ctx::Value& x,
                                       const typename Ctx::Value& attended) {
    return ctx.add(x, ctx.add_row(ctx.matmul(attended, ctx.param(b.wo)), ctx.param(b.bo)));
}

template <class Ctx, typename T>
typename Ctx::Value output_head(Ctx& ctx, const DenoiserParams<T>& p, const typename Ctx::Value& h) {
    auto n = ctx.layer_norm(h, ctx.param(p.out_norm_gain), ctx.param(p.out_norm_bias));
    return ctx.add_row(ctx.matmul(n, ctx.param(p.out_w)), ctx.param(p.out_b));
}

template <typename V>
struct BranchValues {
    std::vector<V> features;
    std::vector<V> keys;
    std::vector<V> values;
};

template <class Ctx, typename T>
BranchValues<typename Ctx::Value> reference_branch(Ctx& ctx, const DenoiserParams<T>& p,
                                                   const ReferenceItem<T>& item) {
    BranchValues<typename Ctx::Value> out;
    auto emb = reference_embedding(ctx, p, item.category);
    auto h = embed_tokens(ctx, p, reference_input(item), item.grid_h, item.grid_w);
    const std::size_t n = item.tokens();
    for (const auto& b : p.blocks) {
        h = resblock(ctx, b, h, emb);
        auto qkv = project_qkv(ctx, b, h);
        auto a = ctx.attention(qkv.q, qkv.k, qkv.v, dense_layout(n, n), p.config.heads);
        h = attention_residual(ctx, b, h, a);
        out.keys.push_back(qkv.k);
        out.values.push_back(qkv.v);
        out.features.push_back(h);
    }
    return out;
}

// refs is either empty (unconditional) or holds one K/V entry per block.
template <class Ctx, typename T, class Refs>
typename Ctx::Value denoise(Ctx& ctx, const DenoiserParams<T>& p, const Tensor<T>& x_tokens, std::size_t t,
                            const Refs& refs) {
    if (!refs.empty() && refs.size() != p.blocks.size())
        throw DimensionError("reference K/V has " + std::to_string(refs.size()) + " layers, model has " +
                             std::to_string(p.blocks.size()));
    auto emb = time_embedding(ctx, p, t);
    auto h = embed_tokens(ctx, p, x_tokens, p.config.grid_h, p.config.grid_w);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const auto& b = p.blocks[l];
        h = resblock(ctx, b, h, emb);
        auto qkv = project_qkv(ctx, b, h);
        auto a = ctx.cached_attention(qkv.q, qkv.k, qkv.v, refs, l, p.config.heads);
        h = attention_residual(ctx, b, h, a);
    }
    return output_head(ctx, p, h);
}

template <typename V>
struct JointValues {
    V eps;
    std::vector<V> keys;
    std::vector<V> values;
    std::vector<V> features;
};

template <class Ctx, typename T>
JointValues<typename Ctx::Value> joint(Ctx& ctx, const DenoiserParams<T>& p, const Tensor<T>& x_tokens,
                                       std::size_t t, std::span<const ReferenceItem<T>> items,
                                       const AttentionLayout& layout) {
    using V = typename Ctx::Value;
    JointValues<V> out;
    std::vector<V> segments;
    std::vector<V> embs;
    std::vector<std::size_t> lengths;
    embs.push_back(time_embedding(ctx, p, t));
    segments.push_back(embed_tokens(ctx, p, x_tokens, p.config.grid_h, p.config.grid_w));
    lengths.push_back(x_tokens.rows());
    for (const auto& item : items) {
        embs.push_back(reference_embedding(ctx, p, item.category));
        segments.push_back(embed_tokens(ctx, p, reference_input(item), item.grid_h, item.grid_w));
        lengths.push_back(item.tokens());
    }
    for (const auto& b : p.blocks) {
        for (std::size_t s = 0; s < segments.size(); ++s)
            segments[s] = resblock(ctx, b, segments[s], embs[s]);
        auto seq = segments.size() == 1 ? segments[0] : ctx.concat_rows(segments);
        auto qkv = project_qkv(ctx, b, seq);
        auto a = ctx.attention(qkv.q, qkv.k, qkv.v, layout, p.config.heads);
        seq = attention_residual(ctx, b, seq, a);
        out.keys.push_back(qkv.k);
        out.values.push_back(qkv.v);
        out.features.push_back(seq);
        std::size_t row = 0;
        for (std::size_t s = 0; s < segments.size(); ++s) {
            segments[s] = segments.size() == 1 ? seq : ctx.slice_rows(seq, row, row + lengths[s]);
            row += lengths[s];
        }
    }
    out.eps = output_head(ctx, p, segments[0]);
    return out;
}

} // namespace graph
} // namespace fastfit
