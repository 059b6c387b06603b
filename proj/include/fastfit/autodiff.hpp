#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fastfit/kernels.hpp"
#include "fastfit/rng.hpp"
#include "fastfit/tensor.hpp"

namespace fastfit {

enum class Primitive : std::uint8_t {
    Leaf,
    MatMul,
    Add,
    AddRow,
    ScaleShift,
    Softmax,
    LayerNorm,
    Silu,
    Attention,
    ConcatRows,
    SliceRows,
    MeanSquaredError,
    Sum,
    Scale,
};

const char* primitive_name(Primitive op);

struct NodeId {
    std::uint32_t index = 0;
    auto operator<=>(const NodeId&) const = default;
};

// Non-tensor arguments of a primitive. Only the fields the primitive reads matter.
struct OpAttrs {
    std::size_t heads = 0;        // Attention
    AttentionLayout layout;       // Attention
    std::size_t begin = 0;        // SliceRows
    std::size_t end = 0;          // SliceRows
    double factor = 1.0;          // Scale
};

template <typename T>
class Gradients {
public:
    Gradients() = default;
    explicit Gradients(std::size_t nodes) : grads_(nodes) {}

    bool has(NodeId id) const { return id.index < grads_.size() && !grads_[id.index].empty(); }
    // Gradient of the loss w.r.t. the node, or nullptr if the loss does not depend on it.
    const Tensor<T>* find(NodeId id) const { return has(id) ? &grads_[id.index] : nullptr; }
    const Tensor<T>& at(NodeId id) const;

    std::vector<Tensor<T>>& raw() { return grads_; }

private:
    std::vector<Tensor<T>> grads_;
};

// Append-only record of primitive applications. Append order is a topological
// order, so backward is a single reverse sweep that visits each node once.
template <typename T>
class Tape {
public:
    NodeId leaf(Tensor<T> value, bool trainable = true);

    NodeId record(Primitive op, std::span<const NodeId> inputs, const OpAttrs& attrs = {});
    NodeId record(Primitive op, std::initializer_list<NodeId> inputs, const OpAttrs& attrs = {}) {
        return record(op, std::span<const NodeId>(inputs.begin(), inputs.size()), attrs);
    }

    NodeId matmul(NodeId a, NodeId b) { return record(Primitive::MatMul, {a, b}); }
    NodeId add(NodeId a, NodeId b) { return record(Primitive::Add, {a, b}); }
    NodeId add_row(NodeId a, NodeId row) { return record(Primitive::AddRow, {a, row}); }
    NodeId scale_shift(NodeId x, NodeId s, NodeId b) { return record(Primitive::ScaleShift, {x, s, b}); }
    NodeId softmax_rows(NodeId x) { return record(Primitive::Softmax, {x}); }
    NodeId layer_norm(NodeId x, NodeId g, NodeId b) { return record(Primitive::LayerNorm, {x, g, b}); }
    NodeId silu(NodeId x) { return record(Primitive::Silu, {x}); }
    NodeId attention(NodeId q, NodeId k, NodeId v, AttentionLayout layout, std::size_t heads);
    NodeId concat_rows(std::span<const NodeId> parts) { return record(Primitive::ConcatRows, parts); }
    NodeId slice_rows(NodeId x, std::size_t begin, std::size_t end);
    NodeId mse(NodeId a, NodeId b) { return record(Primitive::MeanSquaredError, {a, b}); }
    NodeId sum(NodeId x) { return record(Primitive::Sum, {x}); }
    NodeId scale(NodeId x, double factor);

    const Tensor<T>& value(NodeId id) const { return nodes_.at(id.index).value; }
    Primitive op(NodeId id) const { return nodes_.at(id.index).op; }
    std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id.index).inputs; }
    std::size_t size() const { return nodes_.size(); }

    // Replace a leaf's value; call replay() to refresh dependent values.
    void set_leaf_value(NodeId id, Tensor<T> value);
    // Recompute every non-leaf node from the current leaf values, in append order.
    void replay();

    // Reverse sweep from a scalar loss node. Does not modify the tape.
    Gradients<T> backward(NodeId loss) const;

private:
    struct Node {
        Primitive op = Primitive::Leaf;
        std::vector<NodeId> inputs;
        OpAttrs attrs;
        Tensor<T> value;
        std::vector<Tensor<T>> saved; // softmax probabilities for Attention
        LayerNormStats<T> ln;         // LayerNorm
        bool needs_grad = false;
    };

    void forward(Node& node) const;
    void check_arity(Primitive op, std::size_t n) const;

    std::vector<Node> nodes_;
};

struct ParamGradError {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_fd = 0.0; // largest |finite-difference gradient| among sampled coords
    std::size_t coords_checked = 0;
};

struct GradReport {
    std::vector<ParamGradError> params;
    double step = 0.0;

    double max_rel_error() const;
};

inline double relative_error(double analytic, double numeric) {
    double denom = std::abs(analytic) + std::abs(numeric);
    return std::abs(analytic - numeric) / (denom > 1e-8 ? denom : 1e-8);
}

// Named view of a parameter tensor and its analytic gradient.
struct CheckedParam {
    std::string name;
    Tensor<double>* value = nullptr;
    const Tensor<double>* analytic = nullptr;
};

// Central-difference gradient estimates on a seeded subsample of each
// tensor's coordinates (all coordinates when the tensor has fewer than
// min_coords). Each estimate is Ridders' extrapolation of central differences
// starting at h = step. Parameters are restored after each probe.
GradReport finite_diff_check(const std::function<double()>& f, std::span<const CheckedParam> params,
                             double step, Rng& rng, std::size_t min_coords = 64);

} // namespace fastfit
