#include "fastfit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

namespace fastfit {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstView = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using View = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void accumulate(std::vector<Tensor<T>>& grads, NodeId id, const Tensor<T>& g) {
    auto& slot = grads[id.index];
    if (slot.empty()) {
        slot = g;
        return;
    }
    for (std::size_t i = 0; i < slot.size(); ++i)
        slot[i] += g[i];
}

// Column sums of g, shaped like `like` (a broadcast row of g.cols() elements).
template <typename T>
Tensor<T> column_sums(const Tensor<T>& g, const Tensor<T>& like) {
    Tensor<T> out(like.shape());
    for (std::size_t i = 0; i < g.rows(); ++i) {
        const T* r = g.row(i);
        for (std::size_t j = 0; j < g.cols(); ++j)
            out[j] += r[j];
    }
    return out;
}

} // namespace

const char* primitive_name(Primitive op) {
    switch (op) {
    case Primitive::Leaf: return "leaf";
    case Primitive::MatMul: return "matmul";
    case Primitive::Add: return "add";
    case Primitive::AddRow: return "add_row";
    case Primitive::ScaleShift: return "scale_shift";
    case Primitive::Softmax: return "softmax_rows";
    case Primitive::LayerNorm: return "layer_norm";
    case Primitive::Silu: return "silu";
    case Primitive::Attention: return "attention";
    case Primitive::ConcatRows: return "concat_rows";
    case Primitive::SliceRows: return "slice_rows";
    case Primitive::MeanSquaredError: return "mse";
    case Primitive::Sum: return "sum";
    case Primitive::Scale: return "scale";
    }
    return "unknown";
}

template <typename T>
const Tensor<T>& Gradients<T>::at(NodeId id) const {
    if (!has(id))
        throw ArgumentError("no gradient recorded for node " + std::to_string(id.index));
    return grads_[id.index];
}

template <typename T>
NodeId Tape<T>::leaf(Tensor<T> value, bool trainable) {
    Node n;
    n.op = Primitive::Leaf;
    n.value = std::move(value);
    n.needs_grad = trainable;
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::check_arity(Primitive op, std::size_t n) const {
    std::size_t want = 0;
    switch (op) {
    case Primitive::Softmax:
    case Primitive::Silu:
    case Primitive::SliceRows:
    case Primitive::Sum:
    case Primitive::Scale:
        want = 1;
        break;
    case Primitive::MatMul:
    case Primitive::Add:
    case Primitive::AddRow:
    case Primitive::MeanSquaredError:
        want = 2;
        break;
    case Primitive::ScaleShift:
    case Primitive::LayerNorm:
    case Primitive::Attention:
        want = 3;
        break;
    case Primitive::ConcatRows:
        if (n == 0)
            throw DimensionError("concat_rows: no inputs");
        return;
    default:
        throw ArgumentError("unknown primitive id " + std::to_string(static_cast<int>(op)));
    }
    if (n != want)
        throw ArgumentError(std::string(primitive_name(op)) + " takes " + std::to_string(want) +
                            " inputs, got " + std::to_string(n));
}

template <typename T>
NodeId Tape<T>::record(Primitive op, std::span<const NodeId> inputs, const OpAttrs& attrs) {
    check_arity(op, inputs.size());
    Node n;
    n.op = op;
    n.attrs = attrs;
    for (auto id : inputs) {
        if (id.index >= nodes_.size())
            throw ArgumentError("input node " + std::to_string(id.index) + " is not on the tape");
        n.needs_grad = n.needs_grad || nodes_[id.index].needs_grad;
    }
    n.inputs.assign(inputs.begin(), inputs.end());
    forward(n);
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
NodeId Tape<T>::attention(NodeId q, NodeId k, NodeId v, AttentionLayout layout, std::size_t heads) {
    OpAttrs a;
    a.heads = heads;
    a.layout = std::move(layout);
    return record(Primitive::Attention, {q, k, v}, a);
}

template <typename T>
NodeId Tape<T>::slice_rows(NodeId x, std::size_t begin, std::size_t end) {
    OpAttrs a;
    a.begin = begin;
    a.end = end;
    return record(Primitive::SliceRows, {x}, a);
}

template <typename T>
NodeId Tape<T>::scale(NodeId x, double factor) {
    OpAttrs a;
    a.factor = factor;
    return record(Primitive::Scale, {x}, a);
}

template <typename T>
void Tape<T>::forward(Node& n) const {
    auto in = [&](std::size_t i) -> const Tensor<T>& { return nodes_[n.inputs[i].index].value; };
    switch (n.op) {
    case Primitive::Leaf:
        return;
    case Primitive::MatMul:
        n.value = fastfit::matmul(in(0), in(1));
        return;
    case Primitive::Add:
        n.value = fastfit::add(in(0), in(1));
        return;
    case Primitive::AddRow:
        n.value = fastfit::add_row(in(0), in(1));
        return;
    case Primitive::ScaleShift:
        n.value = fastfit::scale_shift(in(0), in(1), in(2));
        return;
    case Primitive::Softmax:
        n.value = fastfit::softmax_rows(in(0));
        return;
    case Primitive::LayerNorm:
        n.value = fastfit::layer_norm(in(0), in(1), in(2), &n.ln);
        return;
    case Primitive::Silu:
        n.value = fastfit::silu(in(0));
        return;
    case Primitive::Attention:
        n.value = fastfit::attention(in(0), in(1), in(2), n.attrs.layout, n.attrs.heads, &n.saved);
        return;
    case Primitive::ConcatRows: {
        std::vector<const Tensor<T>*> parts;
        for (std::size_t i = 0; i < n.inputs.size(); ++i)
            parts.push_back(&in(i));
        n.value = fastfit::concat_rows<T>(parts);
        return;
    }
    case Primitive::SliceRows:
        n.value = fastfit::slice_rows(in(0), n.attrs.begin, n.attrs.end);
        return;
    case Primitive::MeanSquaredError:
        n.value = Tensor<T>({1}, {fastfit::mean_squared_error(in(0), in(1))});
        return;
    case Primitive::Sum:
        n.value = Tensor<T>({1}, {fastfit::sum(in(0))});
        return;
    case Primitive::Scale:
        n.value = fastfit::scale(in(0), static_cast<T>(n.attrs.factor));
        return;
    }
    throw ArgumentError("unknown primitive id " + std::to_string(static_cast<int>(n.op)));
}

template <typename T>
void Tape<T>::set_leaf_value(NodeId id, Tensor<T> value) {
    auto& n = nodes_.at(id.index);
    if (n.op != Primitive::Leaf)
        throw ArgumentError("node " + std::to_string(id.index) + " is not a leaf");
    if (n.value.shape() != value.shape())
        throw DimensionError("set_leaf_value: shape " + shape_str(value.shape()) + " vs " +
                             shape_str(n.value.shape()));
    n.value = std::move(value);
}

template <typename T>
void Tape<T>::replay() {
    for (auto& n : nodes_)
        forward(n);
}

template <typename T>
Gradients<T> Tape<T>::backward(NodeId loss) const {
    if (loss.index >= nodes_.size())
        throw ArgumentError("loss node is not on the tape");
    if (nodes_[loss.index].value.size() != 1)
        throw DimensionError("backward: loss must be scalar, got shape " +
                             shape_str(nodes_[loss.index].value.shape()));
    Gradients<T> result(nodes_.size());
    auto& grads = result.raw();
    grads[loss.index] = Tensor<T>::filled(nodes_[loss.index].value.shape(), T(1));

    for (std::size_t idx = loss.index + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        if (n.op == Primitive::Leaf || grads[idx].empty() || !n.needs_grad)
            continue;
        const Tensor<T>& g = grads[idx];
        auto in = [&](std::size_t i) -> const Tensor<T>& { return nodes_[n.inputs[i].index].value; };
        auto wants = [&](std::size_t i) { return nodes_[n.inputs[i].index].needs_grad; };
        auto push = [&](std::size_t i, const Tensor<T>& gi) { accumulate(grads, n.inputs[i], gi); };

        switch (n.op) {
        case Primitive::MatMul:
            if (wants(0))
                push(0, matmul_nt(g, in(1)));
            if (wants(1))
                push(1, matmul_tn(in(0), g));
            break;
        case Primitive::Add:
            if (wants(0))
                push(0, g);
            if (wants(1))
                push(1, g);
            break;
        case Primitive::AddRow:
            if (wants(0))
                push(0, g);
            if (wants(1))
                push(1, column_sums(g, in(1)));
            break;
        case Primitive::ScaleShift: {
            const Tensor<T>& x = in(0);
            const Tensor<T>& s = in(1);
            const std::size_t d = x.cols();
            if (wants(0)) {
                Tensor<T> dx(x.shape());
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        dx(i, j) = g(i, j) * (T(1) + s[j]);
                push(0, dx);
            }
            if (wants(1)) {
                Tensor<T> ds(s.shape());
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        ds[j] += g(i, j) * x(i, j);
                push(1, ds);
            }
            if (wants(2))
                push(2, column_sums(g, in(2)));
            break;
        }
        case Primitive::Softmax: {
            // y ⊙ (g − ⟨g, y⟩) row by row
            const Tensor<T>& y = n.value;
            Tensor<T> dx(y.shape());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < y.cols(); ++j)
                    dot += g(i, j) * y(i, j);
                for (std::size_t j = 0; j < y.cols(); ++j)
                    dx(i, j) = y(i, j) * (g(i, j) - dot);
            }
            push(0, dx);
            break;
        }
        case Primitive::LayerNorm: {
            const Tensor<T>& x = in(0);
            const Tensor<T>& gain = in(1);
            const std::size_t d = x.cols();
            Tensor<T> dx(x.shape());
            Tensor<T> dg(gain.shape());
            Tensor<T> db(in(2).shape());
            std::vector<T> xhat(d), dxhat(d);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                const T mu = n.ln.mean[i];
                const T rstd = n.ln.rstd[i];
                T mean_dxhat = 0;
                T mean_dxhat_xhat = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    xhat[j] = (x(i, j) - mu) * rstd;
                    dxhat[j] = g(i, j) * gain[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                    dg[j] += g(i, j) * xhat[j];
                    db[j] += g(i, j);
                }
                mean_dxhat /= static_cast<T>(d);
                mean_dxhat_xhat /= static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j)
                    dx(i, j) = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
            if (wants(0))
                push(0, dx);
            if (wants(1))
                push(1, dg);
            if (wants(2))
                push(2, db);
            break;
        }
        case Primitive::Silu: {
            const Tensor<T>& x = in(0);
            Tensor<T> dx(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) {
                T sig = T(1) / (T(1) + std::exp(-x[i]));
                dx[i] = g[i] * sig * (T(1) + x[i] * (T(1) - sig));
            }
            push(0, dx);
            break;
        }
        case Primitive::Attention: {
            const Tensor<T>& q = in(0);
            const Tensor<T>& k = in(1);
            const Tensor<T>& v = in(2);
            const std::size_t d = q.cols();
            const std::size_t heads = n.attrs.heads;
            const std::size_t dk = d / heads;
            const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
            Tensor<T> dq(q.shape()), dkey(k.shape()), dv(v.shape());
            std::size_t p_index = 0;
            for (const auto& s : n.attrs.layout) {
                const std::size_t nq = s.row_end - s.row_begin;
                const std::size_t nk = s.col_end - s.col_begin;
                if (nq == 0)
                    continue;
                for (std::size_t h = 0; h < heads; ++h, ++p_index) {
                    const Tensor<T>& p = n.saved[p_index];
                    ConstView<T> pv(p.data(), nq, nk, Eigen::OuterStride<>(nk));
                    ConstView<T> go(g.data() + s.row_begin * d + h * dk, nq, dk, Eigen::OuterStride<>(d));
                    ConstView<T> qh(q.data() + s.row_begin * d + h * dk, nq, dk, Eigen::OuterStride<>(d));
                    ConstView<T> kh(k.data() + s.col_begin * d + h * dk, nk, dk, Eigen::OuterStride<>(d));
                    ConstView<T> vh(v.data() + s.col_begin * d + h * dk, nk, dk, Eigen::OuterStride<>(d));
                    View<T> dvh(dv.data() + s.col_begin * d + h * dk, nk, dk, Eigen::OuterStride<>(d));
                    dvh.noalias() += pv.transpose() * go;
                    RowMat<T> dp = go * vh.transpose();
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)); masked entries never appear in the span.
                    for (std::size_t i = 0; i < nq; ++i) {
                        T dot = 0;
                        for (std::size_t j = 0; j < nk; ++j)
                            dot += dp(i, j) * pv(i, j);
                        for (std::size_t j = 0; j < nk; ++j)
                            dp(i, j) = pv(i, j) * (dp(i, j) - dot) * inv_sqrt;
                    }
                    View<T> dqh(dq.data() + s.row_begin * d + h * dk, nq, dk, Eigen::OuterStride<>(d));
                    View<T> dkh(dkey.data() + s.col_begin * d + h * dk, nk, dk, Eigen::OuterStride<>(d));
                    dqh.noalias() += dp * kh;
                    dkh.noalias() += dp.transpose() * qh;
                }
            }
            if (wants(0))
                push(0, dq);
            if (wants(1))
                push(1, dkey);
            if (wants(2))
                push(2, dv);
            break;
        }
        case Primitive::ConcatRows: {
            std::size_t row = 0;
            for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                const std::size_t r = in(i).rows();
                if (wants(i))
                    push(i, fastfit::slice_rows(g, row, row + r));
                row += r;
            }
            break;
        }
        case Primitive::SliceRows: {
            Tensor<T> dx(in(0).shape());
            std::copy(g.data(), g.data() + g.size(), dx.row(n.attrs.begin));
            push(0, dx);
            break;
        }
        case Primitive::MeanSquaredError: {
            const Tensor<T>& a = in(0);
            const Tensor<T>& b = in(1);
            const T c = T(2) * g[0] / static_cast<T>(a.size());
            Tensor<T> da(a.shape());
            for (std::size_t i = 0; i < a.size(); ++i)
                da[i] = c * (a[i] - b[i]);
            if (wants(0))
                push(0, da);
            if (wants(1))
                push(1, fastfit::scale(da, T(-1)));
            break;
        }
        case Primitive::Sum:
            push(0, Tensor<T>::filled(in(0).shape(), g[0]));
            break;
        case Primitive::Scale:
            push(0, fastfit::scale(g, static_cast<T>(n.attrs.factor)));
            break;
        case Primitive::Leaf:
            break;
        }
    }
    return result;
}

double GradReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params)
        m = std::max(m, p.max_rel_error);
    return m;
}

namespace {

// Ridders' extrapolation of central differences, shrinking h by 1.4 per row.
double ridders(const std::function<double()>& f, double& x, double h) {
    constexpr std::size_t kRows = 10;
    constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
    const double orig = x;
    auto central = [&](double step) {
        x = orig + step;
        const double up = f();
        x = orig - step;
        const double down = f();
        x = orig;
        return (up - down) / (2.0 * step);
    };
    double table[kRows][kRows];
    table[0][0] = central(h);
    double best = table[0][0], err = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < kRows; ++i) {
        h /= kShrink;
        table[0][i] = central(h);
        double fac = kShrink2;
        for (std::size_t j = 1; j <= i; ++j) {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= kShrink2;
            const double e = std::max(std::abs(table[j][i] - table[j - 1][i]), std::abs(table[j][i] - table[j - 1][i - 1]));
            if (e <= err) {
                err = e;
                best = table[j][i];
            }
        }
        if (std::abs(table[i][i] - table[i - 1][i - 1]) >= kSafe * err)
            break;
    }
    return best;
}

} // namespace

GradReport finite_diff_check(const std::function<double()>& f, std::span<const CheckedParam> params,
                             double step, Rng& rng, std::size_t min_coords) {
    GradReport report;
    report.step = step;
    for (const auto& p : params) {
        ParamGradError err;
        err.name = p.name;
        Tensor<double>& w = *p.value;
        if (p.analytic && p.analytic->shape() != w.shape())
            throw DimensionError("finite_diff_check: gradient shape mismatch for " + p.name);

        std::vector<std::size_t> coords(w.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > min_coords) {
            // Seeded partial Fisher-Yates: first min_coords entries are the sample.
            for (std::size_t i = 0; i < min_coords; ++i) {
                std::size_t j = i + rng.below(coords.size() - i);
                std::swap(coords[i], coords[j]);
            }
            coords.resize(min_coords);
        }
        for (auto c : coords) {
            const double fd = ridders(f, w[c], step);
            const double ad = p.analytic ? (*p.analytic)[c] : 0.0;
            err.max_rel_error = std::max(err.max_rel_error, relative_error(ad, fd));
            err.max_abs_fd = std::max(err.max_abs_fd, std::abs(fd));
        }
        err.coords_checked = coords.size();
        report.params.push_back(err);
    }
    return report;
}

template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;

} // namespace fastfit
