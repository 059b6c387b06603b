#include "fastfit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

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
ConstView<T> view(const Tensor<T>& t) {
    return ConstView<T>(t.data(), t.rows(), t.cols(), Eigen::OuterStride<>(t.cols()));
}

template <typename T>
View<T> view(Tensor<T>& t) {
    return View<T>(t.data(), t.rows(), t.cols(), Eigen::OuterStride<>(t.cols()));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2)
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <typename T>
void require_row(const Tensor<T>& row, std::size_t cols, const char* op) {
    if (row.size() != cols || row.rows() != 1)
        throw DimensionError(std::string(op) + ": broadcast row " + shape_str(row.shape()) +
                             " does not match width " + std::to_string(cols));
}

void count_matmul(std::size_t m, std::size_t k, std::size_t n) {
    auto& c = kernel_counters();
    ++c.matmul;
    c.matmul_macs += static_cast<std::uint64_t>(m) * k * n;
}

// Softmax of one row in place. Returns false if every entry is -inf.
template <typename T>
bool softmax_row_inplace(T* row, std::size_t n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
        mx = std::max(mx, row[j]);
    if (mx == -std::numeric_limits<T>::infinity())
        return false;
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
        T e = row[j] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(row[j] - mx);
        row[j] = e;
        total += e;
    }
    T inv = T(1) / total;
    for (std::size_t j = 0; j < n; ++j)
        row[j] *= inv;
    return true;
}

} // namespace

KernelCounters& kernel_counters() {
    thread_local KernelCounters counters;
    return counters;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " · " +
                             shape_str(b.shape()));
    Tensor<T> out({a.rows(), b.cols()});
    if (a.cols() > 0)
        view(out).noalias() = view(a) * view(b);
    count_matmul(a.rows(), a.cols(), b.cols());
    ensure_finite(out, "matmul");
    return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: widths differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> out({a.rows(), b.rows()});
    if (a.cols() > 0)
        view(out).noalias() = view(a) * view(b).transpose();
    count_matmul(a.rows(), a.cols(), b.rows());
    ensure_finite(out, "matmul_nt");
    return out;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows())
        throw DimensionError("matmul_tn: row counts differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> out({a.cols(), b.cols()});
    if (a.rows() > 0)
        view(out).noalias() = view(a).transpose() * view(b);
    count_matmul(a.cols(), a.rows(), b.cols());
    ensure_finite(out, "matmul_tn");
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += b[i];
    ensure_finite(out, "add");
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] -= b[i];
    ensure_finite(out, "sub");
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    Tensor<T> out = a;
    for (auto& v : out.values())
        v *= factor;
    ensure_finite(out, "scale");
    return out;
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
    require_row(row, a.cols(), "add_row");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        T* r = out.row(i);
        for (std::size_t j = 0; j < out.cols(); ++j)
            r[j] += row[j];
    }
    ensure_finite(out, "add_row");
    return out;
}

template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& b) {
    require_row(s, x.cols(), "scale_shift");
    require_row(b, x.cols(), "scale_shift");
    Tensor<T> out = x;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        T* r = out.row(i);
        for (std::size_t j = 0; j < out.cols(); ++j)
            r[j] = r[j] * (T(1) + s[j]) + b[j];
    }
    ensure_finite(out, "scale_shift");
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::isnan(x[i]) || x[i] == std::numeric_limits<T>::infinity())
            throw NumericError("softmax_rows: input must be finite or -inf");
    }
    for (std::size_t i = 0; i < out.rows(); ++i) {
        if (!softmax_row_inplace(out.row(i), out.cols()))
            throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     LayerNormStats<T>* stats) {
    const std::size_t d = x.cols();
    require_row(gain, d, "layer_norm");
    require_row(bias, d, "layer_norm");
    Tensor<T> out(x.shape());
    if (stats) {
        stats->mean.assign(x.rows(), T(0));
        stats->rstd.assign(x.rows(), T(0));
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const T* r = x.row(i);
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j)
            mu += r[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j)
            var += (r[j] - mu) * (r[j] - mu);
        var /= static_cast<T>(d);
        T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        T* o = out.row(i);
        for (std::size_t j = 0; j < d; ++j)
            o[j] = (r[j] - mu) * rstd * gain[j] + bias[j];
        if (stats) {
            stats->mean[i] = mu;
            stats->rstd[i] = rstd;
        }
    }
    ensure_finite(out, "layer_norm");
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (auto& v : out.values())
        v = v / (T(1) + std::exp(-v));
    ensure_finite(out, "silu");
    return out;
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>* const> parts) {
    if (parts.empty())
        throw DimensionError("concat_rows: no inputs");
    const std::size_t d = parts.front()->cols();
    std::size_t rows = 0;
    for (auto* p : parts) {
        require_matrix(*p, "concat_rows");
        if (p->cols() != d)
            throw DimensionError("concat_rows: width " + std::to_string(p->cols()) + " vs " +
                                 std::to_string(d));
        rows += p->rows();
    }
    Tensor<T> out({rows, d});
    T* dst = out.data();
    for (auto* p : parts)
        dst = std::copy(p->data(), p->data() + p->size(), dst);
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    require_matrix(x, "slice_rows");
    if (begin > end || end > x.rows())
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") outside " + shape_str(x.shape()));
    Tensor<T> out({end - begin, x.cols()});
    std::copy(x.row(begin), x.row(begin) + out.size(), out.data());
    return out;
}

template <typename T>
T sum(const Tensor<T>& x) {
    T s = 0;
    for (auto v : x.values())
        s += v;
    return s;
}

template <typename T>
T mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mean_squared_error");
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<T>(a.size());
}

AttentionLayout dense_layout(std::size_t query_rows, std::size_t key_rows) {
    return {AttentionSpan{0, query_rows, 0, key_rows}};
}

void validate_layout(const AttentionLayout& layout, std::size_t query_rows, std::size_t key_rows) {
    std::size_t next = 0;
    for (const auto& s : layout) {
        if (s.row_begin != next || s.row_end < s.row_begin)
            throw DimensionError("attention layout: spans must tile query rows in order");
        if (s.col_end > key_rows || s.col_begin > s.col_end)
            throw DimensionError("attention layout: key range outside " + std::to_string(key_rows) + " rows");
        if (s.row_end > s.row_begin && s.col_begin == s.col_end)
            throw NumericError("attention layout: query rows with no admissible key (fully masked row)");
        next = s.row_end;
    }
    if (next != query_rows)
        throw DimensionError("attention layout covers " + std::to_string(next) + " of " +
                             std::to_string(query_rows) + " query rows");
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionLayout& layout, std::size_t heads, std::vector<Tensor<T>>* probs) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
        throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()));
    if (heads == 0 || d % heads != 0)
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    validate_layout(layout, q.rows(), k.rows());
    const std::size_t dk = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

    Tensor<T> out({q.rows(), d});
    if (probs)
        probs->clear();
    auto& counters = kernel_counters();
    for (const auto& s : layout) {
        const std::size_t nq = s.row_end - s.row_begin;
        const std::size_t nk = s.col_end - s.col_begin;
        if (nq == 0)
            continue;
        for (std::size_t h = 0; h < heads; ++h) {
            ConstView<T> qh(q.data() + s.row_begin * d + h * dk, nq, dk, Eigen::OuterStride<>(d));
            ConstView<T> kh(k.data() + s.col_begin * d + h * dk, nk, dk, Eigen::OuterStride<>(d));
            ConstView<T> vh(v.data() + s.col_begin * d + h * dk, nk, dk, Eigen::OuterStride<>(d));
            Tensor<T> p({nq, nk});
            auto pv = view(p);
            pv.noalias() = qh * kh.transpose();
            pv *= inv_sqrt;
            for (std::size_t i = 0; i < nq; ++i)
                softmax_row_inplace(p.row(i), nk);
            View<T> oh(out.data() + s.row_begin * d + h * dk, nq, dk, Eigen::OuterStride<>(d));
            oh.noalias() = pv * vh;
            if (probs)
                probs->push_back(std::move(p));
        }
        counters.attention_macs += 2ull * nq * nk * d;
    }
    ++counters.attention;
    ensure_finite(out, "attention");
    return out;
}

template <typename T>
Tensor<T> init_weights(const Shape& shape, Rng& rng, InitScheme scheme) {
    Tensor<T> out(shape);
    switch (scheme) {
    case InitScheme::Zeros:
        break;
    case InitScheme::Identity:
        if (out.rank() == 1) {
            for (auto& v : out.values())
                v = T(1);
        } else if (out.rank() == 2 && shape[0] == shape[1]) {
            for (std::size_t i = 0; i < shape[0]; ++i)
                out(i, i) = T(1);
        } else {
            throw DimensionError("identity init needs a vector or square matrix, got " + shape_str(shape));
        }
        break;
    case InitScheme::UniformFanIn: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
        for (auto& v : out.values())
            v = static_cast<T>(rng.uniform(-bound, bound));
        break;
    }
    }
    return out;
}

#define FASTFIT_INSTANTIATE(T)                                                                        \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> matmul_tn<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                 \
    template Tensor<T> add_row<T>(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> scale_shift<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                             \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                     LayerNormStats<T>*);                                             \
    template Tensor<T> silu<T>(const Tensor<T>&);                                                     \
    template Tensor<T> concat_rows<T>(std::span<const Tensor<T>* const>);                             \
    template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                     \
    template T sum<T>(const Tensor<T>&);                                                              \
    template T mean_squared_error<T>(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                    const AttentionLayout&, std::size_t, std::vector<Tensor<T>>*);    \
    template Tensor<T> init_weights<T>(const Shape&, Rng&, InitScheme);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

} // namespace fastfit
