#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fastfit/rng.hpp"
#include "fastfit/tensor.hpp"

namespace fastfit {

// Per-thread invocation counts, used to attribute compute to pipeline stages.
struct KernelCounters {
    std::uint64_t matmul = 0;
    std::uint64_t matmul_macs = 0;
    std::uint64_t attention = 0;
    std::uint64_t attention_macs = 0;
};

KernelCounters& kernel_counters();

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a · bᵀ
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
// aᵀ · b
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
// a + row broadcast over rows; row has a.cols() elements.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row);
// x ⊙ (1 + s) + b with s, b broadcast over rows.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& b);

// Row-wise softmax with max subtraction. -inf entries map to exactly 0; a row
// whose entries are all -inf raises NumericError.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormStats {
    std::vector<T> mean;
    std::vector<T> rstd;
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     LayerNormStats<T>* stats = nullptr);

template <typename T>
Tensor<T> silu(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>* const> parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
T sum(const Tensor<T>& x);
template <typename T>
T mean_squared_error(const Tensor<T>& a, const Tensor<T>& b);

// A rectangle of the attention pattern: query rows [row_begin, row_end) may
// attend to key rows [col_begin, col_end). A layout is a list of spans that
// tiles the query rows in order; every query row has exactly one key range.
struct AttentionSpan {
    std::size_t row_begin = 0;
    std::size_t row_end = 0;
    std::size_t col_begin = 0;
    std::size_t col_end = 0;
};
using AttentionLayout = std::vector<AttentionSpan>;

AttentionLayout dense_layout(std::size_t query_rows, std::size_t key_rows);
void validate_layout(const AttentionLayout& layout, std::size_t query_rows, std::size_t key_rows);

// Multi-head scaled dot-product attention. q is n_q×d, k and v are n_k×d;
// per-head width d/heads. When probs is non-null it receives one probability
// matrix per (span, head), ordered span-major.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionLayout& layout, std::size_t heads,
                    std::vector<Tensor<T>>* probs = nullptr);

enum class InitScheme { UniformFanIn, Zeros, Identity };

// UniformFanIn draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]
// (the input width of a row-major x·W projection). Identity gives I for square
// matrices and ones for vectors.
template <typename T>
Tensor<T> init_weights(const Shape& shape, Rng& rng, InitScheme scheme);

} // namespace fastfit
