#include "fastfit/tensor.hpp"

#include <cmath>
#include <cstring>

namespace fastfit {

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape)
        n *= d;
    return n;
}

WorkspaceCounters& workspace_counters() {
    static WorkspaceCounters counters;
    return counters;
}

WorkspaceMeter::WorkspaceMeter() {
    auto& c = workspace_counters();
    baseline_ = c.live.load(std::memory_order_relaxed);
    c.peak.store(baseline_, std::memory_order_relaxed);
}

std::int64_t WorkspaceMeter::peak_bytes() const {
    return workspace_counters().peak.load(std::memory_order_relaxed) - baseline_;
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i]))
            throw NumericError(std::string("non-finite value produced by ") + where + " at flat index " +
                               std::to_string(i));
    }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("max_abs_diff: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, static_cast<T>(std::abs(a[i])));
    return m;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed) {
    auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
std::uint64_t byte_hash(const Tensor<T>& t, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (auto d : t.shape()) {
        std::uint64_t v = d;
        h = fnv1a(&v, sizeof v, h);
    }
    return fnv1a(t.data(), t.size() * sizeof(T), h);
}

#define FASTFIT_INSTANTIATE(T)                                              \
    template void ensure_finite<T>(const Tensor<T>&, const char*);          \
    template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);         \
    template T max_abs<T>(const Tensor<T>&);                                \
    template std::uint64_t byte_hash<T>(const Tensor<T>&, std::uint64_t);

FASTFIT_INSTANTIATE(float)
FASTFIT_INSTANTIATE(double)

} // namespace fastfit
