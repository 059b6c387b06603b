#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fastfit/errors.hpp"

namespace fastfit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Byte accounting for every tensor buffer. The benchmark harness reads the
// high-water mark to report workspace size.
struct WorkspaceCounters {
    std::atomic<std::int64_t> live{0};
    std::atomic<std::int64_t> peak{0};
};

WorkspaceCounters& workspace_counters();

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        auto bytes = static_cast<std::int64_t>(n * sizeof(T));
        auto& c = workspace_counters();
        std::int64_t now = c.live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
        std::int64_t prev = c.peak.load(std::memory_order_relaxed);
        while (now > prev && !c.peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
        }
        return std::allocator<T>{}.allocate(n);
    }

    void deallocate(T* p, std::size_t n) noexcept {
        workspace_counters().live.fetch_sub(static_cast<std::int64_t>(n * sizeof(T)),
                                            std::memory_order_relaxed);
        std::allocator<T>{}.deallocate(p, n);
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

// Measures the peak tensor bytes allocated while it is alive, relative to
// the live bytes at construction.
class WorkspaceMeter {
public:
    WorkspaceMeter();
    std::int64_t peak_bytes() const;

private:
    std::int64_t baseline_;
};

// Dense row-major array of rank 1 to 3.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using Storage = std::vector<T, TrackingAllocator<T>>;

    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_rank();
        data_.assign(shape_numel(shape_), T(0));
    }
    Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
        check_rank();
        if (values.size() != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape_));
        data_.assign(values.begin(), values.end());
    }
    Tensor(Shape shape, std::initializer_list<T> values)
        : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor filled(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_)
            v = value;
        return t;
    }
    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i)
            t(i, i) = T(1);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    // A rank-1 tensor is treated as a single row.
    std::size_t rows() const { return rank() == 1 ? 1 : shape_[0]; }
    std::size_t cols() const { return rank() == 1 ? shape_[0] : shape_[1]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return {data_.data(), data_.size()}; }
    std::span<const T> values() const { return {data_.data(), data_.size()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    T* row(std::size_t i) { return data_.data() + i * cols(); }
    const T* row(std::size_t i) const { return data_.data() + i * cols(); }

    // Same data, different shape with equal element count.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), values());
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < size(); ++i)
            out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    void check_rank() const {
        if (shape_.empty() || shape_.size() > 3)
            throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(shape_));
    }

    Shape shape_;
    Storage data_;
};

// Throws NumericError if any value is NaN or infinite.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T max_abs(const Tensor<T>& a);

// 64-bit FNV-1a over the raw bytes of the buffer and shape.
template <typename T>
std::uint64_t byte_hash(const Tensor<T>& t, std::uint64_t seed = 1469598103934665603ULL);

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed = 1469598103934665603ULL);

} // namespace fastfit
