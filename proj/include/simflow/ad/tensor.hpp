#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace simflow {

/// Raised when a computation produces NaN/Inf. Mapped to exit code 3 by the CLI.
class numerical_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace simflow

namespace simflow::ad {

using shape_t = std::vector<std::size_t>;

/// 64-byte aligned allocation. Eigen's vectorized kernels peel loops by
/// address, so float results would otherwise depend on where the heap put a
/// buffer.
template <class T>
struct aligned_allocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    aligned_allocator() = default;
    template <class U>
    aligned_allocator(const aligned_allocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const aligned_allocator<U>&) const noexcept { return true; }
};

template <class T>
using aligned_vector = std::vector<T, aligned_allocator<T>>;

inline std::size_t shape_size(const shape_t& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const shape_t& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array. A rank-2 view [rows, cols] is used by every
/// broadcasting op: rows = shape[0], cols = product of the remaining dims.
template <class Real>
class basic_tensor {
public:
    using value_type = Real;

    basic_tensor() = default;

    explicit basic_tensor(shape_t shape, Real fill = Real(0))
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    basic_tensor(shape_t shape, const std::vector<Real>& data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (shape_size(shape_) != data_.size())
            throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not match " +
                                        std::to_string(data_.size()) + " values");
    }

    static basic_tensor scalar(Real v) { return basic_tensor({1}, std::vector<Real>{v}); }

    static basic_tensor matrix(std::size_t rows, std::size_t cols, const std::vector<Real>& data) {
        return basic_tensor({rows, cols}, data);
    }

    const shape_t& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

    std::span<Real> data() noexcept { return data_; }
    std::span<const Real> data() const noexcept { return data_; }
    std::vector<Real> to_vector() const { return {data_.begin(), data_.end()}; }

    Real& operator[](std::size_t i) noexcept { return data_[i]; }
    const Real& operator[](std::size_t i) const noexcept { return data_[i]; }
    Real& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const Real& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<Real> row(std::size_t r) noexcept { return std::span<Real>(data_).subspan(r * cols(), cols()); }
    std::span<const Real> row(std::size_t r) const noexcept {
        return std::span<const Real>(data_).subspan(r * cols(), cols());
    }

    void reshape(shape_t shape) {
        if (shape_size(shape) != data_.size())
            throw std::invalid_argument("tensor: cannot reshape " + shape_string(shape_) + " to " +
                                        shape_string(shape));
        shape_ = std::move(shape);
    }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
    }

    template <class Other>
    basic_tensor<Other> cast() const {
        basic_tensor<Other> out(shape_);
        std::copy(data_.begin(), data_.end(), out.data().begin());
        return out;
    }

    friend bool operator==(const basic_tensor& a, const basic_tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    shape_t shape_;
    aligned_vector<Real> data_;
};

using tensor = basic_tensor<float>;

} // namespace simflow::ad
