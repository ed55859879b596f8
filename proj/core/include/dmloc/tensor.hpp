#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmloc {

/// Base of every error this library throws. The pipeline maps the subclasses
/// onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class CorruptionError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_volume(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Instantiated for float (the training path) and
/// double (finite-difference oracles).
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
        validate_extents();
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_extents();
        if (data_.size() != shape_volume(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string(shape_));
        }
    }

    BasicTensor(Shape shape, std::initializer_list<T> values) : BasicTensor(std::move(shape), std::vector<T>(values)) {}

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // Rank-3 accessors (channel, row, column).
    T& at(std::size_t c, std::size_t i, std::size_t j) noexcept { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
    const T& at(std::size_t c, std::size_t i, std::size_t j) const noexcept {
        return data_[(c * shape_[1] + i) * shape_[2] + j];
    }

    BasicTensor reshaped(Shape shape) const {
        if (shape_volume(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool all_finite() const noexcept;

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void validate_extents() const {
        for (auto e : shape_) {
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

/// A value together with the map from an upstream gradient to the gradients
/// of the operator's differentiable arguments, in argument order.
struct GradPair {
    Tensor value;
    std::function<std::vector<Tensor>(const Tensor& upstream)> backward;
};

// DMT1 binary format: magic "DMT1", u32 rank, rank u32 extents, f32 payload.
// Everything little-endian.
std::vector<std::uint8_t> encode_dmt(const Tensor& t);
Tensor decode_dmt(std::span<const std::uint8_t> bytes);
void write_dmt(const std::filesystem::path& path, const Tensor& t);
Tensor read_dmt(const std::filesystem::path& path);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dmloc
