#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace extd {

/// On-disk element tag; values match the weight-file encoding.
enum class ElemKind : std::uint8_t { Single = 0, Double = 1 };

template <typename T>
constexpr ElemKind elem_kind_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? ElemKind::Single : ElemKind::Double;
}

/// NCHW extents. Every entry is at least 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense rank-4 NCHW array with contiguous row-major storage.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : data_(1, T{}) {}
  explicit BasicTensor(Shape shape, T fill = T{}) : shape_(shape) {
    if (!shape.valid()) {
      throw std::invalid_argument("tensor shape entries must be >= 1, got " + shape.str());
    }
    data_.assign(shape.numel(), fill);
  }
  BasicTensor(int n, int c, int h, int w, T fill = T{}) : BasicTensor(Shape{n, c, h, w}, fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (!shape.valid() || data_.size() != shape.numel()) {
      throw std::invalid_argument("tensor data length does not match shape " + shape.str());
    }
  }

  static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  /// Pointer to the H×W plane of (n, c).
  T* plane(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Bitwise equality of shape and payload.
  bool identical(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Geometry of one convolution: dense, grouped, depthwise or pointwise.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool has_bias = false;

  static ConvSpec pointwise(int in, int out) { return {in, out, 1, 1, 1, 0, 1, false}; }
  static ConvSpec depthwise(int channels, int stride = 1) {
    return {channels, channels, 3, 3, stride, 1, channels, false};
  }
  static ConvSpec dense3x3(int in, int out, int stride = 1, bool bias = false) {
    return {in, out, 3, 3, stride, 1, 1, bias};
  }

  bool is_depthwise() const { return groups == in_channels && groups == out_channels && groups > 1; }
  int out_h(int in_h) const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  int out_w(int in_w) const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel_h, kernel_w}; }
  std::size_t weight_count() const { return weight_shape().numel(); }

  /// Throws std::invalid_argument on non-positive extents or groups not dividing channels.
  void validate() const;
};

}  // namespace extd
