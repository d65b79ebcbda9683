#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lungseg/errors.hpp"

namespace lungseg {

/// (batch, channel, depth, height, width)
using Shape5 = std::array<std::int64_t, 5>;

std::string shape_to_string(const Shape5& s);
std::int64_t shape_numel(const Shape5& s);

/// Dense rank-5 array, row-major with W fastest:
/// (b,c,d,h,w) lives at ((((b*C+c)*D+d)*H+h)*W+w).
template <typename T>
class Tensor5 {
 public:
  using value_type = T;

  Tensor5() = default;
  explicit Tensor5(const Shape5& shape, T fill = T(0));
  Tensor5(const Shape5& shape, std::vector<T> data);

  const Shape5& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t batch() const { return shape_[0]; }
  std::int64_t channels() const { return shape_[1]; }
  std::int64_t depth() const { return shape_[2]; }
  std::int64_t height() const { return shape_[3]; }
  std::int64_t width() const { return shape_[4]; }
  std::int64_t spatial_size() const { return shape_[2] * shape_[3] * shape_[4]; }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::size_t offset(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h,
                     std::int64_t w) const {
    return static_cast<std::size_t>(
        (((b * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w);
  }
  T& operator()(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) {
    return data_[offset(b, c, d, h, w)];
  }
  const T& operator()(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h,
                      std::int64_t w) const {
    return data_[offset(b, c, d, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the contiguous (D,H,W) volume of one (batch, channel) pair.
  T* channel_ptr(std::int64_t b, std::int64_t c) { return data_.data() + offset(b, c, 0, 0, 0); }
  const T* channel_ptr(std::int64_t b, std::int64_t c) const {
    return data_.data() + offset(b, c, 0, 0, 0);
  }

  // In-place mutation, reserved for gradient accumulation and the optimizer.
  Tensor5& operator+=(const Tensor5& other);
  Tensor5& operator*=(T s);
  void fill(T v);

  bool same_shape(const Tensor5& other) const { return shape_ == other.shape_; }

  template <typename U>
  Tensor5<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor5<U>(shape_, std::move(out));
  }

 private:
  Shape5 shape_{0, 0, 0, 0, 0};
  std::vector<T> data_;
};

enum class BinaryOp { add, sub, mul };
enum class ReduceOp { sum, max, mean };

template <typename T>
Tensor5<T> tensor_new(const Shape5& shape, T fill);

template <typename T>
Tensor5<T> tensor_map2(const Tensor5<T>& a, const Tensor5<T>& b, BinaryOp op);

/// Sums accumulate in double regardless of T.
template <typename T>
T tensor_reduce(const Tensor5<T>& a, ReduceOp op);

/// Inner product over all elements, accumulated in double.
template <typename T>
double tensor_dot(const Tensor5<T>& a, const Tensor5<T>& b);

template <typename T>
Tensor5<T> tensor_scale(const Tensor5<T>& a, T s);

// Serialization: <stem>.raw holds the little-endian scalar buffer, <stem>.json
// holds {"shape":[B,C,D,H,W],"dtype":"f32"|"f64"}.

template <typename T>
std::string_view dtype_name();

template <typename T>
void save_tensor(const Tensor5<T>& t, const std::filesystem::path& stem);

/// Loads a tensor stored with any supported dtype, converting to T.
template <typename T>
Tensor5<T> load_tensor(const std::filesystem::path& stem);

/// Stored dtype of a serialized tensor ("f32" or "f64").
std::string stored_dtype(const std::filesystem::path& stem);

}  // namespace lungseg
