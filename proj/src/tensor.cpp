#include "lungseg/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace lungseg {

std::string shape_to_string(const Shape5& s) {
  std::ostringstream os;
  os << '(' << s[0] << ',' << s[1] << ',' << s[2] << ',' << s[3] << ',' << s[4] << ')';
  return os.str();
}

std::int64_t shape_numel(const Shape5& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_to_string(s));
    if (d != 0 && n > std::numeric_limits<std::int64_t>::max() / d)
      throw std::length_error("element count overflows for shape " + shape_to_string(s));
    n *= d;
  }
  return n;
}

template <typename T>
Tensor5<T>::Tensor5(const Shape5& shape, T fill) : shape_(shape) {
  const auto n = shape_numel(shape);
  if (static_cast<std::uint64_t>(n) > std::vector<T>().max_size())
    throw std::length_error("element count too large for shape " + shape_to_string(shape));
  data_.assign(static_cast<std::size_t>(n), fill);
}

template <typename T>
Tensor5<T>::Tensor5(const Shape5& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape))
    throw ShapeError("buffer length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_to_string(shape));
}

template <typename T>
Tensor5<T>& Tensor5<T>::operator+=(const Tensor5& other) {
  if (shape_ != other.shape_)
    throw ShapeError("+=: " + shape_to_string(shape_) + " vs " + shape_to_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
Tensor5<T>& Tensor5<T>::operator*=(T s) {
  for (auto& v : data_) v *= s;
  return *this;
}

template <typename T>
void Tensor5<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
Tensor5<T> tensor_new(const Shape5& shape, T fill) {
  return Tensor5<T>(shape, fill);
}

template <typename T>
Tensor5<T> tensor_map2(const Tensor5<T>& a, const Tensor5<T>& b, BinaryOp op) {
  if (!a.same_shape(b))
    throw ShapeError("tensor_map2: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  Tensor5<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const std::size_t n = a.size();
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      break;
  }
  return out;
}

template <typename T>
T tensor_reduce(const Tensor5<T>& a, ReduceOp op) {
  if (op == ReduceOp::sum) {
    double s = 0.0;
    for (T v : a.values()) s += static_cast<double>(v);
    return static_cast<T>(s);
  }
  if (a.empty()) throw ShapeError("tensor_reduce: max/mean of an empty tensor");
  if (op == ReduceOp::max) return *std::max_element(a.values().begin(), a.values().end());
  double s = 0.0;
  for (T v : a.values()) s += static_cast<double>(v);
  return static_cast<T>(s / static_cast<double>(a.size()));
}

template <typename T>
double tensor_dot(const Tensor5<T>& a, const Tensor5<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError("tensor_dot: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
Tensor5<T> tensor_scale(const Tensor5<T>& a, T s) {
  Tensor5<T> out = a;
  out *= s;
  return out;
}

template <>
std::string_view dtype_name<float>() {
  return "f32";
}
template <>
std::string_view dtype_name<double>() {
  return "f64";
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

template <typename U>
void byteswap_buffer(std::vector<U>& v) {
  for (auto& x : v) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &x, sizeof(U));
    std::reverse(bytes, bytes + sizeof(U));
    std::memcpy(&x, bytes, sizeof(U));
  }
}

template <typename U>
std::vector<U> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(U))
    throw IoError(path.string() + ": expected " + std::to_string(count * sizeof(U)) +
                  " bytes, found " + std::to_string(bytes));
  in.seekg(0);
  std::vector<U> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("short read from " + path.string());
  if constexpr (std::endian::native == std::endian::big) byteswap_buffer(buf);
  return buf;
}

nlohmann::json read_sidecar(const std::filesystem::path& stem) {
  const auto path = with_suffix(stem, ".json");
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace

template <typename T>
void save_tensor(const Tensor5<T>& t, const std::filesystem::path& stem) {
  nlohmann::json meta;
  meta["shape"] = std::vector<std::int64_t>(t.shape().begin(), t.shape().end());
  meta["dtype"] = std::string(dtype_name<T>());
  {
    const auto path = with_suffix(stem, ".json");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << meta.dump() << '\n';
  }
  const auto path = with_suffix(stem, ".raw");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    auto copy = t.storage();
    byteswap_buffer(copy);
    out.write(reinterpret_cast<const char*>(copy.data()),
              static_cast<std::streamsize>(copy.size() * sizeof(T)));
  } else {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::string stored_dtype(const std::filesystem::path& stem) {
  return read_sidecar(stem).value("dtype", "");
}

template <typename T>
Tensor5<T> load_tensor(const std::filesystem::path& stem) {
  const auto meta = read_sidecar(stem);
  if (!meta.contains("shape") || !meta["shape"].is_array() || meta["shape"].size() != 5)
    throw IoError(stem.string() + ".json: missing 5-element \"shape\"");
  Shape5 shape{};
  for (std::size_t i = 0; i < 5; ++i) shape[i] = meta["shape"][i].get<std::int64_t>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  const std::string dtype = meta.value("dtype", "");
  const auto raw = with_suffix(stem, ".raw");
  if (dtype == dtype_name<T>()) return Tensor5<T>(shape, read_raw<T>(raw, n));
  if (dtype == "f32") return Tensor5<float>(shape, read_raw<float>(raw, n)).template cast<T>();
  if (dtype == "f64") return Tensor5<double>(shape, read_raw<double>(raw, n)).template cast<T>();
  throw IoError(stem.string() + ".json: unsupported dtype \"" + dtype + "\"");
}

#define LUNGSEG_INSTANTIATE(T)                                                \
  template class Tensor5<T>;                                                  \
  template Tensor5<T> tensor_new(const Shape5&, T);                           \
  template Tensor5<T> tensor_map2(const Tensor5<T>&, const Tensor5<T>&, BinaryOp); \
  template T tensor_reduce(const Tensor5<T>&, ReduceOp);                      \
  template double tensor_dot(const Tensor5<T>&, const Tensor5<T>&);           \
  template Tensor5<T> tensor_scale(const Tensor5<T>&, T);                     \
  template void save_tensor(const Tensor5<T>&, const std::filesystem::path&); \
  template Tensor5<T> load_tensor(const std::filesystem::path&);

LUNGSEG_INSTANTIATE(float)
LUNGSEG_INSTANTIATE(double)

}  // namespace lungseg
