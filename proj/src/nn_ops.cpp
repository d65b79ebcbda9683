#include "lungseg/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Core>

namespace lungseg {

std::string index3_to_string(const Index3& i) {
  std::ostringstream os;
  os << '(' << i.d << ',' << i.h << ',' << i.w << ')';
  return os.str();
}

Index3 ConvSpec::output_size(const Index3& in) const {
  auto axis = [](std::int64_t x, std::int64_t k, std::int64_t s, std::int64_t d, std::int64_t p) {
    const std::int64_t span = x + 2 * p - d * (k - 1) - 1;
    if (span < 0) return std::int64_t{0};
    return span / s + 1;
  };
  return {axis(in.d, kernel.d, stride.d, dilation.d, padding.d),
          axis(in.h, kernel.h, stride.h, dilation.h, padding.h),
          axis(in.w, kernel.w, stride.w, dilation.w, padding.w)};
}

Index3 ConvSpec::transposed_output_size(const Index3& in) const {
  auto axis = [](std::int64_t x, std::int64_t k, std::int64_t s, std::int64_t d, std::int64_t p) {
    return (x - 1) * s - 2 * p + d * (k - 1) + 1;
  };
  return {axis(in.d, kernel.d, stride.d, dilation.d, padding.d),
          axis(in.h, kernel.h, stride.h, dilation.h, padding.h),
          axis(in.w, kernel.w, stride.w, dilation.w, padding.w)};
}

void ConvSpec::validate() const {
  auto positive = [](const Index3& i) { return i.d > 0 && i.h > 0 && i.w > 0; };
  if (in_channels <= 0 || out_channels <= 0)
    throw ValidationError("ConvSpec: channel counts must be positive");
  if (!positive(kernel) || !positive(stride) || !positive(dilation))
    throw ValidationError("ConvSpec: kernel, stride and dilation must be positive");
  if (padding.d < 0 || padding.h < 0 || padding.w < 0)
    throw ValidationError("ConvSpec: padding must be non-negative");
}

ConvSpec ConvSpec::cube(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t dil,
                        std::int64_t stride) {
  ConvSpec s;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = {k, k, k};
  s.stride = {stride, stride, stride};
  s.dilation = {dil, dil, dil};
  const std::int64_t p = dil * (k - 1) / 2;
  s.padding = {p, p, p};
  return s;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;

// Geometry of a correlation from a "source" volume (in) to a "target" volume (out).
struct ConvGeom {
  std::int64_t cin = 0;
  Index3 in, out, k, s, d, p;

  std::int64_t kvol() const { return k.d * k.h * k.w; }
  std::int64_t in_vol() const { return in.d * in.h * in.w; }
  std::int64_t out_vol() const { return out.d * out.h * out.w; }
  std::int64_t out_plane() const { return out.h * out.w; }
  bool pointwise() const {
    return k == Index3{1, 1, 1} && s == Index3{1, 1, 1} && p == Index3{0, 0, 0};
  }
};

// Valid output range [lo, hi) along one axis for kernel tap offset off = tap*d - p.
inline void valid_range(std::int64_t off, std::int64_t stride, std::int64_t in_extent,
                        std::int64_t out_extent, std::int64_t& lo, std::int64_t& hi) {
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = (in_extent - 1 - off) < 0 ? 0 : (in_extent - 1 - off) / stride + 1;
  hi = std::min(hi, out_extent);
  lo = std::min(lo, hi);
}

// Column matrix rows are (ci, kd, kh, kw); columns are (od in [od0,od1), oh, ow).
template <typename T>
void vol2col(const T* x, const ConvGeom& g, std::int64_t od0, std::int64_t od1, T* col) {
  const std::int64_t ncols = (od1 - od0) * g.out_plane();
  const std::int64_t OH = g.out.h, OW = g.out.w;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * g.in_vol();
    for (std::int64_t kd = 0; kd < g.k.d; ++kd)
      for (std::int64_t kh = 0; kh < g.k.h; ++kh)
        for (std::int64_t kw = 0; kw < g.k.w; ++kw) {
          const std::int64_t row = ((ci * g.k.d + kd) * g.k.h + kh) * g.k.w + kw;
          T* dst = col + row * ncols;
          const std::int64_t offw = kw * g.d.w - g.p.w;
          std::int64_t wlo, whi;
          valid_range(offw, g.s.w, g.in.w, OW, wlo, whi);
          for (std::int64_t od = od0; od < od1; ++od) {
            const std::int64_t id = od * g.s.d - g.p.d + kd * g.d.d;
            T* plane = dst + (od - od0) * OH * OW;
            if (id < 0 || id >= g.in.d) {
              std::fill(plane, plane + OH * OW, T(0));
              continue;
            }
            for (std::int64_t oh = 0; oh < OH; ++oh) {
              T* line = plane + oh * OW;
              const std::int64_t ih = oh * g.s.h - g.p.h + kh * g.d.h;
              if (ih < 0 || ih >= g.in.h) {
                std::fill(line, line + OW, T(0));
                continue;
              }
              const T* src = xc + (id * g.in.h + ih) * g.in.w + offw;
              std::fill(line, line + wlo, T(0));
              if (g.s.w == 1) {
                std::copy(src + wlo, src + whi, line + wlo);
              } else {
                for (std::int64_t ow = wlo; ow < whi; ++ow) line[ow] = src[ow * g.s.w];
              }
              std::fill(line + whi, line + OW, T(0));
            }
          }
        }
  }
}

template <typename T>
void col2vol_add(const T* col, const ConvGeom& g, std::int64_t od0, std::int64_t od1, T* x) {
  const std::int64_t ncols = (od1 - od0) * g.out_plane();
  const std::int64_t OH = g.out.h, OW = g.out.w;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    T* xc = x + ci * g.in_vol();
    for (std::int64_t kd = 0; kd < g.k.d; ++kd)
      for (std::int64_t kh = 0; kh < g.k.h; ++kh)
        for (std::int64_t kw = 0; kw < g.k.w; ++kw) {
          const std::int64_t row = ((ci * g.k.d + kd) * g.k.h + kh) * g.k.w + kw;
          const T* src = col + row * ncols;
          const std::int64_t offw = kw * g.d.w - g.p.w;
          std::int64_t wlo, whi;
          valid_range(offw, g.s.w, g.in.w, OW, wlo, whi);
          for (std::int64_t od = od0; od < od1; ++od) {
            const std::int64_t id = od * g.s.d - g.p.d + kd * g.d.d;
            if (id < 0 || id >= g.in.d) continue;
            const T* plane = src + (od - od0) * OH * OW;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
              const std::int64_t ih = oh * g.s.h - g.p.h + kh * g.d.h;
              if (ih < 0 || ih >= g.in.h) continue;
              const T* line = plane + oh * OW;
              T* dst = xc + (id * g.in.h + ih) * g.in.w + offw;
              if (g.s.w == 1) {
                for (std::int64_t ow = wlo; ow < whi; ++ow) dst[ow] += line[ow];
              } else {
                for (std::int64_t ow = wlo; ow < whi; ++ow) dst[ow * g.s.w] += line[ow];
              }
            }
          }
        }
  }
}

constexpr std::int64_t kColBudget = std::int64_t{1} << 22;

inline std::int64_t slices_per_chunk(const ConvGeom& g) {
  const std::int64_t per_slice = std::max<std::int64_t>(1, g.cin * g.kvol() * g.out_plane());
  return std::max<std::int64_t>(1, std::min(g.out.d, kColBudget / per_slice));
}

// target (rows x out_vol) = W (rows x cin*kvol) * col(src)
template <typename T>
void gather_gemm(const T* src, const ConvGeom& g, const T* weight, std::int64_t rows, T* target) {
  const std::int64_t K = g.cin * g.kvol();
  const std::int64_t plane = g.out_plane();
  const std::int64_t vol = g.out_vol();
  if (g.pointwise()) {
    Eigen::Map<const RowMat<T>> col(src, K, vol);
    Eigen::Map<RowMat<T>> y(target, rows, vol);
    Eigen::Map<const RowMat<T>> w(weight, rows, K);
    y.noalias() = w * col;
    return;
  }
  const std::int64_t step = slices_per_chunk(g);
  std::vector<T> col(static_cast<std::size_t>(K * step * plane));
  for (std::int64_t od0 = 0; od0 < g.out.d; od0 += step) {
    const std::int64_t od1 = std::min(g.out.d, od0 + step);
    const std::int64_t ncols = (od1 - od0) * plane;
    vol2col(src, g, od0, od1, col.data());
    Eigen::Map<const RowMat<T>> cm(col.data(), K, ncols);
    Eigen::Map<RowMat<T>, 0, Strided> y(target + od0 * plane, rows, ncols, Strided(vol));
    Eigen::Map<const RowMat<T>> w(weight, rows, K);
    y.noalias() = w * cm;
  }
}

// dst (source-side volume of g) += col2vol(W^T * grad), grad is (rows x out_vol).
template <typename T>
void scatter_gemm(const T* grad, const ConvGeom& g, const T* weight, std::int64_t rows, T* dst) {
  const std::int64_t K = g.cin * g.kvol();
  const std::int64_t plane = g.out_plane();
  const std::int64_t vol = g.out_vol();
  Eigen::Map<const RowMat<T>> w(weight, rows, K);
  auto product = [&](auto& out, const auto& gm) { out.noalias() = w.transpose() * gm; };
  if (g.pointwise()) {
    Eigen::Map<const RowMat<T>> gm(grad, rows, vol);
    RowMat<T> tmp(K, vol);
    product(tmp, gm);
    Eigen::Map<RowMat<T>> out(dst, K, vol);
    out += tmp;
    return;
  }
  const std::int64_t step = slices_per_chunk(g);
  RowMat<T> col;
  for (std::int64_t od0 = 0; od0 < g.out.d; od0 += step) {
    const std::int64_t od1 = std::min(g.out.d, od0 + step);
    const std::int64_t ncols = (od1 - od0) * plane;
    Eigen::Map<const RowMat<T>, 0, Strided> gm(grad + od0 * plane, rows, ncols, Strided(vol));
    col.resize(K, ncols);
    product(col, gm);
    col2vol_add(col.data(), g, od0, od1, dst);
  }
}

// wgrad (rows x K) += grad (rows x out_vol) * col(src)^T
template <typename T>
void weight_grad_gemm(const T* src, const ConvGeom& g, const T* grad, std::int64_t rows, T* wgrad) {
  const std::int64_t K = g.cin * g.kvol();
  const std::int64_t plane = g.out_plane();
  const std::int64_t vol = g.out_vol();
  Eigen::Map<RowMat<T>> gw(wgrad, rows, K);
  if (g.pointwise()) {
    Eigen::Map<const RowMat<T>> gm(grad, rows, vol);
    Eigen::Map<const RowMat<T>> cm(src, K, vol);
    gw.noalias() += gm * cm.transpose();
    return;
  }
  const std::int64_t step = slices_per_chunk(g);
  std::vector<T> col(static_cast<std::size_t>(K * step * plane));
  for (std::int64_t od0 = 0; od0 < g.out.d; od0 += step) {
    const std::int64_t od1 = std::min(g.out.d, od0 + step);
    const std::int64_t ncols = (od1 - od0) * plane;
    vol2col(src, g, od0, od1, col.data());
    Eigen::Map<const RowMat<T>> cm(col.data(), K, ncols);
    Eigen::Map<const RowMat<T>, 0, Strided> gm(grad + od0 * plane, rows, ncols, Strided(vol));
    gw.noalias() += gm * cm.transpose();
  }
}

template <typename T>
void add_bias(Tensor5<T>& y, const Tensor5<T>& bias) {
  const std::int64_t vol = y.spatial_size();
  for (std::int64_t b = 0; b < y.batch(); ++b)
    for (std::int64_t c = 0; c < y.channels(); ++c) {
      T* p = y.channel_ptr(b, c);
      const T v = bias[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < vol; ++i) p[i] += v;
    }
}

template <typename T>
Tensor5<T> bias_grad(const Tensor5<T>& g) {
  Tensor5<T> gb({g.channels(), 1, 1, 1, 1});
  const std::int64_t vol = g.spatial_size();
  for (std::int64_t c = 0; c < g.channels(); ++c) {
    double s = 0.0;
    for (std::int64_t b = 0; b < g.batch(); ++b) {
      const T* p = g.channel_ptr(b, c);
      for (std::int64_t i = 0; i < vol; ++i) s += static_cast<double>(p[i]);
    }
    gb[static_cast<std::size_t>(c)] = static_cast<T>(s);
  }
  return gb;
}

template <typename T>
void check_params(const LayerParams<T>& p, bool transposed) {
  p.spec.validate();
  const auto& s = p.spec;
  const Shape5 expected = transposed
                              ? Shape5{s.in_channels, s.out_channels, s.kernel.d, s.kernel.h, s.kernel.w}
                              : Shape5{s.out_channels, s.in_channels, s.kernel.d, s.kernel.h, s.kernel.w};
  if (p.weight.shape() != expected)
    throw ShapeError("weight shape " + shape_to_string(p.weight.shape()) + " does not match spec " +
                     shape_to_string(expected));
  if (p.bias.shape() != Shape5{s.out_channels, 1, 1, 1, 1})
    throw ShapeError("bias shape " + shape_to_string(p.bias.shape()) + " does not match out_channels " +
                     std::to_string(s.out_channels));
}

template <typename T>
Tensor5<T> kaiming(const Shape5& shape, double fan_in, Rng& rng) {
  Tensor5<T> w(shape);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1.0, fan_in)));
  for (auto& v : w.values()) v = static_cast<T>(dist(rng));
  return w;
}

}  // namespace

template <typename T>
LayerParams<T> make_conv_params(const ConvSpec& spec, Rng& rng) {
  spec.validate();
  LayerParams<T> p;
  p.spec = spec;
  p.weight = kaiming<T>({spec.out_channels, spec.in_channels, spec.kernel.d, spec.kernel.h, spec.kernel.w},
                        static_cast<double>(spec.in_channels * spec.kernel_volume()), rng);
  p.bias = Tensor5<T>({spec.out_channels, 1, 1, 1, 1});
  return p;
}

template <typename T>
LayerParams<T> make_tconv_params(const ConvSpec& spec, Rng& rng) {
  spec.validate();
  LayerParams<T> p;
  p.spec = spec;
  const double taps_per_output = static_cast<double>(spec.kernel_volume()) /
                                 static_cast<double>(spec.stride.d * spec.stride.h * spec.stride.w);
  p.weight = kaiming<T>({spec.in_channels, spec.out_channels, spec.kernel.d, spec.kernel.h, spec.kernel.w},
                        static_cast<double>(spec.in_channels) * std::max(1.0, taps_per_output), rng);
  p.bias = Tensor5<T>({spec.out_channels, 1, 1, 1, 1});
  return p;
}

template <typename T>
Tensor5<T> conv3d(const Tensor5<T>& x, const LayerParams<T>& p) {
  check_params(p, false);
  const auto& s = p.spec;
  if (x.channels() != s.in_channels)
    throw ShapeError("conv3d: input has " + std::to_string(x.channels()) + " channels, spec expects " +
                     std::to_string(s.in_channels));
  const Index3 in = spatial_of(x.shape());
  const Index3 out = s.output_size(in);
  if (out.d < 1 || out.h < 1 || out.w < 1)
    throw ShapeError("conv3d: output size " + index3_to_string(out) + " < 1 for input " +
                     index3_to_string(in));
  ConvGeom g{s.in_channels, in, out, s.kernel, s.stride, s.dilation, s.padding};
  Tensor5<T> y({x.batch(), s.out_channels, out.d, out.h, out.w});
  for (std::int64_t b = 0; b < x.batch(); ++b)
    gather_gemm(x.channel_ptr(b, 0), g, p.weight.data(), s.out_channels, y.channel_ptr(b, 0));
  add_bias(y, p.bias);
  return y;
}

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor5<T>& x, const LayerParams<T>& p, const Tensor5<T>& grad_out) {
  check_params(p, false);
  const auto& s = p.spec;
  if (x.channels() != s.in_channels) throw ShapeError("conv3d_backward: channel mismatch");
  const Index3 in = spatial_of(x.shape());
  const Index3 out = s.output_size(in);
  if (grad_out.shape() != Shape5{x.batch(), s.out_channels, out.d, out.h, out.w})
    throw ShapeError("conv3d_backward: grad_out shape " + shape_to_string(grad_out.shape()) +
                     " does not match forward output");
  ConvGeom g{s.in_channels, in, out, s.kernel, s.stride, s.dilation, s.padding};
  ConvGrads<T> r{Tensor5<T>(x.shape()), Tensor5<T>(p.weight.shape()), bias_grad(grad_out)};
  for (std::int64_t b = 0; b < x.batch(); ++b) {
    scatter_gemm(grad_out.channel_ptr(b, 0), g, p.weight.data(), s.out_channels, r.input.channel_ptr(b, 0));
    weight_grad_gemm(x.channel_ptr(b, 0), g, grad_out.channel_ptr(b, 0), s.out_channels, r.weight.data());
  }
  return r;
}

// tconv3d(x; W) is the data-gradient of conv3d with the same W, where the
// conv maps tconv's output space (C_out channels) to its input space (C_in).
template <typename T>
Tensor5<T> tconv3d(const Tensor5<T>& x, const LayerParams<T>& p) {
  check_params(p, true);
  const auto& s = p.spec;
  if (x.channels() != s.in_channels)
    throw ShapeError("tconv3d: input has " + std::to_string(x.channels()) + " channels, spec expects " +
                     std::to_string(s.in_channels));
  const Index3 in = spatial_of(x.shape());
  const Index3 out = s.transposed_output_size(in);
  if (out.d < 1 || out.h < 1 || out.w < 1)
    throw ShapeError("tconv3d: output size " + index3_to_string(out) + " < 1");
  ConvGeom g{s.out_channels, out, in, s.kernel, s.stride, s.dilation, s.padding};
  Tensor5<T> y({x.batch(), s.out_channels, out.d, out.h, out.w});
  for (std::int64_t b = 0; b < x.batch(); ++b)
    scatter_gemm(x.channel_ptr(b, 0), g, p.weight.data(), s.in_channels, y.channel_ptr(b, 0));
  add_bias(y, p.bias);
  return y;
}

template <typename T>
ConvGrads<T> tconv3d_backward(const Tensor5<T>& x, const LayerParams<T>& p, const Tensor5<T>& grad_out) {
  check_params(p, true);
  const auto& s = p.spec;
  if (x.channels() != s.in_channels) throw ShapeError("tconv3d_backward: channel mismatch");
  const Index3 in = spatial_of(x.shape());
  const Index3 out = s.transposed_output_size(in);
  if (grad_out.shape() != Shape5{x.batch(), s.out_channels, out.d, out.h, out.w})
    throw ShapeError("tconv3d_backward: grad_out shape " + shape_to_string(grad_out.shape()) +
                     " does not match forward output");
  ConvGeom g{s.out_channels, out, in, s.kernel, s.stride, s.dilation, s.padding};
  ConvGrads<T> r{Tensor5<T>(x.shape()), Tensor5<T>(p.weight.shape()), bias_grad(grad_out)};
  for (std::int64_t b = 0; b < x.batch(); ++b) {
    gather_gemm(grad_out.channel_ptr(b, 0), g, p.weight.data(), s.in_channels, r.input.channel_ptr(b, 0));
    weight_grad_gemm(grad_out.channel_ptr(b, 0), g, x.channel_ptr(b, 0), s.in_channels, r.weight.data());
  }
  return r;
}

// ---------------------------------------------------------------- pooling

void validate_window(const Shape5& s, const WindowSpec& w) {
  if (w.d <= 0 || w.h <= 0 || w.w <= 0)
    throw ValidationError("window dims must be positive, got " + index3_to_string(w));
  if (s[2] % w.d != 0 || s[3] % w.h != 0 || s[4] % w.w != 0)
    throw ShapeError("spatial dims " + shape_to_string(s) + " not divisible by window " +
                     index3_to_string(w));
}

template <typename T>
MaxPoolResult<T> maxpool3d(const Tensor5<T>& x, const WindowSpec& window) {
  validate_window(x.shape(), window);
  const std::int64_t OD = x.depth() / window.d, OH = x.height() / window.h, OW = x.width() / window.w;
  MaxPoolResult<T> r{Tensor5<T>({x.batch(), x.channels(), OD, OH, OW}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::int64_t b = 0; b < x.batch(); ++b)
    for (std::int64_t c = 0; c < x.channels(); ++c)
      for (std::int64_t od = 0; od < OD; ++od)
        for (std::int64_t oh = 0; oh < OH; ++oh)
          for (std::int64_t ow = 0; ow < OW; ++ow, ++o) {
            std::size_t best = x.offset(b, c, od * window.d, oh * window.h, ow * window.w);
            T best_v = x[best];
            for (std::int64_t kd = 0; kd < window.d; ++kd)
              for (std::int64_t kh = 0; kh < window.h; ++kh)
                for (std::int64_t kw = 0; kw < window.w; ++kw) {
                  const std::size_t i =
                      x.offset(b, c, od * window.d + kd, oh * window.h + kh, ow * window.w + kw);
                  if (x[i] > best_v) {
                    best_v = x[i];
                    best = i;
                  }
                }
            r.output[o] = best_v;
            r.argmax[o] = static_cast<std::int64_t>(best);
          }
  return r;
}

template <typename T>
Tensor5<T> maxpool3d_backward(const Shape5& input_shape, const std::vector<std::int64_t>& argmax,
                              const Tensor5<T>& grad_out) {
  if (argmax.size() != grad_out.size()) throw ShapeError("maxpool3d_backward: argmax/grad size mismatch");
  Tensor5<T> gx(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) gx[static_cast<std::size_t>(argmax[i])] += grad_out[i];
  return gx;
}

// ---------------------------------------------------------- normalization

template <typename T>
BatchNormState<T> BatchNormState<T>::make(std::int64_t channels) {
  BatchNormState s;
  s.running_mean = Tensor5<T>({channels, 1, 1, 1, 1}, T(0));
  s.running_var = Tensor5<T>({channels, 1, 1, 1, 1}, T(1));
  return s;
}

template <typename T>
Tensor5<T> batchnorm3d(const Tensor5<T>& x, const Tensor5<T>& gamma, const Tensor5<T>& beta,
                       BatchNormState<T>& state, Mode mode, BatchNormCache<T>* cache) {
  const std::int64_t C = x.channels();
  const Shape5 cs{C, 1, 1, 1, 1};
  if (gamma.shape() != cs || beta.shape() != cs || state.running_mean.shape() != cs ||
      state.running_var.shape() != cs)
    throw ShapeError("batchnorm3d: parameters do not match " + std::to_string(C) + " channels");
  const std::int64_t vol = x.spatial_size();
  const std::int64_t n = x.batch() * vol;
  Tensor5<T> y(x.shape());
  Tensor5<T> x_hat(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double mean, var;
    if (mode == Mode::train) {
      if (n == 0) throw ShapeError("batchnorm3d: empty batch in train mode");
      double s = 0.0;
      for (std::int64_t b = 0; b < x.batch(); ++b) {
        const T* p = x.channel_ptr(b, c);
        for (std::int64_t i = 0; i < vol; ++i) s += static_cast<double>(p[i]);
      }
      mean = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::int64_t b = 0; b < x.batch(); ++b) {
        const T* p = x.channel_ptr(b, c);
        for (std::int64_t i = 0; i < vol; ++i) {
          const double dv = static_cast<double>(p[i]) - mean;
          ss += dv * dv;
        }
      }
      var = ss / static_cast<double>(n);
      // running variance tracks the unbiased estimate
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      const double m = state.momentum;
      state.running_mean[ci] = static_cast<T>((1.0 - m) * static_cast<double>(state.running_mean[ci]) + m * mean);
      state.running_var[ci] = static_cast<T>((1.0 - m) * static_cast<double>(state.running_var[ci]) + m * unbiased);
    } else {
      mean = static_cast<double>(state.running_mean[ci]);
      var = static_cast<double>(state.running_var[ci]);
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    inv_std[ci] = is;
    const double g = static_cast<double>(gamma[ci]);
    const double bt = static_cast<double>(beta[ci]);
    for (std::int64_t b = 0; b < x.batch(); ++b) {
      const T* p = x.channel_ptr(b, c);
      T* xh = x_hat.channel_ptr(b, c);
      T* py = y.channel_ptr(b, c);
      for (std::int64_t i = 0; i < vol; ++i) {
        const double h = (static_cast<double>(p[i]) - mean) * is;
        xh[i] = static_cast<T>(h);
        py[i] = static_cast<T>(g * h + bt);
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm3d_backward(const BatchNormCache<T>& cache, const Tensor5<T>& gamma,
                                       const Tensor5<T>& grad_out) {
  const auto& xh = cache.x_hat;
  if (!xh.same_shape(grad_out)) throw ShapeError("batchnorm3d_backward: grad_out shape mismatch");
  const std::int64_t C = xh.channels();
  const std::int64_t vol = xh.spatial_size();
  const double n = static_cast<double>(xh.batch() * vol);
  BatchNormGrads<T> r{Tensor5<T>(xh.shape()), Tensor5<T>({C, 1, 1, 1, 1}), Tensor5<T>({C, 1, 1, 1, 1})};
  for (std::int64_t c = 0; c < C; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double sg = 0.0, sgx = 0.0;
    for (std::int64_t b = 0; b < xh.batch(); ++b) {
      const T* g = grad_out.channel_ptr(b, c);
      const T* h = xh.channel_ptr(b, c);
      for (std::int64_t i = 0; i < vol; ++i) {
        sg += static_cast<double>(g[i]);
        sgx += static_cast<double>(g[i]) * static_cast<double>(h[i]);
      }
    }
    r.gamma[ci] = static_cast<T>(sgx);
    r.beta[ci] = static_cast<T>(sg);
    const double scale = static_cast<double>(gamma[ci]) * cache.inv_std[ci];
    for (std::int64_t b = 0; b < xh.batch(); ++b) {
      const T* g = grad_out.channel_ptr(b, c);
      const T* h = xh.channel_ptr(b, c);
      T* gx = r.input.channel_ptr(b, c);
      if (cache.mode == Mode::train) {
        for (std::int64_t i = 0; i < vol; ++i)
          gx[i] = static_cast<T>(scale / n *
                                 (n * static_cast<double>(g[i]) - sg - static_cast<double>(h[i]) * sgx));
      } else {
        for (std::int64_t i = 0; i < vol; ++i) gx[i] = static_cast<T>(scale * static_cast<double>(g[i]));
      }
    }
  }
  return r;
}

// ------------------------------------------------------------ activations

template <typename T>
Tensor5<T> activation(const Tensor5<T>& x, Activation kind) {
  Tensor5<T> y(x.shape());
  const std::size_t n = x.size();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    // Saturated results are pulled back inside the open interval (0, 1).
    const T lo = std::numeric_limits<T>::min(), hi = std::nextafter(T(1), T(0));
    for (std::size_t i = 0; i < n; ++i) y[i] = std::clamp(T(1) / (T(1) + std::exp(-x[i])), lo, hi);
  }
  return y;
}

template <typename T>
Tensor5<T> activation_backward(Activation kind, const Tensor5<T>& x, const Tensor5<T>& y,
                               const Tensor5<T>& grad_out) {
  Tensor5<T> gx(grad_out.shape());
  const std::size_t n = grad_out.size();
  if (kind == Activation::relu) {
    if (!x.same_shape(grad_out)) throw ShapeError("relu backward: shape mismatch");
    for (std::size_t i = 0; i < n; ++i) gx[i] = x[i] > T(0) ? grad_out[i] : T(0);
  } else {
    if (!y.same_shape(grad_out)) throw ShapeError("sigmoid backward: shape mismatch");
    for (std::size_t i = 0; i < n; ++i) gx[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  }
  return gx;
}

template <typename T>
Matrix<T> softmax_lastdim(const Matrix<T>& scores) {
  if (scores.cols == 0) throw ValidationError("softmax_lastdim: rows must have at least one entry");
  Matrix<T> out(scores.rows, scores.cols);
  for (std::size_t r = 0; r < scores.rows; ++r) {
    const T* in = &scores.data[r * scores.cols];
    T* o = &out.data[r * scores.cols];
    const T mx = *std::max_element(in, in + scores.cols);
    T s = T(0);
    for (std::size_t c = 0; c < scores.cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      s += o[c];
    }
    for (std::size_t c = 0; c < scores.cols; ++c) o[c] /= s;
  }
  return out;
}

template <typename T>
Matrix<T> softmax_lastdim_backward(const Matrix<T>& y, const Matrix<T>& grad_out) {
  if (y.rows != grad_out.rows || y.cols != grad_out.cols)
    throw ShapeError("softmax_lastdim_backward: shape mismatch");
  Matrix<T> gx(y.rows, y.cols);
  for (std::size_t r = 0; r < y.rows; ++r) {
    T dot = T(0);
    for (std::size_t c = 0; c < y.cols; ++c) dot += y(r, c) * grad_out(r, c);
    for (std::size_t c = 0; c < y.cols; ++c) gx(r, c) = y(r, c) * (grad_out(r, c) - dot);
  }
  return gx;
}

template <typename T>
DropoutResult<T> dropout(const Tensor5<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ValidationError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return {x, Tensor5<T>(x.shape(), T(1))};
  DropoutResult<T> r{Tensor5<T>(x.shape()), Tensor5<T>(x.shape())};
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool keep = u(rng) >= rate;
    r.mask[i] = keep ? keep_scale : T(0);
    r.output[i] = x[i] * r.mask[i];
  }
  return r;
}

template <typename T>
Tensor5<T> dropout_backward(const Tensor5<T>& mask, const Tensor5<T>& grad_out) {
  return tensor_map2(mask, grad_out, BinaryOp::mul);
}

// ------------------------------------------------------------- structural

template <typename T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4])
    throw ShapeError("concat_channels: " + shape_to_string(sa) + " vs " + shape_to_string(sb));
  Tensor5<T> out({sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]});
  const std::int64_t vol = a.spatial_size();
  for (std::int64_t n = 0; n < sa[0]; ++n) {
    if (sa[1] > 0) std::copy_n(a.channel_ptr(n, 0), sa[1] * vol, out.channel_ptr(n, 0));
    if (sb[1] > 0) std::copy_n(b.channel_ptr(n, 0), sb[1] * vol, out.channel_ptr(n, sa[1]));
  }
  return out;
}

template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>& x, std::int64_t channels_a) {
  const auto& s = x.shape();
  if (channels_a < 0 || channels_a > s[1]) throw ShapeError("split_channels: split point out of range");
  Tensor5<T> a({s[0], channels_a, s[2], s[3], s[4]});
  Tensor5<T> b({s[0], s[1] - channels_a, s[2], s[3], s[4]});
  const std::int64_t vol = x.spatial_size();
  for (std::int64_t n = 0; n < s[0]; ++n) {
    if (channels_a > 0) std::copy_n(x.channel_ptr(n, 0), channels_a * vol, a.channel_ptr(n, 0));
    if (s[1] - channels_a > 0)
      std::copy_n(x.channel_ptr(n, channels_a), (s[1] - channels_a) * vol, b.channel_ptr(n, 0));
  }
  return {std::move(a), std::move(b)};
}

namespace {

// Copies the box of `small` (extent `small_sp`) located at offset `lo` inside `big`.
template <typename T, bool ToSmall>
void copy_box(const Tensor5<T>& src, Tensor5<T>& dst, const Index3& lo) {
  const Tensor5<T>& big = ToSmall ? src : dst;
  const Tensor5<T>& small = ToSmall ? dst : src;
  for (std::int64_t b = 0; b < small.batch(); ++b)
    for (std::int64_t c = 0; c < small.channels(); ++c)
      for (std::int64_t d = 0; d < small.depth(); ++d)
        for (std::int64_t h = 0; h < small.height(); ++h) {
          const std::size_t so = small.offset(b, c, d, h, 0);
          const std::size_t bo = big.offset(b, c, d + lo.d, h + lo.h, lo.w);
          if constexpr (ToSmall)
            std::copy_n(src.data() + bo, small.width(), dst.data() + so);
          else
            std::copy_n(src.data() + so, small.width(), dst.data() + bo);
        }
}

Index3 low_margin(const Index3& big, const Index3& small) {
  return {(big.d - small.d) / 2, (big.h - small.h) / 2, (big.w - small.w) / 2};
}

}  // namespace

template <typename T>
Tensor5<T> center_crop3d(const Tensor5<T>& x, const Index3& target) {
  const Index3 in = spatial_of(x.shape());
  if (target.d < 0 || target.h < 0 || target.w < 0 || target.d > in.d || target.h > in.h || target.w > in.w)
    throw ShapeError("center_crop3d: target " + index3_to_string(target) + " exceeds input " +
                     index3_to_string(in));
  Tensor5<T> out({x.batch(), x.channels(), target.d, target.h, target.w});
  copy_box<T, true>(x, out, low_margin(in, target));
  return out;
}

template <typename T>
Tensor5<T> center_crop3d_backward(const Tensor5<T>& grad_out, const Shape5& input_shape) {
  Tensor5<T> gx(input_shape);
  copy_box<T, false>(grad_out, gx, low_margin(spatial_of(input_shape), spatial_of(grad_out.shape())));
  return gx;
}

template <typename T>
Tensor5<T> pad3d(const Tensor5<T>& x, const Index3& target) {
  const Index3 in = spatial_of(x.shape());
  if (target.d < in.d || target.h < in.h || target.w < in.w)
    throw ShapeError("pad3d: target " + index3_to_string(target) + " smaller than input " +
                     index3_to_string(in));
  Tensor5<T> out({x.batch(), x.channels(), target.d, target.h, target.w});
  copy_box<T, false>(x, out, low_margin(target, in));
  return out;
}

template <typename T>
Tensor5<T> pad3d_backward(const Tensor5<T>& grad_out, const Index3& input_spatial) {
  return center_crop3d(grad_out, input_spatial);
}

template <typename T>
TokenTensor<T> unfold_windows(const Tensor5<T>& x, const WindowSpec& w) {
  validate_window(x.shape(), w);
  const std::int64_t nd = x.depth() / w.d, nh = x.height() / w.h, nw = x.width() / w.w;
  TokenTensor<T> t;
  t.batch = x.batch();
  t.windows = nd * nh * nw;
  t.tokens = w.d * w.h * w.w;
  t.channels = x.channels();
  t.data.resize(static_cast<std::size_t>(t.batch * t.windows * t.tokens * t.channels));
  for (std::int64_t b = 0; b < x.batch(); ++b)
    for (std::int64_t c = 0; c < x.channels(); ++c)
      for (std::int64_t d = 0; d < x.depth(); ++d)
        for (std::int64_t h = 0; h < x.height(); ++h)
          for (std::int64_t ww = 0; ww < x.width(); ++ww) {
            const std::int64_t n = ((d / w.d) * nh + h / w.h) * nw + ww / w.w;
            const std::int64_t tok = ((d % w.d) * w.h + h % w.h) * w.w + ww % w.w;
            t.at(b, n, tok, c) = x(b, c, d, h, ww);
          }
  return t;
}

template <typename T>
Tensor5<T> fold_windows(const TokenTensor<T>& tokens, const WindowSpec& w, const Index3& spatial) {
  const Shape5 shape{tokens.batch, tokens.channels, spatial.d, spatial.h, spatial.w};
  validate_window(shape, w);
  const std::int64_t nd = spatial.d / w.d, nh = spatial.h / w.h, nw = spatial.w / w.w;
  if (tokens.windows != nd * nh * nw || tokens.tokens != w.d * w.h * w.w ||
      tokens.data.size() != static_cast<std::size_t>(shape_numel(shape)))
    throw ShapeError("fold_windows: token geometry inconsistent with window " + index3_to_string(w) +
                     " and spatial " + index3_to_string(spatial));
  Tensor5<T> x(shape);
  for (std::int64_t b = 0; b < shape[0]; ++b)
    for (std::int64_t c = 0; c < shape[1]; ++c)
      for (std::int64_t d = 0; d < spatial.d; ++d)
        for (std::int64_t h = 0; h < spatial.h; ++h)
          for (std::int64_t ww = 0; ww < spatial.w; ++ww) {
            const std::int64_t n = ((d / w.d) * nh + h / w.h) * nw + ww / w.w;
            const std::int64_t tok = ((d % w.d) * w.h + h % w.h) * w.w + ww % w.w;
            x(b, c, d, h, ww) = tokens.at(b, n, tok, c);
          }
  return x;
}

const std::vector<std::string>& differentiable_ops() {
  static const std::vector<std::string> ops{
      "conv3d",  "tconv3d",         "maxpool3d",      "batchnorm3d", "relu",        "sigmoid",
      "softmax", "dropout",         "concat_channels", "center_crop3d", "pad3d",    "unfold_windows",
      "fold_windows"};
  return ops;
}

#define LUNGSEG_INSTANTIATE(T)                                                                         \
  template LayerParams<T> make_conv_params(const ConvSpec&, Rng&);                                     \
  template LayerParams<T> make_tconv_params(const ConvSpec&, Rng&);                                    \
  template Tensor5<T> conv3d(const Tensor5<T>&, const LayerParams<T>&);                                \
  template ConvGrads<T> conv3d_backward(const Tensor5<T>&, const LayerParams<T>&, const Tensor5<T>&);  \
  template Tensor5<T> tconv3d(const Tensor5<T>&, const LayerParams<T>&);                               \
  template ConvGrads<T> tconv3d_backward(const Tensor5<T>&, const LayerParams<T>&, const Tensor5<T>&); \
  template MaxPoolResult<T> maxpool3d(const Tensor5<T>&, const WindowSpec&);                           \
  template Tensor5<T> maxpool3d_backward(const Shape5&, const std::vector<std::int64_t>&,              \
                                         const Tensor5<T>&);                                           \
  template struct BatchNormState<T>;                                                                   \
  template Tensor5<T> batchnorm3d(const Tensor5<T>&, const Tensor5<T>&, const Tensor5<T>&,             \
                                  BatchNormState<T>&, Mode, BatchNormCache<T>*);                       \
  template BatchNormGrads<T> batchnorm3d_backward(const BatchNormCache<T>&, const Tensor5<T>&,         \
                                                  const Tensor5<T>&);                                  \
  template Tensor5<T> activation(const Tensor5<T>&, Activation);                                       \
  template Tensor5<T> activation_backward(Activation, const Tensor5<T>&, const Tensor5<T>&,            \
                                          const Tensor5<T>&);                                          \
  template Matrix<T> softmax_lastdim(const Matrix<T>&);                                                \
  template Matrix<T> softmax_lastdim_backward(const Matrix<T>&, const Matrix<T>&);                     \
  template DropoutResult<T> dropout(const Tensor5<T>&, double, Mode, Rng&);                            \
  template Tensor5<T> dropout_backward(const Tensor5<T>&, const Tensor5<T>&);                          \
  template Tensor5<T> concat_channels(const Tensor5<T>&, const Tensor5<T>&);                           \
  template std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>&, std::int64_t);          \
  template Tensor5<T> center_crop3d(const Tensor5<T>&, const Index3&);                                 \
  template Tensor5<T> center_crop3d_backward(const Tensor5<T>&, const Shape5&);                        \
  template Tensor5<T> pad3d(const Tensor5<T>&, const Index3&);                                         \
  template Tensor5<T> pad3d_backward(const Tensor5<T>&, const Index3&);                                \
  template TokenTensor<T> unfold_windows(const Tensor5<T>&, const WindowSpec&);                        \
  template Tensor5<T> fold_windows(const TokenTensor<T>&, const WindowSpec&, const Index3&);

LUNGSEG_INSTANTIATE(float)
LUNGSEG_INSTANTIATE(double)

}  // namespace lungseg
