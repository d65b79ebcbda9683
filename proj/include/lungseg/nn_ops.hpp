#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lungseg/tensor.hpp"

namespace lungseg {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

struct Index3 {
  std::int64_t d = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  bool operator==(const Index3&) const = default;
};

std::string index3_to_string(const Index3& i);

inline Index3 spatial_of(const Shape5& s) { return {s[2], s[3], s[4]}; }

/// Zero-padded convolution geometry. Padding is symmetric per axis.
struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  Index3 kernel{1, 1, 1};
  Index3 stride{1, 1, 1};
  Index3 dilation{1, 1, 1};
  Index3 padding{0, 0, 0};

  std::int64_t kernel_volume() const { return kernel.d * kernel.h * kernel.w; }

  /// floor((X + 2p - d(k-1) - 1)/s) + 1 per axis. May be < 1 for invalid inputs.
  Index3 output_size(const Index3& in) const;
  /// (X-1)s - 2p + d(k-1) + 1 per axis.
  Index3 transposed_output_size(const Index3& in) const;

  void validate() const;

  /// Cubic kernel k, stride s, dilation dil, padding dil*(k-1)/2 so that s=1 keeps size.
  static ConvSpec cube(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t dil = 1,
                       std::int64_t stride = 1);
};

/// Convolution weights. For a regular convolution the weight is laid out
/// (C_out, C_in, kd, kh, kw); for a transposed convolution it is
/// (C_in, C_out, kd, kh, kw), the layout under which tconv3d is the adjoint of
/// conv3d with the same buffer. Bias is stored as (C_out,1,1,1,1).
template <typename T>
struct LayerParams {
  ConvSpec spec;
  Tensor5<T> weight;
  Tensor5<T> bias;
};

template <typename T>
LayerParams<T> make_conv_params(const ConvSpec& spec, Rng& rng);
template <typename T>
LayerParams<T> make_tconv_params(const ConvSpec& spec, Rng& rng);

template <typename T>
struct ConvGrads {
  Tensor5<T> input;
  Tensor5<T> weight;
  Tensor5<T> bias;
};

template <typename T>
Tensor5<T> conv3d(const Tensor5<T>& x, const LayerParams<T>& p);
template <typename T>
ConvGrads<T> conv3d_backward(const Tensor5<T>& x, const LayerParams<T>& p, const Tensor5<T>& grad_out);

template <typename T>
Tensor5<T> tconv3d(const Tensor5<T>& x, const LayerParams<T>& p);
template <typename T>
ConvGrads<T> tconv3d_backward(const Tensor5<T>& x, const LayerParams<T>& p,
                              const Tensor5<T>& grad_out);

// ---------------------------------------------------------------- pooling

using WindowSpec = Index3;

void validate_window(const Shape5& s, const WindowSpec& w);

template <typename T>
struct MaxPoolResult {
  Tensor5<T> output;
  /// Flat input offset of the winning voxel for every output element.
  std::vector<std::int64_t> argmax;
};

/// Non-overlapping max pooling (stride == window). Ties go to the first voxel in scan order.
template <typename T>
MaxPoolResult<T> maxpool3d(const Tensor5<T>& x, const WindowSpec& window);
template <typename T>
Tensor5<T> maxpool3d_backward(const Shape5& input_shape, const std::vector<std::int64_t>& argmax,
                              const Tensor5<T>& grad_out);

// ---------------------------------------------------------- normalization

template <typename T>
struct BatchNormState {
  Tensor5<T> running_mean;  // (C,1,1,1,1)
  Tensor5<T> running_var;   // (C,1,1,1,1)
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::int64_t channels);
};

template <typename T>
struct BatchNormCache {
  Tensor5<T> x_hat;
  std::vector<double> inv_std;
  Mode mode = Mode::train;
};

template <typename T>
struct BatchNormGrads {
  Tensor5<T> input;
  Tensor5<T> gamma;
  Tensor5<T> beta;
};

/// gamma/beta are (C,1,1,1,1). Train mode normalizes with biased batch
/// statistics over (B,D,H,W) and updates the running statistics; eval mode
/// normalizes with the running statistics.
template <typename T>
Tensor5<T> batchnorm3d(const Tensor5<T>& x, const Tensor5<T>& gamma, const Tensor5<T>& beta,
                       BatchNormState<T>& state, Mode mode, BatchNormCache<T>* cache = nullptr);
template <typename T>
BatchNormGrads<T> batchnorm3d_backward(const BatchNormCache<T>& cache, const Tensor5<T>& gamma,
                                       const Tensor5<T>& grad_out);

// ------------------------------------------------------------ activations

enum class Activation { relu, sigmoid };

/// sigmoid never returns exactly 0 or 1: saturated values are clamped to the
/// nearest representable numbers inside (0, 1).
template <typename T>
Tensor5<T> activation(const Tensor5<T>& x, Activation kind);

/// relu needs the forward input, sigmoid the forward output; pass both.
template <typename T>
Tensor5<T> activation_backward(Activation kind, const Tensor5<T>& x, const Tensor5<T>& y,
                               const Tensor5<T>& grad_out);

template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Row-wise softmax with max subtraction.
template <typename T>
Matrix<T> softmax_lastdim(const Matrix<T>& scores);
template <typename T>
Matrix<T> softmax_lastdim_backward(const Matrix<T>& y, const Matrix<T>& grad_out);

template <typename T>
struct DropoutResult {
  Tensor5<T> output;
  /// 0 for dropped elements, 1/(1-rate) for survivors (all ones in eval mode).
  Tensor5<T> mask;
};

/// Inverted dropout; eval mode and rate 0 are the identity.
template <typename T>
DropoutResult<T> dropout(const Tensor5<T>& x, double rate, Mode mode, Rng& rng);
template <typename T>
Tensor5<T> dropout_backward(const Tensor5<T>& mask, const Tensor5<T>& grad_out);

// ------------------------------------------------------------- structural

template <typename T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b);
/// Inverse of concat_channels: first `channels_a` channels, then the rest.
template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>& x, std::int64_t channels_a);

/// Centered spatial crop; an odd margin drops its extra voxel on the high side.
template <typename T>
Tensor5<T> center_crop3d(const Tensor5<T>& x, const Index3& target);
template <typename T>
Tensor5<T> center_crop3d_backward(const Tensor5<T>& grad_out, const Shape5& input_shape);

/// Zero pad to `target`, placing the input where center_crop3d would take it back out.
template <typename T>
Tensor5<T> pad3d(const Tensor5<T>& x, const Index3& target);
template <typename T>
Tensor5<T> pad3d_backward(const Tensor5<T>& grad_out, const Index3& input_spatial);

/// Tokens of non-overlapping windows, layout (B, N, N_w, C) with C fastest.
template <typename T>
struct TokenTensor {
  std::int64_t batch = 0;
  std::int64_t windows = 0;
  std::int64_t tokens = 0;
  std::int64_t channels = 0;
  std::vector<T> data;

  std::size_t offset(std::int64_t b, std::int64_t n, std::int64_t t, std::int64_t c) const {
    return static_cast<std::size_t>(((b * windows + n) * tokens + t) * channels + c);
  }
  T& at(std::int64_t b, std::int64_t n, std::int64_t t, std::int64_t c) { return data[offset(b, n, t, c)]; }
  const T& at(std::int64_t b, std::int64_t n, std::int64_t t, std::int64_t c) const {
    return data[offset(b, n, t, c)];
  }
};

/// Windows are ordered lexicographically by (block_d, block_h, block_w) and
/// tokens inside a window by (d, h, w).
template <typename T>
TokenTensor<T> unfold_windows(const Tensor5<T>& x, const WindowSpec& w);
template <typename T>
Tensor5<T> fold_windows(const TokenTensor<T>& tokens, const WindowSpec& w, const Index3& spatial);

/// Names of every primitive with an analytic backward pass in this module.
const std::vector<std::string>& differentiable_ops();

}  // namespace lungseg
