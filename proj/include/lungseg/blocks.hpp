#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lungseg/nn_ops.hpp"
#include "lungseg/params.hpp"

namespace lungseg {

// Stateful layers: each keeps what its backward pass needs from the most
// recent forward call and accumulates parameter gradients until zero_grads().

template <typename T>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(const ConvSpec& spec, bool transposed, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x);
  Tensor5<T> backward(const Tensor5<T>& grad_out);
  void collect(ParamList<T>& out, const std::string& prefix);

  const ConvSpec& spec() const { return params_.spec; }
  bool transposed() const { return transposed_; }
  LayerParams<T>& params() { return params_; }
  const LayerParams<T>& params() const { return params_; }

 private:
  LayerParams<T> params_;
  Tensor5<T> grad_weight_;
  Tensor5<T> grad_bias_;
  bool transposed_ = false;
  Tensor5<T> input_;
};

template <typename T>
class BatchNorm3dLayer {
 public:
  BatchNorm3dLayer() = default;
  explicit BatchNorm3dLayer(std::int64_t channels);

  Tensor5<T> forward(const Tensor5<T>& x, Mode mode);
  Tensor5<T> backward(const Tensor5<T>& grad_out);
  void collect(ParamList<T>& out, const std::string& prefix);

  Tensor5<T> gamma;
  Tensor5<T> beta;
  BatchNormState<T> state;

 private:
  Tensor5<T> grad_gamma_;
  Tensor5<T> grad_beta_;
  BatchNormCache<T> cache_;
};

/// Dilated residual block: ReLU(skip(x) + BN(conv(ReLU(BN(conv(x)))))).
/// Both convolutions are 3x3x3 with dilation 2; the first carries the stride.
/// skip is the identity when shapes agree, else a strided 1x1x1 projection.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x, Mode mode);
  Tensor5<T> backward(const Tensor5<T>& grad_out);
  void collect(ParamList<T>& out, const std::string& prefix);

  bool has_projection() const { return has_skip_proj_; }
  Conv3dLayer<T> layer1, layer2, skip_proj;
  BatchNorm3dLayer<T> bn1, bn2;

 private:
  bool has_skip_proj_ = false;
  Tensor5<T> bn1_out_;
  Tensor5<T> pre_act_;
};

/// 3D attention gate. The input signal x comes from the encoder, the gating
/// signal g from the next-coarser decoder stage (half the spatial size).
///
///   a  = ReLU(W_x(x) + up(W_g(g)))          up: transposed conv, stride 2
///   z0 = sigmoid(W_y(ReLU(depth(a))))       one channel
///   z  = z0 * f_t(x)                         z0 broadcast over channels
///
/// W_x, W_g and W_y are dilated (d=2) 3x3x3 convolutions, depth is a plain
/// 3x3x3 convolution and f_t a channel-preserving 1x1x1 convolution. The
/// intermediate maps have max(1, C_x/2) channels.
template <typename T>
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(std::int64_t x_channels, std::int64_t g_channels, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x, const Tensor5<T>& g);
  /// Returns (grad wrt x, grad wrt g).
  std::pair<Tensor5<T>, Tensor5<T>> backward(const Tensor5<T>& grad_out);
  void collect(ParamList<T>& out, const std::string& prefix);

  /// The 1-channel mask z0 of the last forward call.
  const Tensor5<T>& mask() const { return z0_; }
  /// f_t(x) of the last forward call.
  const Tensor5<T>& transformed_input() const { return ft_; }

  Conv3dLayer<T> w_x, w_g, up_g, depth, w_y, f_t;

 private:
  Tensor5<T> joint_pre_;  // W_x(x) + up(W_g(g))
  Tensor5<T> depth_pre_;
  Tensor5<T> z0_;
  Tensor5<T> ft_;
};

/// Windowed self-attention over non-overlapping 3D windows:
/// 1x1x1 conv to q,k,v; per-window softmax(q k^T / sqrt(C)) v; fold;
/// 1x1x1 output projection; output x + gamma * projection.
template <typename T>
class EfficientSASM {
 public:
  EfficientSASM() = default;
  EfficientSASM(std::int64_t channels, const WindowSpec& window, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x);
  Tensor5<T> backward(const Tensor5<T>& grad_out);
  void collect(ParamList<T>& out, const std::string& prefix);

  const WindowSpec& window() const { return window_; }
  /// Attention matrices of the last forward call, one per (batch, window).
  const std::vector<Matrix<T>>& attention() const { return attn_; }

  Conv3dLayer<T> qkv_proj, out_proj;
  Tensor5<T> gamma;  // (1,1,1,1,1), starts at 0

 private:
  WindowSpec window_{2, 2, 2};
  std::int64_t channels_ = 0;
  Index3 spatial_;
  TokenTensor<T> q_, k_, v_;
  std::vector<Matrix<T>> attn_;
  Tensor5<T> projected_;
  Tensor5<T> grad_gamma_;
};

/// conv -> BN -> ReLU -> dropout, twice; no skip connection.
template <typename T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(std::int64_t in_channels, std::int64_t out_channels, double dropout_rate, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x, Mode mode, Rng& rng);
  Tensor5<T> backward(const Tensor5<T>& grad_out);
  void collect(ParamList<T>& out, const std::string& prefix);

  double dropout_rate() const { return dropout_rate_; }
  void set_dropout_rate(double rate);

  Conv3dLayer<T> layer1, layer2;
  BatchNorm3dLayer<T> bn1, bn2;

 private:
  double dropout_rate_ = 0.0;
  Tensor5<T> bn1_out_, bn2_out_;
  Tensor5<T> mask1_, mask2_;
};

}  // namespace lungseg
