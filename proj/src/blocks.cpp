#include "lungseg/blocks.hpp"

#include <cmath>

#include <Eigen/Core>

namespace lungseg {

// ------------------------------------------------------------------ layers

template <typename T>
Conv3dLayer<T>::Conv3dLayer(const ConvSpec& spec, bool transposed, Rng& rng)
    : params_(transposed ? make_tconv_params<T>(spec, rng) : make_conv_params<T>(spec, rng)),
      grad_weight_(params_.weight.shape()),
      grad_bias_(params_.bias.shape()),
      transposed_(transposed) {}

template <typename T>
Tensor5<T> Conv3dLayer<T>::forward(const Tensor5<T>& x) {
  input_ = x;
  return transposed_ ? tconv3d(x, params_) : conv3d(x, params_);
}

template <typename T>
Tensor5<T> Conv3dLayer<T>::backward(const Tensor5<T>& grad_out) {
  auto g = transposed_ ? tconv3d_backward(input_, params_, grad_out)
                       : conv3d_backward(input_, params_, grad_out);
  grad_weight_ += g.weight;
  grad_bias_ += g.bias;
  return std::move(g.input);
}

template <typename T>
void Conv3dLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", transposed_ ? "tconv_weight" : "conv_weight", &params_.weight,
                 &grad_weight_});
  out.push_back({prefix + ".bias", "bias", &params_.bias, &grad_bias_});
}

template <typename T>
BatchNorm3dLayer<T>::BatchNorm3dLayer(std::int64_t channels)
    : gamma({channels, 1, 1, 1, 1}, T(1)),
      beta({channels, 1, 1, 1, 1}, T(0)),
      state(BatchNormState<T>::make(channels)),
      grad_gamma_({channels, 1, 1, 1, 1}),
      grad_beta_({channels, 1, 1, 1, 1}) {}

template <typename T>
Tensor5<T> BatchNorm3dLayer<T>::forward(const Tensor5<T>& x, Mode mode) {
  return batchnorm3d(x, gamma, beta, state, mode, &cache_);
}

template <typename T>
Tensor5<T> BatchNorm3dLayer<T>::backward(const Tensor5<T>& grad_out) {
  auto g = batchnorm3d_backward(cache_, gamma, grad_out);
  grad_gamma_ += g.gamma;
  grad_beta_ += g.beta;
  return std::move(g.input);
}

template <typename T>
void BatchNorm3dLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", "bn_gamma", &gamma, &grad_gamma_});
  out.push_back({prefix + ".beta", "bn_beta", &beta, &grad_beta_});
  out.push_back({prefix + ".running_mean", "bn_running_mean", &state.running_mean, nullptr});
  out.push_back({prefix + ".running_var", "bn_running_var", &state.running_var, nullptr});
}

// ---------------------------------------------------------- residual block

template <typename T>
ResidualBlock<T>::ResidualBlock(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride,
                                Rng& rng)
    : layer1(ConvSpec::cube(in_channels, out_channels, 3, 2, stride), false, rng),
      layer2(ConvSpec::cube(out_channels, out_channels, 3, 2, 1), false, rng),
      bn1(out_channels),
      bn2(out_channels),
      has_skip_proj_(in_channels != out_channels || stride != 1) {
  if (has_skip_proj_) skip_proj = Conv3dLayer<T>(ConvSpec::cube(in_channels, out_channels, 1, 1, stride), false, rng);
}

template <typename T>
Tensor5<T> ResidualBlock<T>::forward(const Tensor5<T>& x, Mode mode) {
  bn1_out_ = bn1.forward(layer1.forward(x), mode);
  Tensor5<T> f = bn2.forward(layer2.forward(activation(bn1_out_, Activation::relu)), mode);
  Tensor5<T> skip = has_skip_proj_ ? skip_proj.forward(x) : x;
  if (!skip.same_shape(f))
    throw ShapeError("residual_block: skip path " + shape_to_string(skip.shape()) + " vs residual path " +
                     shape_to_string(f.shape()));
  pre_act_ = tensor_map2(skip, f, BinaryOp::add);
  return activation(pre_act_, Activation::relu);
}

template <typename T>
Tensor5<T> ResidualBlock<T>::backward(const Tensor5<T>& grad_out) {
  const Tensor5<T> g = activation_backward(Activation::relu, pre_act_, pre_act_, grad_out);
  Tensor5<T> ga = layer2.backward(bn2.backward(g));
  Tensor5<T> gx = layer1.backward(bn1.backward(activation_backward(Activation::relu, bn1_out_, bn1_out_, ga)));
  gx += has_skip_proj_ ? skip_proj.backward(g) : g;
  return gx;
}

template <typename T>
void ResidualBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
  layer1.collect(out, prefix + ".layer1");
  bn1.collect(out, prefix + ".bn1");
  layer2.collect(out, prefix + ".layer2");
  bn2.collect(out, prefix + ".bn2");
  if (has_skip_proj_) skip_proj.collect(out, prefix + ".skip_proj");
}

// ---------------------------------------------------------- attention gate

namespace {

ConvSpec upsample_spec(std::int64_t cin, std::int64_t cout) {
  ConvSpec s;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = {2, 2, 2};
  s.stride = {2, 2, 2};
  return s;
}

}  // namespace

template <typename T>
AttentionGate<T>::AttentionGate(std::int64_t x_channels, std::int64_t g_channels, Rng& rng) {
  const std::int64_t inter = std::max<std::int64_t>(1, x_channels / 2);
  w_x = Conv3dLayer<T>(ConvSpec::cube(x_channels, inter, 3, 2), false, rng);
  w_g = Conv3dLayer<T>(ConvSpec::cube(g_channels, inter, 3, 2), false, rng);
  up_g = Conv3dLayer<T>(upsample_spec(inter, inter), true, rng);
  depth = Conv3dLayer<T>(ConvSpec::cube(inter, inter, 3, 1), false, rng);
  w_y = Conv3dLayer<T>(ConvSpec::cube(inter, 1, 3, 2), false, rng);
  f_t = Conv3dLayer<T>(ConvSpec::cube(x_channels, x_channels, 1), false, rng);
}

template <typename T>
Tensor5<T> AttentionGate<T>::forward(const Tensor5<T>& x, const Tensor5<T>& g) {
  if (g.batch() != x.batch() || 2 * g.depth() != x.depth() || 2 * g.height() != x.height() ||
      2 * g.width() != x.width())
    throw ShapeError("attention_gate: gating signal " + shape_to_string(g.shape()) +
                     " must have half the spatial size of the input " + shape_to_string(x.shape()));
  Tensor5<T> up = up_g.forward(w_g.forward(g));
  joint_pre_ = tensor_map2(w_x.forward(x), up, BinaryOp::add);
  depth_pre_ = depth.forward(activation(joint_pre_, Activation::relu));
  z0_ = activation(w_y.forward(activation(depth_pre_, Activation::relu)), Activation::sigmoid);
  ft_ = f_t.forward(x);
  Tensor5<T> z(ft_.shape());
  const std::int64_t vol = ft_.spatial_size();
  for (std::int64_t b = 0; b < ft_.batch(); ++b) {
    const T* m = z0_.channel_ptr(b, 0);
    for (std::int64_t c = 0; c < ft_.channels(); ++c) {
      const T* f = ft_.channel_ptr(b, c);
      T* o = z.channel_ptr(b, c);
      for (std::int64_t i = 0; i < vol; ++i) o[i] = m[i] * f[i];
    }
  }
  return z;
}

template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> AttentionGate<T>::backward(const Tensor5<T>& grad_out) {
  if (!grad_out.same_shape(ft_)) throw ShapeError("attention_gate backward: grad shape mismatch");
  Tensor5<T> g_ft(ft_.shape());
  Tensor5<T> g_mask(z0_.shape());
  const std::int64_t vol = ft_.spatial_size();
  for (std::int64_t b = 0; b < ft_.batch(); ++b) {
    const T* m = z0_.channel_ptr(b, 0);
    T* gm = g_mask.channel_ptr(b, 0);
    for (std::int64_t c = 0; c < ft_.channels(); ++c) {
      const T* f = ft_.channel_ptr(b, c);
      const T* go = grad_out.channel_ptr(b, c);
      T* gf = g_ft.channel_ptr(b, c);
      for (std::int64_t i = 0; i < vol; ++i) {
        gf[i] = go[i] * m[i];
        gm[i] += go[i] * f[i];
      }
    }
  }
  Tensor5<T> g = w_y.backward(activation_backward(Activation::sigmoid, z0_, z0_, g_mask));
  g = depth.backward(activation_backward(Activation::relu, depth_pre_, depth_pre_, g));
  g = activation_backward(Activation::relu, joint_pre_, joint_pre_, g);
  Tensor5<T> gx = w_x.backward(g);
  gx += f_t.backward(g_ft);
  Tensor5<T> gg = w_g.backward(up_g.backward(g));
  return {std::move(gx), std::move(gg)};
}

template <typename T>
void AttentionGate<T>::collect(ParamList<T>& out, const std::string& prefix) {
  w_x.collect(out, prefix + ".w_x");
  w_g.collect(out, prefix + ".w_g");
  up_g.collect(out, prefix + ".up_g");
  depth.collect(out, prefix + ".depth");
  w_y.collect(out, prefix + ".w_y");
  f_t.collect(out, prefix + ".f_t");
}

// ------------------------------------------------------------------- SASM

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMat<T>> window_block(TokenTensor<T>& t, std::int64_t b, std::int64_t n) {
  return Eigen::Map<RowMat<T>>(t.data.data() + t.offset(b, n, 0, 0), t.tokens, t.channels);
}

template <typename T>
Eigen::Map<const RowMat<T>> window_block(const TokenTensor<T>& t, std::int64_t b, std::int64_t n) {
  return Eigen::Map<const RowMat<T>>(t.data.data() + t.offset(b, n, 0, 0), t.tokens, t.channels);
}

template <typename T>
TokenTensor<T> zeros_like(const TokenTensor<T>& t) {
  TokenTensor<T> z = t;
  std::fill(z.data.begin(), z.data.end(), T(0));
  return z;
}

}  // namespace

template <typename T>
EfficientSASM<T>::EfficientSASM(std::int64_t channels, const WindowSpec& window, Rng& rng)
    : qkv_proj(ConvSpec::cube(channels, 3 * channels, 1), false, rng),
      out_proj(ConvSpec::cube(channels, channels, 1), false, rng),
      gamma({1, 1, 1, 1, 1}, T(0)),
      window_(window),
      channels_(channels),
      grad_gamma_({1, 1, 1, 1, 1}) {
  if (window.d <= 0 || window.h <= 0 || window.w <= 0)
    throw ValidationError("EfficientSASM: window dims must be positive");
}

template <typename T>
Tensor5<T> EfficientSASM<T>::forward(const Tensor5<T>& x) {
  if (x.channels() != channels_)
    throw ShapeError("efficient_sasm: input has " + std::to_string(x.channels()) + " channels, module expects " +
                     std::to_string(channels_));
  validate_window(x.shape(), window_);
  spatial_ = spatial_of(x.shape());
  auto [q, kv] = split_channels(qkv_proj.forward(x), channels_);
  auto [k, v] = split_channels(kv, channels_);
  q_ = unfold_windows(q, window_);
  k_ = unfold_windows(k, window_);
  v_ = unfold_windows(v, window_);

  const T scale = T(1) / std::sqrt(static_cast<T>(channels_));
  TokenTensor<T> o = zeros_like(q_);
  attn_.assign(static_cast<std::size_t>(q_.batch * q_.windows), Matrix<T>());
  for (std::int64_t b = 0; b < q_.batch; ++b)
    for (std::int64_t n = 0; n < q_.windows; ++n) {
      Matrix<T> scores(static_cast<std::size_t>(q_.tokens), static_cast<std::size_t>(q_.tokens));
      Eigen::Map<RowMat<T>> s(scores.data.data(), q_.tokens, q_.tokens);
      s.noalias() = scale * (window_block(q_, b, n) * window_block(k_, b, n).transpose());
      Matrix<T>& a = attn_[static_cast<std::size_t>(b * q_.windows + n)];
      a = softmax_lastdim(scores);
      Eigen::Map<const RowMat<T>> am(a.data.data(), q_.tokens, q_.tokens);
      window_block(o, b, n).noalias() = am * window_block(v_, b, n);
    }
  projected_ = out_proj.forward(fold_windows(o, window_, spatial_));
  Tensor5<T> y = x;
  const T g = gamma[0];
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += g * projected_[i];
  return y;
}

template <typename T>
Tensor5<T> EfficientSASM<T>::backward(const Tensor5<T>& grad_out) {
  if (!grad_out.same_shape(projected_)) throw ShapeError("efficient_sasm backward: grad shape mismatch");
  grad_gamma_[0] += static_cast<T>(tensor_dot(grad_out, projected_));
  Tensor5<T> g_proj = tensor_scale(grad_out, gamma[0]);
  TokenTensor<T> g_o = unfold_windows(out_proj.backward(g_proj), window_);

  const T scale = T(1) / std::sqrt(static_cast<T>(channels_));
  TokenTensor<T> g_q = zeros_like(q_), g_k = zeros_like(k_), g_v = zeros_like(v_);
  for (std::int64_t b = 0; b < q_.batch; ++b)
    for (std::int64_t n = 0; n < q_.windows; ++n) {
      const Matrix<T>& a = attn_[static_cast<std::size_t>(b * q_.windows + n)];
      Eigen::Map<const RowMat<T>> am(a.data.data(), q_.tokens, q_.tokens);
      Matrix<T> g_a(a.rows, a.cols);
      Eigen::Map<RowMat<T>> gam(g_a.data.data(), q_.tokens, q_.tokens);
      gam.noalias() = window_block(g_o, b, n) * window_block(v_, b, n).transpose();
      window_block(g_v, b, n).noalias() = am.transpose() * window_block(g_o, b, n);
      Matrix<T> g_s = softmax_lastdim_backward(a, g_a);
      Eigen::Map<const RowMat<T>> gsm(g_s.data.data(), q_.tokens, q_.tokens);
      window_block(g_q, b, n).noalias() = scale * (gsm * window_block(k_, b, n));
      window_block(g_k, b, n).noalias() = scale * (gsm.transpose() * window_block(q_, b, n));
    }
  Tensor5<T> g_qkv = concat_channels(concat_channels(fold_windows(g_q, window_, spatial_),
                                                     fold_windows(g_k, window_, spatial_)),
                                     fold_windows(g_v, window_, spatial_));
  Tensor5<T> gx = qkv_proj.backward(g_qkv);
  gx += grad_out;
  return gx;
}

template <typename T>
void EfficientSASM<T>::collect(ParamList<T>& out, const std::string& prefix) {
  qkv_proj.collect(out, prefix + ".qkv_proj");
  out_proj.collect(out, prefix + ".out_proj");
  out.push_back({prefix + ".gamma", "sasm_gamma", &gamma, &grad_gamma_});
}

// -------------------------------------------------------------- conv block

template <typename T>
ConvBlock<T>::ConvBlock(std::int64_t in_channels, std::int64_t out_channels, double dropout_rate, Rng& rng)
    : layer1(ConvSpec::cube(in_channels, out_channels, 3), false, rng),
      layer2(ConvSpec::cube(out_channels, out_channels, 3), false, rng),
      bn1(out_channels),
      bn2(out_channels) {
  set_dropout_rate(dropout_rate);
}

template <typename T>
void ConvBlock<T>::set_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("conv_block: dropout rate must lie in [0,1)");
  dropout_rate_ = rate;
}

template <typename T>
Tensor5<T> ConvBlock<T>::forward(const Tensor5<T>& x, Mode mode, Rng& rng) {
  bn1_out_ = bn1.forward(layer1.forward(x), mode);
  auto d1 = dropout(activation(bn1_out_, Activation::relu), dropout_rate_, mode, rng);
  mask1_ = std::move(d1.mask);
  bn2_out_ = bn2.forward(layer2.forward(d1.output), mode);
  auto d2 = dropout(activation(bn2_out_, Activation::relu), dropout_rate_, mode, rng);
  mask2_ = std::move(d2.mask);
  return std::move(d2.output);
}

template <typename T>
Tensor5<T> ConvBlock<T>::backward(const Tensor5<T>& grad_out) {
  Tensor5<T> g = activation_backward(Activation::relu, bn2_out_, bn2_out_, dropout_backward(mask2_, grad_out));
  g = layer2.backward(bn2.backward(g));
  g = activation_backward(Activation::relu, bn1_out_, bn1_out_, dropout_backward(mask1_, g));
  return layer1.backward(bn1.backward(g));
}

template <typename T>
void ConvBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
  layer1.collect(out, prefix + ".layer1");
  bn1.collect(out, prefix + ".bn1");
  layer2.collect(out, prefix + ".layer2");
  bn2.collect(out, prefix + ".bn2");
}

template class Conv3dLayer<float>;
template class Conv3dLayer<double>;
template class BatchNorm3dLayer<float>;
template class BatchNorm3dLayer<double>;
template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class AttentionGate<float>;
template class AttentionGate<double>;
template class EfficientSASM<float>;
template class EfficientSASM<double>;
template class ConvBlock<float>;
template class ConvBlock<double>;

}  // namespace lungseg
