#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>

#include <json.hpp>

#include "lungseg/blocks.hpp"

namespace lungseg {

enum class NetKind { lung, nodule };

std::string net_kind_name(NetKind k);
NetKind parse_net_kind(const std::string& s);

struct NetworkConfig {
  NetKind kind = NetKind::nodule;
  /// Widths of the four encoder stages; the bottleneck is twice the last.
  std::array<std::int64_t, 4> stage_channels{16, 32, 64, 128};
  std::int64_t in_channels = 1;
  Index3 input_spatial{64, 64, 64};
  WindowSpec sasm_window{2, 2, 2};
  double dropout_rate = 0.2;
  std::int64_t output_channels = 1;
  /// Nodule net only; false builds the same net without the bottleneck attention.
  bool use_sasm = true;

  static NetworkConfig lung_default();
  static NetworkConfig nodule_default();

  std::int64_t bottleneck_channels() const { return 2 * stage_channels[3]; }
  /// Spatial size the lung net works at: input rounded up to multiples of 16.
  Index3 padded_spatial() const;
  void validate() const;
};

nlohmann::json to_json(const NetworkConfig& c);
/// Missing keys keep the defaults of the kind named by "net".
NetworkConfig network_config_from_json(const nlohmann::json& j);

/// Activations retained from the last forward pass. Skip tensors e1..e4 sit
/// at full, 1/2, 1/4 and 1/8 resolution; the bottleneck at 1/16.
template <typename T>
struct ForwardTrace {
  std::array<Tensor5<T>, 4> encoder;    // e1..e4
  Tensor5<T> bottleneck;
  std::array<Tensor5<T>, 4> decoder;    // d1..d4 (index 0 is d1)
  std::array<Tensor5<T>, 4> attention;  // A1..A4, lung net only
};

template <typename T>
class SegmentationNet {
 public:
  virtual ~SegmentationNet() = default;

  /// Returns per-voxel foreground probabilities, shape (B,1,D,H,W).
  virtual Tensor5<T> forward(const Tensor5<T>& x, Mode mode, Rng& rng) = 0;
  /// Back-propagates dLoss/dprob, accumulating parameter gradients; returns dLoss/dx.
  virtual Tensor5<T> backward(const Tensor5<T>& grad_prob) = 0;
  virtual ParamList<T> parameters() = 0;

  const NetworkConfig& config() const { return config_; }
  const ForwardTrace<T>& trace() const { return trace_; }

 protected:
  explicit SegmentationNet(const NetworkConfig& c) : config_(c) {}
  void check_input(const Tensor5<T>& x) const;

  NetworkConfig config_;
  ForwardTrace<T> trace_;
};

/// Fully convolutional attention residual UNet (lung parenchyma).
///
/// stem (dilated conv+BN+ReLU) gives e1; encoder stages 1-4 are stride-2
/// residual blocks (e2..e4 and the bottleneck input); the bottleneck is a
/// stride-1 residual block. Decoder stage i: D_i = ReLU(conv(tconv(prev)));
/// A_i = gate(e_i, prev); d_i = residual(cat(A_i, D_i)). Head: conv to one
/// channel, center crop back to the unpadded input size, two 3x3x3
/// single-channel convs, sigmoid.
template <typename T>
class AttentionResUNet final : public SegmentationNet<T> {
 public:
  AttentionResUNet(const NetworkConfig& c, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x, Mode mode, Rng& rng) override;
  Tensor5<T> backward(const Tensor5<T>& grad_prob) override;
  ParamList<T> parameters() override;

 private:
  Conv3dLayer<T> stem_conv_;
  BatchNorm3dLayer<T> stem_bn_;
  std::array<ResidualBlock<T>, 4> encoders_;
  ResidualBlock<T> bottleneck_;
  std::array<Conv3dLayer<T>, 4> up_;       // tconv, index i-1 for stage i
  std::array<Conv3dLayer<T>, 4> up_conv_;
  std::array<AttentionGate<T>, 4> gates_;
  std::array<ResidualBlock<T>, 4> decoders_;
  Conv3dLayer<T> head_conv_, post_conv1_, post_conv2_;

  Shape5 input_shape_{};
  Tensor5<T> stem_pre_;
  std::array<Tensor5<T>, 4> up_conv_pre_;
  Shape5 head_shape_{};
  Tensor5<T> prob_;
};

/// Nodule UNet: conv blocks with dropout, 2x2x2 max pooling, windowed
/// self-attention after the bottleneck conv block, a single conv block per
/// decoder stage on cat(skip, upsampled), 1x1x1 head and sigmoid.
template <typename T>
class EfficientSasmUNet final : public SegmentationNet<T> {
 public:
  EfficientSasmUNet(const NetworkConfig& c, Rng& rng);

  Tensor5<T> forward(const Tensor5<T>& x, Mode mode, Rng& rng) override;
  Tensor5<T> backward(const Tensor5<T>& grad_prob) override;
  ParamList<T> parameters() override;

  EfficientSASM<T>* sasm() { return this->config_.use_sasm ? &sasm_ : nullptr; }

 private:
  std::array<ConvBlock<T>, 4> encoders_;
  ConvBlock<T> bottleneck_;
  EfficientSASM<T> sasm_;
  std::array<Conv3dLayer<T>, 4> up_;
  std::array<ConvBlock<T>, 4> decoders_;
  Conv3dLayer<T> head_;

  std::array<Shape5, 4> pool_input_shapes_{};
  std::array<std::vector<std::int64_t>, 4> pool_argmax_;
  Tensor5<T> prob_;
};

template <typename T>
std::unique_ptr<SegmentationNet<T>> make_network(const NetworkConfig& c, Rng& init_rng);

/// Probability forward pass in eval mode, then p >= threshold -> 1 else 0.
template <typename T>
Tensor5<T> predict_volume(SegmentationNet<T>& net, const Tensor5<T>& volume, double threshold);

/// Thresholds an existing probability volume.
template <typename T>
Tensor5<T> threshold_probabilities(const Tensor5<T>& prob, double threshold);

}  // namespace lungseg
