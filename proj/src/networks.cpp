#include "lungseg/networks.hpp"

namespace lungseg {

std::string net_kind_name(NetKind k) { return k == NetKind::lung ? "lung" : "nodule"; }

NetKind parse_net_kind(const std::string& s) {
  if (s == "lung") return NetKind::lung;
  if (s == "nodule") return NetKind::nodule;
  throw ValidationError("unknown network kind \"" + s + "\" (expected lung or nodule)");
}

NetworkConfig NetworkConfig::lung_default() {
  NetworkConfig c;
  c.kind = NetKind::lung;
  c.stage_channels = {32, 64, 128, 256};
  c.input_spatial = {23, 300, 300};
  c.dropout_rate = 0.0;
  c.use_sasm = false;
  return c;
}

NetworkConfig NetworkConfig::nodule_default() {
  NetworkConfig c;
  c.kind = NetKind::nodule;
  c.stage_channels = {16, 32, 64, 128};
  c.input_spatial = {64, 64, 64};
  c.sasm_window = {2, 2, 2};
  c.dropout_rate = 0.2;
  return c;
}

Index3 NetworkConfig::padded_spatial() const {
  auto up16 = [](std::int64_t v) { return (v + 15) / 16 * 16; };
  return {up16(input_spatial.d), up16(input_spatial.h), up16(input_spatial.w)};
}

void NetworkConfig::validate() const {
  for (auto c : stage_channels)
    if (c <= 0) throw ValidationError("stage_channels must be positive");
  if (in_channels <= 0) throw ValidationError("in_channels must be positive");
  if (output_channels != 1) throw ValidationError("output_channels must be 1");
  if (input_spatial.d <= 0 || input_spatial.h <= 0 || input_spatial.w <= 0)
    throw ValidationError("input_geometry spatial dims must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout_rate must lie in [0,1)");
  if (kind == NetKind::nodule) {
    const auto& s = input_spatial;
    if (s.d % 16 != 0 || s.h % 16 != 0 || s.w % 16 != 0)
      throw ValidationError("nodule net input " + index3_to_string(s) + " must be divisible by 16");
    if (use_sasm) {
      const Index3 b{s.d / 16, s.h / 16, s.w / 16};
      const auto& w = sasm_window;
      if (w.d <= 0 || w.h <= 0 || w.w <= 0 || b.d % w.d != 0 || b.h % w.h != 0 || b.w % w.w != 0)
        throw ValidationError("bottleneck " + index3_to_string(b) + " not divisible by sasm_window " +
                              index3_to_string(w));
    }
  }
}

nlohmann::json to_json(const NetworkConfig& c) {
  return {{"net", net_kind_name(c.kind)},
          {"stage_channels", c.stage_channels},
          {"input_geometry", {c.in_channels, c.input_spatial.d, c.input_spatial.h, c.input_spatial.w}},
          {"sasm_window", {c.sasm_window.d, c.sasm_window.h, c.sasm_window.w}},
          {"dropout_rate", c.dropout_rate},
          {"output_channels", c.output_channels},
          {"use_sasm", c.use_sasm}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  try {
    const NetKind kind = parse_net_kind(j.value("net", std::string("nodule")));
    NetworkConfig c = kind == NetKind::lung ? NetworkConfig::lung_default() : NetworkConfig::nodule_default();
    if (j.contains("stage_channels")) {
      const auto v = j.at("stage_channels").get<std::vector<std::int64_t>>();
      if (v.size() != 4) throw ValidationError("stage_channels must list exactly 4 widths");
      std::copy(v.begin(), v.end(), c.stage_channels.begin());
    }
    if (j.contains("input_geometry")) {
      const auto v = j.at("input_geometry").get<std::vector<std::int64_t>>();
      if (v.size() != 4) throw ValidationError("input_geometry must be [C, D, H, W]");
      c.in_channels = v[0];
      c.input_spatial = {v[1], v[2], v[3]};
    }
    if (j.contains("sasm_window")) {
      const auto v = j.at("sasm_window").get<std::vector<std::int64_t>>();
      if (v.size() != 3) throw ValidationError("sasm_window must be [wd, wh, ww]");
      c.sasm_window = {v[0], v[1], v[2]};
    }
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.output_channels = j.value("output_channels", c.output_channels);
    c.use_sasm = j.value("use_sasm", c.use_sasm);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("network config: ") + e.what());
  }
}

template <typename T>
void SegmentationNet<T>::check_input(const Tensor5<T>& x) const {
  const auto& s = x.shape();
  if (s[1] != config_.in_channels || spatial_of(s) != config_.input_spatial)
    throw ShapeError("network input " + shape_to_string(s) + " does not match input_geometry (" +
                     std::to_string(config_.in_channels) + "," + std::to_string(config_.input_spatial.d) + "," +
                     std::to_string(config_.input_spatial.h) + "," + std::to_string(config_.input_spatial.w) + ")");
  if (s[0] < 1) throw ShapeError("network input has an empty batch");
}

// ------------------------------------------------------ Attention-ResUNet

namespace {

ConvSpec upsample2(std::int64_t cin, std::int64_t cout) {
  ConvSpec s;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = {2, 2, 2};
  s.stride = {2, 2, 2};
  return s;
}

}  // namespace

template <typename T>
AttentionResUNet<T>::AttentionResUNet(const NetworkConfig& c, Rng& rng) : SegmentationNet<T>(c) {
  c.validate();
  if (c.kind != NetKind::lung) throw ValidationError("AttentionResUNet needs a lung config");
  const auto& ch = c.stage_channels;
  const std::int64_t cb = c.bottleneck_channels();
  stem_conv_ = Conv3dLayer<T>(ConvSpec::cube(c.in_channels, ch[0], 3, 2), false, rng);
  stem_bn_ = BatchNorm3dLayer<T>(ch[0]);
  for (std::size_t i = 0; i < 4; ++i)
    encoders_[i] = ResidualBlock<T>(ch[i], i < 3 ? ch[i + 1] : cb, 2, rng);
  bottleneck_ = ResidualBlock<T>(cb, cb, 1, rng);
  for (std::size_t s = 4; s-- > 0;) {
    const std::int64_t prev = s == 3 ? cb : ch[s + 1];
    up_[s] = Conv3dLayer<T>(upsample2(prev, ch[s]), true, rng);
    up_conv_[s] = Conv3dLayer<T>(ConvSpec::cube(ch[s], ch[s], 3, 2), false, rng);
    gates_[s] = AttentionGate<T>(ch[s], prev, rng);
    decoders_[s] = ResidualBlock<T>(2 * ch[s], ch[s], 1, rng);
  }
  head_conv_ = Conv3dLayer<T>(ConvSpec::cube(ch[0], 1, 3), false, rng);
  post_conv1_ = Conv3dLayer<T>(ConvSpec::cube(1, 1, 3), false, rng);
  post_conv2_ = Conv3dLayer<T>(ConvSpec::cube(1, 1, 3), false, rng);
}

template <typename T>
Tensor5<T> AttentionResUNet<T>::forward(const Tensor5<T>& x, Mode mode, Rng& /*rng*/) {
  this->check_input(x);
  auto& tr = this->trace_;
  input_shape_ = x.shape();
  Tensor5<T> xp = pad3d(x, this->config_.padded_spatial());
  stem_pre_ = stem_bn_.forward(stem_conv_.forward(xp), mode);
  tr.encoder[0] = activation(stem_pre_, Activation::relu);
  for (std::size_t i = 1; i < 4; ++i) tr.encoder[i] = encoders_[i - 1].forward(tr.encoder[i - 1], mode);
  tr.bottleneck = bottleneck_.forward(encoders_[3].forward(tr.encoder[3], mode), mode);

  const Tensor5<T>* prev = &tr.bottleneck;
  for (std::size_t s = 4; s-- > 0;) {
    up_conv_pre_[s] = up_conv_[s].forward(up_[s].forward(*prev));
    tr.attention[s] = gates_[s].forward(tr.encoder[s], *prev);
    tr.decoder[s] = decoders_[s].forward(
        concat_channels(tr.attention[s], activation(up_conv_pre_[s], Activation::relu)), mode);
    prev = &tr.decoder[s];
  }
  Tensor5<T> h = head_conv_.forward(*prev);
  head_shape_ = h.shape();
  h = post_conv2_.forward(post_conv1_.forward(center_crop3d(h, this->config_.input_spatial)));
  prob_ = activation(h, Activation::sigmoid);
  return prob_;
}

template <typename T>
Tensor5<T> AttentionResUNet<T>::backward(const Tensor5<T>& grad_prob) {
  auto& tr = this->trace_;
  Tensor5<T> g = activation_backward(Activation::sigmoid, prob_, prob_, grad_prob);
  g = post_conv1_.backward(post_conv2_.backward(g));
  g = head_conv_.backward(center_crop3d_backward(g, head_shape_));

  std::array<Tensor5<T>, 4> g_enc;
  for (std::size_t s = 0; s < 4; ++s) {
    auto [g_att, g_dec] = split_channels(decoders_[s].backward(g), tr.attention[s].channels());
    auto [g_skip, g_prev] = gates_[s].backward(g_att);
    g_enc[s] = std::move(g_skip);
    g_dec = activation_backward(Activation::relu, up_conv_pre_[s], up_conv_pre_[s], g_dec);
    g_prev += up_[s].backward(up_conv_[s].backward(g_dec));
    g = std::move(g_prev);
  }
  g = encoders_[3].backward(bottleneck_.backward(g));
  for (std::size_t i = 4; i-- > 1;) {
    g += g_enc[i];
    g = encoders_[i - 1].backward(g);
  }
  g += g_enc[0];
  g = activation_backward(Activation::relu, stem_pre_, stem_pre_, g);
  g = stem_conv_.backward(stem_bn_.backward(g));
  return pad3d_backward(g, spatial_of(input_shape_));
}

template <typename T>
ParamList<T> AttentionResUNet<T>::parameters() {
  ParamList<T> out;
  stem_conv_.collect(out, "stem.conv");
  stem_bn_.collect(out, "stem.bn");
  for (std::size_t i = 0; i < 4; ++i) encoders_[i].collect(out, "enc" + std::to_string(i + 1));
  bottleneck_.collect(out, "bottleneck");
  for (std::size_t s = 4; s-- > 0;) {
    const std::string p = "dec" + std::to_string(s + 1);
    up_[s].collect(out, p + ".up");
    up_conv_[s].collect(out, p + ".up_conv");
    gates_[s].collect(out, p + ".gate");
    decoders_[s].collect(out, p + ".res");
  }
  head_conv_.collect(out, "head.conv");
  post_conv1_.collect(out, "head.post1");
  post_conv2_.collect(out, "head.post2");
  return out;
}

// ----------------------------------------------------- EfficientSASM-UNet

template <typename T>
EfficientSasmUNet<T>::EfficientSasmUNet(const NetworkConfig& c, Rng& rng) : SegmentationNet<T>(c) {
  c.validate();
  if (c.kind != NetKind::nodule) throw ValidationError("EfficientSasmUNet needs a nodule config");
  const auto& ch = c.stage_channels;
  const std::int64_t cb = c.bottleneck_channels();
  for (std::size_t i = 0; i < 4; ++i)
    encoders_[i] = ConvBlock<T>(i == 0 ? c.in_channels : ch[i - 1], ch[i], c.dropout_rate, rng);
  bottleneck_ = ConvBlock<T>(ch[3], cb, c.dropout_rate, rng);
  if (c.use_sasm) sasm_ = EfficientSASM<T>(cb, c.sasm_window, rng);
  for (std::size_t s = 4; s-- > 0;) {
    up_[s] = Conv3dLayer<T>(upsample2(s == 3 ? cb : ch[s + 1], ch[s]), true, rng);
    decoders_[s] = ConvBlock<T>(2 * ch[s], ch[s], c.dropout_rate, rng);
  }
  head_ = Conv3dLayer<T>(ConvSpec::cube(ch[0], 1, 1), false, rng);
}

template <typename T>
Tensor5<T> EfficientSasmUNet<T>::forward(const Tensor5<T>& x, Mode mode, Rng& rng) {
  this->check_input(x);
  auto& tr = this->trace_;
  const WindowSpec pool{2, 2, 2};
  const Tensor5<T>* h = &x;
  Tensor5<T> pooled;
  for (std::size_t i = 0; i < 4; ++i) {
    tr.encoder[i] = encoders_[i].forward(*h, mode, rng);
    pool_input_shapes_[i] = tr.encoder[i].shape();
    auto r = maxpool3d(tr.encoder[i], pool);
    pooled = std::move(r.output);
    pool_argmax_[i] = std::move(r.argmax);
    h = &pooled;
  }
  tr.bottleneck = bottleneck_.forward(*h, mode, rng);
  if (this->config_.use_sasm) tr.bottleneck = sasm_.forward(tr.bottleneck);
  const Tensor5<T>* prev = &tr.bottleneck;
  for (std::size_t s = 4; s-- > 0;) {
    tr.decoder[s] = decoders_[s].forward(concat_channels(tr.encoder[s], up_[s].forward(*prev)), mode, rng);
    prev = &tr.decoder[s];
  }
  prob_ = activation(head_.forward(*prev), Activation::sigmoid);
  return prob_;
}

template <typename T>
Tensor5<T> EfficientSasmUNet<T>::backward(const Tensor5<T>& grad_prob) {
  Tensor5<T> g = head_.backward(activation_backward(Activation::sigmoid, prob_, prob_, grad_prob));
  std::array<Tensor5<T>, 4> g_skip;
  for (std::size_t s = 0; s < 4; ++s) {
    auto [gs, gu] = split_channels(decoders_[s].backward(g), this->config_.stage_channels[s]);
    g_skip[s] = std::move(gs);
    g = up_[s].backward(gu);
  }
  if (this->config_.use_sasm) g = sasm_.backward(g);
  g = bottleneck_.backward(g);
  for (std::size_t i = 4; i-- > 0;) {
    g = maxpool3d_backward(pool_input_shapes_[i], pool_argmax_[i], g);
    g += g_skip[i];
    g = encoders_[i].backward(g);
  }
  return g;
}

template <typename T>
ParamList<T> EfficientSasmUNet<T>::parameters() {
  ParamList<T> out;
  for (std::size_t i = 0; i < 4; ++i) encoders_[i].collect(out, "enc" + std::to_string(i + 1));
  bottleneck_.collect(out, "bottleneck");
  if (this->config_.use_sasm) sasm_.collect(out, "sasm");
  for (std::size_t s = 4; s-- > 0;) {
    const std::string p = "dec" + std::to_string(s + 1);
    up_[s].collect(out, p + ".up");
    decoders_[s].collect(out, p + ".block");
  }
  head_.collect(out, "head");
  return out;
}

template <typename T>
std::unique_ptr<SegmentationNet<T>> make_network(const NetworkConfig& c, Rng& init_rng) {
  if (c.kind == NetKind::lung) return std::make_unique<AttentionResUNet<T>>(c, init_rng);
  return std::make_unique<EfficientSasmUNet<T>>(c, init_rng);
}

template <typename T>
Tensor5<T> threshold_probabilities(const Tensor5<T>& prob, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must lie in (0,1)");
  Tensor5<T> mask(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i)
    mask[i] = static_cast<double>(prob[i]) >= threshold ? T(1) : T(0);
  return mask;
}

template <typename T>
Tensor5<T> predict_volume(SegmentationNet<T>& net, const Tensor5<T>& volume, double threshold) {
  Rng unused(0);
  return threshold_probabilities(net.forward(volume, Mode::eval, unused), threshold);
}

#define LUNGSEG_INSTANTIATE(T)                                                                \
  template class SegmentationNet<T>;                                                          \
  template class AttentionResUNet<T>;                                                         \
  template class EfficientSasmUNet<T>;                                                        \
  template std::unique_ptr<SegmentationNet<T>> make_network(const NetworkConfig&, Rng&);      \
  template Tensor5<T> threshold_probabilities(const Tensor5<T>&, double);                     \
  template Tensor5<T> predict_volume(SegmentationNet<T>&, const Tensor5<T>&, double);

LUNGSEG_INSTANTIATE(float)
LUNGSEG_INSTANTIATE(double)

}  // namespace lungseg
