#include "lungseg/loss_metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "lungseg/errors.hpp"

namespace lungseg {

namespace {

template <typename T>
void check_pair(const Tensor5<T>& p, const Tensor5<T>& m, const char* what) {
  if (!p.same_shape(m))
    throw ShapeError(std::string(what) + ": prediction " + shape_to_string(p.shape()) + " vs mask " +
                     shape_to_string(m.shape()));
  if (p.size() == 0) throw ShapeError(std::string(what) + ": empty input");
}

struct DiceSums {
  double inter = 0.0;
  double denom = 0.0;
};

template <typename T>
DiceSums dice_sums(const Tensor5<T>& p, const Tensor5<T>& m) {
  DiceSums s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], mi = m[i];
    s.inter += mi * pi;
    s.denom += mi * mi + pi * pi;
  }
  s.denom += kDiceSmooth;
  return s;
}

}  // namespace

template <typename T>
double bce_loss(const Tensor5<T>& p, const Tensor5<T>& m) {
  check_pair(p, m, "bce_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::clamp(static_cast<double>(p[i]), kBceClamp, 1.0 - kBceClamp);
    const double mi = m[i];
    acc += mi * std::log(pi) + (1.0 - mi) * std::log(1.0 - pi);
  }
  return -acc / static_cast<double>(p.size());
}

template <typename T>
Tensor5<T> bce_loss_grad(const Tensor5<T>& p, const Tensor5<T>& m) {
  check_pair(p, m, "bce_loss_grad");
  Tensor5<T> g(p.shape());
  const double inv_n = 1.0 / static_cast<double>(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], mi = m[i];
    if (pi < kBceClamp || pi > 1.0 - kBceClamp) continue;
    g[i] = static_cast<T>(-inv_n * (mi / pi - (1.0 - mi) / (1.0 - pi)));
  }
  return g;
}

template <typename T>
double dice_loss(const Tensor5<T>& p, const Tensor5<T>& m) {
  check_pair(p, m, "dice_loss");
  const auto s = dice_sums(p, m);
  return 1.0 - 2.0 * s.inter / s.denom;
}

template <typename T>
Tensor5<T> dice_loss_grad(const Tensor5<T>& p, const Tensor5<T>& m) {
  check_pair(p, m, "dice_loss_grad");
  const auto s = dice_sums(p, m);
  const double inv_sq = 1.0 / (s.denom * s.denom);
  Tensor5<T> g(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], mi = m[i];
    g[i] = static_cast<T>(-2.0 * (mi * s.denom - 2.0 * pi * s.inter) * inv_sq);
  }
  return g;
}

template <typename T>
LossValue combined_loss(const Tensor5<T>& p, const Tensor5<T>& m) {
  LossValue v;
  v.bce = bce_loss(p, m);
  v.dice = dice_loss(p, m);
  v.total = v.bce + v.dice;
  return v;
}

template <typename T>
Tensor5<T> combined_loss_grad(const Tensor5<T>& p, const Tensor5<T>& m) {
  Tensor5<T> g = bce_loss_grad(p, m);
  g += dice_loss_grad(p, m);
  return g;
}

template <typename T>
ConfusionCounts confusion_counts(const Tensor5<T>& pred, const Tensor5<T>& m) {
  check_pair(pred, m, "seg_metrics");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T a = pred[i], b = m[i];
    if ((a != T(0) && a != T(1)) || (b != T(0) && b != T(1)))
      throw ValidationError("seg_metrics: inputs must be binary (found value " +
                            std::to_string(static_cast<double>(a != T(0) && a != T(1) ? a : b)) + ")");
    const bool pa = a == T(1), mb = b == T(1);
    if (pa && mb) ++c.tp;
    else if (pa) ++c.fp;
    else if (mb) ++c.fn;
    else ++c.tn;
  }
  return c;
}

SegMetrics metrics_from_counts(const ConfusionCounts& c) {
  SegMetrics s;
  if (c.tp + c.fp + c.fn == 0) {
    s.dice_score = s.iou = s.precision = s.recall = 1.0;
    return s;
  }
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  s.dice_score = 2.0 * tp / (2.0 * tp + fp + fn);
  s.iou = tp / (tp + fp + fn);
  s.precision = c.tp + c.fp == 0 ? 0.0 : tp / (tp + fp);
  s.recall = c.tp + c.fn == 0 ? 0.0 : tp / (tp + fn);
  return s;
}

template <typename T>
SegMetrics seg_metrics(const Tensor5<T>& pred, const Tensor5<T>& m) {
  return metrics_from_counts(confusion_counts(pred, m));
}

SegMetrics mean_metrics(const std::vector<SegMetrics>& all) {
  SegMetrics s;
  if (all.empty()) return s;
  for (const auto& m : all) {
    s.dice_score += m.dice_score;
    s.iou += m.iou;
    s.precision += m.precision;
    s.recall += m.recall;
  }
  const double n = static_cast<double>(all.size());
  s.dice_score /= n;
  s.iou /= n;
  s.precision /= n;
  s.recall /= n;
  return s;
}

nlohmann::json to_json(const SegMetrics& s) {
  return {{"dice", s.dice_score}, {"iou", s.iou}, {"precision", s.precision}, {"recall", s.recall}};
}

nlohmann::json metrics_report(const std::vector<std::string>& ids, const std::vector<SegMetrics>& per_volume) {
  if (ids.size() != per_volume.size()) throw ValidationError("metrics_report: ids and metrics differ in length");
  nlohmann::json vols = nlohmann::json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto j = to_json(per_volume[i]);
    j["id"] = ids[i];
    vols.push_back(std::move(j));
  }
  return {{"volumes", std::move(vols)}, {"mean", to_json(mean_metrics(per_volume))}};
}

std::uint8_t probability_to_byte(double p) {
  if (!(p > 0.0)) return 0;
  if (p >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::floor(255.0 * p + 0.5));
}

std::array<std::uint8_t, 3> heat_color(double p) {
  const double x = std::isnan(p) ? 0.0 : std::clamp(p, 0.0, 1.0);
  auto ramp = [](double v) { return std::clamp(1.5 - std::abs(v), 0.0, 1.0); };
  const double r = ramp(4.0 * x - 3.0), g = ramp(4.0 * x - 2.0), b = ramp(4.0 * x - 1.0);
  return {probability_to_byte(r), probability_to_byte(g), probability_to_byte(b)};
}

template <typename T>
void export_heatmap(const Tensor5<T>& p, std::int64_t slice_index, const std::filesystem::path& path,
                    HeatmapStyle style) {
  if (p.size() == 0) throw ShapeError("export_heatmap: empty volume");
  const std::int64_t D = p.dim(2), H = p.dim(3), W = p.dim(4);
  if (slice_index < 0 || slice_index >= D)
    throw ValidationError("export_heatmap: slice " + std::to_string(slice_index) + " outside [0, " +
                          std::to_string(D) + ")");
  const bool color = style == HeatmapStyle::color;
  std::vector<std::uint8_t> pixels;
  pixels.reserve(static_cast<std::size_t>(H * W * (color ? 3 : 1)));
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      const double v = p(0, 0, slice_index, h, w);
      if (color) {
        const auto rgb = heat_color(v);
        pixels.insert(pixels.end(), rgb.begin(), rgb.end());
      } else {
        pixels.push_back(probability_to_byte(v));
      }
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (color ? "P6" : "P5") << '\n' << W << ' ' << H << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

#define LUNGSEG_INSTANTIATE(T)                                                                  \
  template double bce_loss(const Tensor5<T>&, const Tensor5<T>&);                              \
  template Tensor5<T> bce_loss_grad(const Tensor5<T>&, const Tensor5<T>&);                     \
  template double dice_loss(const Tensor5<T>&, const Tensor5<T>&);                             \
  template Tensor5<T> dice_loss_grad(const Tensor5<T>&, const Tensor5<T>&);                    \
  template LossValue combined_loss(const Tensor5<T>&, const Tensor5<T>&);                      \
  template Tensor5<T> combined_loss_grad(const Tensor5<T>&, const Tensor5<T>&);                \
  template ConfusionCounts confusion_counts(const Tensor5<T>&, const Tensor5<T>&);             \
  template SegMetrics seg_metrics(const Tensor5<T>&, const Tensor5<T>&);                       \
  template void export_heatmap(const Tensor5<T>&, std::int64_t, const std::filesystem::path&, \
                               HeatmapStyle);

LUNGSEG_INSTANTIATE(float)
LUNGSEG_INSTANTIATE(double)

}  // namespace lungseg
