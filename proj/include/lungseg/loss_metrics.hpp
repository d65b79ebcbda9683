#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungseg/tensor.hpp"

namespace lungseg {

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kDiceSmooth = 1e-6;

struct LossValue {
  double bce = 0.0;
  double dice = 0.0;
  double total = 0.0;
};

/// Mean binary cross-entropy with p clamped to [1e-7, 1-1e-7].
template <typename T>
double bce_loss(const Tensor5<T>& p, const Tensor5<T>& m);
/// dL/dp; zero wherever the clamp is active.
template <typename T>
Tensor5<T> bce_loss_grad(const Tensor5<T>& p, const Tensor5<T>& m);

/// 1 - 2*sum(m p) / (sum(m^2) + sum(p^2) + 1e-6).
template <typename T>
double dice_loss(const Tensor5<T>& p, const Tensor5<T>& m);
template <typename T>
Tensor5<T> dice_loss_grad(const Tensor5<T>& p, const Tensor5<T>& m);

template <typename T>
LossValue combined_loss(const Tensor5<T>& p, const Tensor5<T>& m);
/// Elementwise sum of the bce and dice gradients.
template <typename T>
Tensor5<T> combined_loss_grad(const Tensor5<T>& p, const Tensor5<T>& m);

struct SegMetrics {
  double dice_score = 0.0;
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Both inputs must hold only 0 and 1.
template <typename T>
ConfusionCounts confusion_counts(const Tensor5<T>& pred, const Tensor5<T>& m);
SegMetrics metrics_from_counts(const ConfusionCounts& c);
template <typename T>
SegMetrics seg_metrics(const Tensor5<T>& pred, const Tensor5<T>& m);

/// Arithmetic mean of each field; all zeros for an empty list.
SegMetrics mean_metrics(const std::vector<SegMetrics>& all);

nlohmann::json to_json(const SegMetrics& s);
/// {"volumes": [{"id", "dice", "iou", "precision", "recall"}...], "mean": {...}}
nlohmann::json metrics_report(const std::vector<std::string>& ids, const std::vector<SegMetrics>& per_volume);

enum class HeatmapStyle { gray, color };

/// 8-bit value for a probability: round-half-up of 255*p, p clamped to [0,1].
std::uint8_t probability_to_byte(double p);
/// Blue (p=0) through cyan, yellow to red (p=1).
std::array<std::uint8_t, 3> heat_color(double p);

/// Writes axial slice `slice_index` of batch 0, channel 0 as binary PGM (gray)
/// or PPM (color).
template <typename T>
void export_heatmap(const Tensor5<T>& p, std::int64_t slice_index, const std::filesystem::path& path,
                    HeatmapStyle style = HeatmapStyle::gray);

}  // namespace lungseg
