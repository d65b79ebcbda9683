#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungseg/data.hpp"
#include "lungseg/loss_metrics.hpp"
#include "lungseg/networks.hpp"

namespace lungseg {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<Tensor5<T>> m;  // one per trainable parameter, in ParamList order
  std::vector<Tensor5<T>> v;

  static AdamState make(const ParamList<T>& params, const AdamConfig& config = {});
};

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient. Moments are updated and applied in double.
template <typename T>
void adam_step(ParamList<T>& params, AdamState<T>& state);

struct TrainConfig {
  NetworkConfig net = NetworkConfig::nodule_default();
  AdamConfig adam;
  std::int64_t epochs = 100;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool normalize = true;  // apply the intensity window to stored images
  IntensityWindow window;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; "net" holds a network config object.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_dice = 0.0;
  double val_iou = 0.0;
  double best_val_dice = 0.0;
};

struct TrainResult {
  std::unique_ptr<SegmentationNet<float>> net;
  AdamState<float> adam;
  std::vector<EpochRecord> history;
  std::int64_t epochs_completed = 0;
  double best_val_dice = -1.0;
};

struct TrainPaths {
  std::filesystem::path data_dir;  // where the manifest's samples live
  std::filesystem::path out_dir;   // log.csv, best/, last/
  /// Checkpoint directory to continue from; empty starts fresh.
  std::filesystem::path resume_from;
};

/// Called after every epoch; lets callers report progress.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Batch-1 training over manifest.train with combined loss and Adam, val
/// Dice after each epoch, best-by-val-Dice checkpoint in out/best and the
/// latest state in out/last. Both checkpoints carry everything needed to
/// resume bit-identically.
TrainResult train(const SplitManifest& manifest, const TrainConfig& config, const TrainPaths& paths,
                  const EpochCallback& on_epoch = {});

/// Loads a sample and applies the configured intensity normalization.
Sample load_training_sample(const std::filesystem::path& dir, const std::string& id, const TrainConfig& config);

struct EvalResult {
  std::vector<std::string> ids;
  std::vector<SegMetrics> per_sample;
  SegMetrics mean;

  nlohmann::json report() const { return metrics_report(ids, per_sample); }
};

/// predict_volume + seg_metrics per sample; arithmetic-mean aggregate.
EvalResult evaluate(SegmentationNet<float>& net, const std::filesystem::path& data_dir,
                    const std::vector<std::string>& ids, const TrainConfig& config);

/// Writes params, BN statistics, Adam moments and run metadata.
void save_checkpoint(const std::filesystem::path& dir, SegmentationNet<float>& net, const AdamState<float>& adam,
                     const TrainConfig& config, const std::vector<EpochRecord>& history, double best_val_dice);

struct LoadedCheckpoint {
  TrainConfig config;
  std::unique_ptr<SegmentationNet<float>> net;
  AdamState<float> adam;
  std::vector<EpochRecord> history;
  double best_val_dice = -1.0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// "epoch,train_loss,val_dice,val_iou" followed by one fixed-precision row per epoch.
std::string format_log(const std::vector<EpochRecord>& history);

/// Mixes (seed, a, b) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

}  // namespace lungseg
