#include "lungseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace lungseg {

template <typename T>
AdamState<T> AdamState<T>::make(const ParamList<T>& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params)
    if (p.trainable()) {
      s.m.emplace_back(p.value->shape());
      s.v.emplace_back(p.value->shape());
    }
  return s;
}

template <typename T>
void adam_step(ParamList<T>& params, AdamState<T>& state) {
  const auto& c = state.config;
  std::size_t k = 0;
  for (const auto& p : params)
    if (p.trainable()) {
      if (k >= state.m.size()) throw ValidationError("adam_step: more trainable tensors than moment buffers");
      if (!p.grad->same_shape(*p.value) || !state.m[k].same_shape(*p.value))
        throw ShapeError("adam_step: shape mismatch for " + p.name);
      ++k;
    }
  if (k != state.m.size()) throw ValidationError("adam_step: fewer trainable tensors than moment buffers");

  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  k = 0;
  for (auto& p : params) {
    if (!p.trainable()) continue;
    auto& theta = *p.value;
    const auto& g = *p.grad;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
    }
    ++k;
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(ParamList<float>&, AdamState<float>&);
template void adam_step(ParamList<double>&, AdamState<double>&);

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  net.validate();
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (!(adam.lr > 0.0)) throw ValidationError("lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ValidationError("beta1 and beta2 must lie in [0,1)");
  if (!(adam.eps > 0.0)) throw ValidationError("eps must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must lie in (0,1)");
  if (!(window.hi > window.lo)) throw ValidationError("intensity_window needs hi > lo");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"net", to_json(c.net)},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"threshold", c.threshold},
          {"normalize", c.normalize},
          {"intensity_window", {c.window.lo, c.window.hi}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    if (j.contains("net")) c.net = network_config_from_json(j.at("net"));
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.threshold = j.value("threshold", c.threshold);
    c.normalize = j.value("normalize", c.normalize);
    if (j.contains("intensity_window")) {
      const auto w = j.at("intensity_window").get<std::vector<double>>();
      if (w.size() != 2) throw ValidationError("intensity_window must be [lo, hi]");
      c.window = {w[0], w[1]};
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

// --------------------------------------------------------------- samples

Sample load_training_sample(const std::filesystem::path& dir, const std::string& id, const TrainConfig& config) {
  Sample s = load_sample(dir, id);
  if (config.normalize) s.image = normalize_intensity(s.image, config.window);
  const auto& n = config.net;
  if (s.image.channels() != n.in_channels || spatial_of(s.image.shape()) != n.input_spatial)
    throw ShapeError("sample " + id + " has shape " + shape_to_string(s.image.shape()) +
                     ", network expects input_geometry (" + std::to_string(n.in_channels) + "," +
                     std::to_string(n.input_spatial.d) + "," + std::to_string(n.input_spatial.h) + "," +
                     std::to_string(n.input_spatial.w) + ")");
  return s;
}

EvalResult evaluate(SegmentationNet<float>& net, const std::filesystem::path& data_dir,
                    const std::vector<std::string>& ids, const TrainConfig& config) {
  EvalResult r;
  for (const auto& id : ids) {
    const Sample s = load_training_sample(data_dir, id, config);
    const auto pred = predict_volume(net, s.image, config.threshold);
    r.ids.push_back(id);
    r.per_sample.push_back(seg_metrics(pred, s.mask));
  }
  r.mean = mean_metrics(r.per_sample);
  return r;
}

// ------------------------------------------------------------ checkpoints

namespace {

ParamList<float> checkpoint_tensors(SegmentationNet<float>& net, AdamState<float>& adam) {
  ParamList<float> all = net.parameters();
  std::vector<std::string> names;
  for (const auto& p : all)
    if (p.trainable()) names.push_back(p.name);
  if (names.size() != adam.m.size()) throw ValidationError("checkpoint: Adam state does not match the network");
  for (std::size_t k = 0; k < names.size(); ++k) {
    all.push_back({"adam.m." + names[k], "adam_m", &adam.m[k], nullptr});
    all.push_back({"adam.v." + names[k], "adam_v", &adam.v[k], nullptr});
  }
  return all;
}

nlohmann::json history_json(const std::vector<EpochRecord>& h) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : h)
    a.push_back({{"epoch", r.epoch},
                 {"train_loss", r.train_loss},
                 {"val_dice", r.val_dice},
                 {"val_iou", r.val_iou},
                 {"best_val_dice", r.best_val_dice}});
  return a;
}

std::vector<EpochRecord> history_from_json(const nlohmann::json& a) {
  std::vector<EpochRecord> h;
  for (const auto& r : a)
    h.push_back({r.at("epoch").get<std::int64_t>(), r.at("train_loss").get<double>(), r.at("val_dice").get<double>(),
                 r.at("val_iou").get<double>(), r.at("best_val_dice").get<double>()});
  return h;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, SegmentationNet<float>& net, const AdamState<float>& adam,
                     const TrainConfig& config, const std::vector<EpochRecord>& history, double best_val_dice) {
  AdamState<float> copy = adam;
  const nlohmann::json extra{{"config", to_json(config)},
                             {"adam_t", adam.t},
                             {"epoch", history.empty() ? 0 : history.back().epoch},
                             {"seed", config.seed},
                             {"best_val_dice", best_val_dice},
                             {"history", history_json(history)}};
  save_parameters(dir, checkpoint_tensors(net, copy), extra);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_checkpoint_manifest(dir);
  LoadedCheckpoint ck;
  try {
    const auto& extra = manifest.at("extra");
    ck.config = train_config_from_json(extra.at("config"));
    Rng unused(0);
    ck.net = make_network<float>(ck.config.net, unused);
    ck.adam = AdamState<float>::make(ck.net->parameters(), ck.config.adam);
    auto all = checkpoint_tensors(*ck.net, ck.adam);
    load_parameters(dir, all);
    ck.adam.t = extra.at("adam_t").get<std::int64_t>();
    ck.history = history_from_json(extra.at("history"));
    ck.best_val_dice = extra.at("best_val_dice").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + dir.string() + ": " + e.what());
  }
  return ck;
}

std::string format_log(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_dice,val_iou\n";
  char line[128];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%lld,%.8f,%.8f,%.8f\n", static_cast<long long>(r.epoch), r.train_loss,
                  r.val_dice, r.val_iou);
    out += line;
  }
  return out;
}

// ------------------------------------------------------------------ train

TrainResult train(const SplitManifest& manifest, const TrainConfig& config, const TrainPaths& paths,
                  const EpochCallback& on_epoch) {
  config.validate();
  TrainResult res;
  if (!paths.resume_from.empty()) {
    auto ck = load_checkpoint(paths.resume_from);
    if (to_json(ck.config.net) != to_json(config.net) || ck.config.seed != config.seed)
      throw ValidationError("checkpoint " + paths.resume_from.string() + " was trained with a different network or seed");
    res.net = std::move(ck.net);
    res.adam = std::move(ck.adam);
    res.adam.config = config.adam;
    res.history = std::move(ck.history);
    res.best_val_dice = ck.best_val_dice;
  } else {
    Rng init(derive_seed(config.seed, 0, 0));
    res.net = make_network<float>(config.net, init);
    res.adam = AdamState<float>::make(res.net->parameters(), config.adam);
  }
  res.epochs_completed = static_cast<std::int64_t>(res.history.size());
  ParamList<float> params = res.net->parameters();

  if (config.epochs > res.epochs_completed) {
    if (manifest.train.empty()) throw ValidationError("training split is empty");
    if (manifest.val.empty()) throw ValidationError("validation split is empty");
  }
  std::error_code ec;
  std::filesystem::create_directories(paths.out_dir, ec);
  if (ec) throw IoError("cannot create " + paths.out_dir.string() + ": " + ec.message());
  const auto log_path = paths.out_dir / "log.csv";
  write_text(log_path, format_log(res.history));

  for (std::int64_t epoch = res.epochs_completed; epoch < config.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch + 1);
    std::vector<std::string> order = manifest.train;
    Rng shuffle_rng(derive_seed(config.seed, e, 1));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Rng dropout_rng(derive_seed(config.seed, e, 2));

    double loss_sum = 0.0;
    for (const auto& id : order) {
      const Sample s = load_training_sample(paths.data_dir, id, config);
      zero_grads(params);
      const auto prob = res.net->forward(s.image, Mode::train, dropout_rng);
      loss_sum += combined_loss(prob, s.mask).total;
      res.net->backward(combined_loss_grad(prob, s.mask));
      adam_step(params, res.adam);
    }

    const EvalResult val = evaluate(*res.net, paths.data_dir, manifest.val, config);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_dice = val.mean.dice_score;
    rec.val_iou = val.mean.iou;
    const bool improved = rec.val_dice > res.best_val_dice;
    if (improved) res.best_val_dice = rec.val_dice;
    rec.best_val_dice = res.best_val_dice;
    res.history.push_back(rec);
    res.epochs_completed = rec.epoch;

    if (improved) save_checkpoint(paths.out_dir / "best", *res.net, res.adam, config, res.history, res.best_val_dice);
    save_checkpoint(paths.out_dir / "last", *res.net, res.adam, config, res.history, res.best_val_dice);
    write_text(log_path, format_log(res.history));
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

}  // namespace lungseg
