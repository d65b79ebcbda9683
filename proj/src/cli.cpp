#include "lungseg/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lungseg/gradcheck.hpp"
#include "lungseg/train.hpp"

namespace lungseg {

namespace {

std::vector<std::int64_t> parse_ints(const std::string& flag, const std::string& text) {
  std::vector<std::int64_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    std::int64_t x = 0;
    try {
      x = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ValidationError(flag + ": \"" + text + "\" is not a list of integers");
    v.push_back(x);
  }
  if (v.empty()) throw ValidationError(flag + ": empty value");
  return v;
}

/// "32" -> (32,32,32); "16,64,64" -> (16,64,64).
Index3 parse_index3(const std::string& flag, const std::string& text) {
  const auto v = parse_ints(flag, text);
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw ValidationError(flag + " takes N or D,H,W");
}

nlohmann::json read_json_file(const std::string& flag, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(flag + ": cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(flag + ": " + path + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void echo_config(std::ostream& err, const std::string& command, const nlohmann::json& j) {
  err << "[" << command << "] effective config: " << j.dump() << '\n';
}

/// Flags shared by the commands that build a training config.
struct TrainFlags {
  std::string config_path;
  std::string net;
  std::string widths;
  std::string dims;
  std::string sasm_window;
  std::optional<double> dropout;
  std::optional<bool> use_sasm;
  std::optional<std::int64_t> epochs;
  std::optional<double> lr;
  std::optional<double> threshold;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file; flags override its values");
    app->add_option("--net", net, "network: lung or nodule")->check(CLI::IsMember({"lung", "nodule"}));
    app->add_option("--widths", widths, "four encoder widths, e.g. 8,16,32,64");
    app->add_option("--dims", dims, "input spatial size N or D,H,W");
    app->add_option("--sasm-window", sasm_window, "SASM window N or D,H,W (nodule net)");
    app->add_option("--dropout", dropout, "dropout rate (nodule net)");
    app->add_option("--use-sasm", use_sasm, "enable the bottleneck attention (nodule net)");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--threshold", threshold, "probability threshold for masks");
    app->add_option("--seed", seed, "seed for every random choice");
  }

  TrainConfig resolve() const {
    nlohmann::json j = config_path.empty() ? nlohmann::json::object() : read_json_file("--config", config_path);
    if (!j.is_object()) throw ValidationError("--config: expected a JSON object");
    nlohmann::json n = j.value("net", nlohmann::json::object());
    if (!n.is_object()) throw ValidationError("--config: \"net\" must be an object");
    if (!net.empty()) n["net"] = net;
    if (!widths.empty()) n["stage_channels"] = parse_ints("--widths", widths);
    if (!dims.empty()) {
      const Index3 d = parse_index3("--dims", dims);
      const std::int64_t cin = n.contains("input_geometry") ? n["input_geometry"].at(0).get<std::int64_t>() : 1;
      n["input_geometry"] = {cin, d.d, d.h, d.w};
    }
    if (!sasm_window.empty()) {
      const Index3 w = parse_index3("--sasm-window", sasm_window);
      n["sasm_window"] = {w.d, w.h, w.w};
    }
    if (dropout) n["dropout_rate"] = *dropout;
    if (use_sasm) n["use_sasm"] = *use_sasm;
    j["net"] = n;
    if (epochs) j["epochs"] = *epochs;
    if (lr) j["lr"] = *lr;
    if (threshold) j["threshold"] = *threshold;
    if (seed) j["seed"] = *seed;
    return train_config_from_json(j);
  }
};

int command_gradcheck(const std::string& target, std::uint64_t seed, std::optional<double> tol, std::ostream& out,
                      std::ostream& err) {
  std::vector<std::string> targets;
  if (target == "all") {
    targets = gradcheck_targets();
  } else {
    const auto& known = gradcheck_targets();
    if (std::find(known.begin(), known.end(), target) == known.end())
      throw ValidationError("--target: unknown target \"" + target + "\"");
    targets.push_back(target);
  }
  echo_config(err, "gradcheck", {{"target", target}, {"seed", seed}, {"tol", tol ? nlohmann::json(*tol) : nlohmann::json("default")}});
  std::vector<GradReport> all;
  for (const auto& t : targets) {
    auto r = check_gradients(t, seed, tol.value_or(-1.0));
    all.insert(all.end(), r.begin(), r.end());
  }
  out << to_json(all).dump(2) << '\n';
  const auto failed = std::count_if(all.begin(), all.end(), [](const GradReport& r) { return !r.pass; });
  if (failed > 0) {
    err << "gradcheck: " << failed << " of " << all.size() << " gradient reports failed\n";
    return 1;
  }
  return 0;
}

int command_phantom(const std::string& kind, std::int64_t count, const std::string& dims, const std::string& out_dir,
                    const std::string& prefix, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  if (count < 1) throw ValidationError("--count must be at least 1");
  const PhantomKind k = parse_phantom_kind(kind);
  const Index3 d = parse_index3("--dims", dims);
  const std::string pre = prefix.empty() ? kind : prefix;
  echo_config(err, "phantom-gen",
              {{"kind", kind}, {"count", count}, {"dims", {d.d, d.h, d.w}}, {"out", out_dir}, {"prefix", pre}, {"seed", seed}});
  nlohmann::json ids = nlohmann::json::array();
  for (std::int64_t i = 0; i < count; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s_%03lld", pre.c_str(), static_cast<long long>(i));
    const Sample s = make_phantom(k, d, derive_seed(seed, static_cast<std::uint64_t>(i), 3), id);
    save_sample(out_dir, s);
    ids.push_back(id);
  }
  out << nlohmann::json{{"out", out_dir}, {"samples", ids}}.dump(2) << '\n';
  return 0;
}

struct PreprocessFlags {
  std::string image, mask, mode = "lung", out_dir, id, center;
  std::int64_t size = 300, half_extent = 11, block = 64;
};

int command_preprocess(const PreprocessFlags& f, std::ostream& out, std::ostream& err) {
  if (f.mode != "lung" && f.mode != "nodule") throw ValidationError("--mode must be lung or nodule");
  const std::string id = f.id.empty() ? std::filesystem::path(f.image).stem().string() : f.id;
  echo_config(err, "preprocess",
              {{"image", f.image}, {"mask", f.mask}, {"mode", f.mode}, {"out", f.out_dir}, {"id", id}, {"size", f.size},
               {"half_extent", f.half_extent}, {"block", f.block}, {"center", f.center}});
  const MetaVolume img = load_mhd(f.image);
  const MetaVolume msk = load_mhd(f.mask);
  if (!img.data.same_shape(msk.data))
    throw ShapeError("--mask: shape " + shape_to_string(msk.data.shape()) + " differs from --image " +
                     shape_to_string(img.data.shape()));
  Sample s;
  s.id = id;
  s.spacing = img.spacing;
  s.origin = img.origin;
  Tensor5<float> mask = binarize_mask(msk.data);
  nlohmann::json info{{"id", id}};
  if (f.mode == "lung") {
    if (f.size < 1) throw ValidationError("--size must be positive");
    s.image = crop_about_median(resize_inplane(img.data, f.size, f.size, ResizeKind::linear), f.half_extent);
    s.mask = crop_about_median(resize_inplane(mask, f.size, f.size, ResizeKind::nearest), f.half_extent);
    s.spacing[0] *= static_cast<double>(img.data.width()) / static_cast<double>(f.size);
    s.spacing[1] *= static_cast<double>(img.data.height()) / static_cast<double>(f.size);
  } else {
    if (f.center.empty()) throw ValidationError("--center d,h,w is required in nodule mode");
    const Index3 c = parse_index3("--center", f.center);
    auto bi = crop_nodule_block(img.data, c, f.block);
    auto bm = crop_nodule_block(mask, c, f.block);
    s.image = std::move(bi.block);
    s.mask = std::move(bm.block);
    info["pad_before"] = {bi.pad_before.d, bi.pad_before.h, bi.pad_before.w};
    info["pad_after"] = {bi.pad_after.d, bi.pad_after.h, bi.pad_after.w};
    info["start"] = {bi.start.d, bi.start.h, bi.start.w};
  }
  save_sample(f.out_dir, s);
  info["shape"] = std::vector<std::int64_t>(s.image.shape().begin(), s.image.shape().end());
  out << info.dump(2) << '\n';
  return 0;
}

int command_split(const std::string& data_dir, const std::string& out_path, std::uint64_t seed, std::ostream& out,
                  std::ostream& err) {
  echo_config(err, "split", {{"data", data_dir}, {"out", out_path}, {"seed", seed}});
  if (!std::filesystem::is_directory(data_dir)) throw IoError("--data: " + data_dir + " is not a directory");
  const auto ids = list_samples(data_dir);
  if (ids.empty()) throw ValidationError("--data: no samples found in " + data_dir);
  SplitManifest m = split_dataset(ids, seed);
  m.data_dir = std::filesystem::absolute(data_dir).lexically_normal().string();
  save_manifest(out_path, m);
  out << nlohmann::json{{"manifest", out_path}, {"train", m.train.size()}, {"val", m.val.size()}, {"test", m.test.size()}}.dump(2)
      << '\n';
  return 0;
}

std::filesystem::path resolve_data_dir(const std::string& manifest_path, const SplitManifest& m, const std::string& data) {
  return data.empty() ? manifest_data_dir(manifest_path, m) : std::filesystem::path(data);
}

const std::vector<std::string>& pick_split(const SplitManifest& m, const std::string& split) {
  if (split == "train") return m.train;
  if (split == "val") return m.val;
  if (split == "test") return m.test;
  throw ValidationError("--split must be train, val or test");
}

}  // namespace

int run_cli(int argc, char** argv) { return run_cli(argc, argv, std::cout, std::cerr); }

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"3D lung and nodule segmentation: training, evaluation and gradient checks", "lungseg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of analytic gradients (JSON report)");
  std::string gc_target = "all";
  std::uint64_t gc_seed = 0;
  std::optional<double> gc_tol;
  gc->add_option("--target", gc_target, "op, block, network or loss name, or all");
  gc->add_option("--seed", gc_seed, "seed for the random problem");
  gc->add_option("--tol", gc_tol, "relative tolerance (default 1e-4, networks 1e-3)");

  // phantom-gen
  auto* ph = app.add_subcommand("phantom-gen", "write synthetic lung or nodule samples");
  std::string ph_kind = "nodule", ph_dims = "32", ph_out, ph_prefix;
  std::int64_t ph_count = 1;
  std::uint64_t ph_seed = 0;
  ph->add_option("--kind", ph_kind, "lung or nodule")->check(CLI::IsMember({"lung", "nodule"}));
  ph->add_option("--count", ph_count, "number of samples");
  ph->add_option("--dims", ph_dims, "volume size N or D,H,W");
  ph->add_option("--out", ph_out, "output directory")->required();
  ph->add_option("--prefix", ph_prefix, "sample id prefix (default: the kind)");
  ph->add_option("--seed", ph_seed, "seed");

  // preprocess
  auto* pp = app.add_subcommand("preprocess", "MetaImage volume + mask -> network-ready sample");
  PreprocessFlags pf;
  pp->add_option("--image", pf.image, "image .mhd header")->required();
  pp->add_option("--mask", pf.mask, "mask .mhd header")->required();
  pp->add_option("--mode", pf.mode, "lung (resize + median crop) or nodule (block crop)")
      ->check(CLI::IsMember({"lung", "nodule"}));
  pp->add_option("--out", pf.out_dir, "output sample directory")->required();
  pp->add_option("--id", pf.id, "sample id (default: image file stem)");
  pp->add_option("--size", pf.size, "in-plane size for lung mode");
  pp->add_option("--half-extent", pf.half_extent, "slices kept on each side of the median");
  pp->add_option("--center", pf.center, "nodule center voxel d,h,w");
  pp->add_option("--block", pf.block, "nodule block edge length");

  // split
  auto* sp = app.add_subcommand("split", "seeded 60/20/20 split of the samples in a directory");
  std::string sp_data, sp_out;
  std::uint64_t sp_seed = 0;
  sp->add_option("--data", sp_data, "sample directory")->required();
  sp->add_option("--out", sp_out, "manifest JSON path")->required();
  sp->add_option("--seed", sp_seed, "shuffle seed");

  // train
  auto* tr = app.add_subcommand("train", "train a network over a split manifest");
  TrainFlags tf;
  tf.add_to(tr);
  std::string tr_manifest, tr_out = "run", tr_resume, tr_data;
  tr->add_option("--manifest", tr_manifest, "split manifest JSON")->required();
  tr->add_option("--out", tr_out, "output directory (log.csv, best/, last/)");
  tr->add_option("--resume", tr_resume, "checkpoint directory to continue from");
  tr->add_option("--data", tr_data, "sample directory (default: from the manifest)");

  // eval
  auto* ev = app.add_subcommand("eval", "metrics of a checkpoint on one split");
  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_out, ev_data;
  std::optional<double> ev_threshold;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--manifest", ev_manifest, "split manifest JSON")->required();
  ev->add_option("--split", ev_split, "train, val or test");
  ev->add_option("--out", ev_out, "report JSON path (default: stdout)");
  ev->add_option("--data", ev_data, "sample directory (default: from the manifest)");
  ev->add_option("--threshold", ev_threshold, "probability threshold");

  // predict
  auto* pr = app.add_subcommand("predict", "probability and mask volumes for one input");
  std::string pr_ckpt, pr_data, pr_id, pr_image, pr_out;
  std::optional<double> pr_threshold;
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint directory")->required();
  pr->add_option("--data", pr_data, "sample directory (with --id)");
  pr->add_option("--id", pr_id, "sample id (with --data)");
  pr->add_option("--image", pr_image, "MetaImage header, alternative to --data/--id");
  pr->add_option("--out", pr_out, "output stem; writes <stem>.prob and <stem>.mask tensors")->required();
  pr->add_option("--threshold", pr_threshold, "probability threshold");

  // heatmap
  auto* hm = app.add_subcommand("heatmap", "export one axial slice of a probability volume as PGM/PPM");
  std::string hm_prob, hm_out;
  std::int64_t hm_slice = -1;
  bool hm_color = false;
  hm->add_option("--prob", hm_prob, "probability tensor file, <stem>.prob from predict")->required();
  hm->add_option("--slice", hm_slice, "axial slice index (default: middle)");
  hm->add_option("--out", hm_out, "output .pgm or .ppm")->required();
  hm->add_flag("--color", hm_color, "blue-to-red PPM instead of grayscale PGM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return 1;
  }

  try {
    if (gc->parsed()) return command_gradcheck(gc_target, gc_seed, gc_tol, out, err);
    if (ph->parsed()) return command_phantom(ph_kind, ph_count, ph_dims, ph_out, ph_prefix, ph_seed, out, err);
    if (pp->parsed()) return command_preprocess(pf, out, err);
    if (sp->parsed()) return command_split(sp_data, sp_out, sp_seed, out, err);

    if (tr->parsed()) {
      const TrainConfig cfg = tf.resolve();
      const SplitManifest m = load_manifest(tr_manifest);
      TrainPaths paths{resolve_data_dir(tr_manifest, m, tr_data), tr_out, tr_resume};
      auto echo = to_json(cfg);
      echo["manifest"] = tr_manifest;
      echo["data_dir"] = paths.data_dir.string();
      echo["out"] = tr_out;
      echo["resume"] = tr_resume;
      echo_config(err, "train", echo);
      const auto res = train(m, cfg, paths, [&err](const EpochRecord& r) {
        err << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_dice " << r.val_dice << " val_iou "
            << r.val_iou << '\n';
      });
      out << nlohmann::json{{"epochs", res.epochs_completed},
                            {"best_val_dice", res.best_val_dice},
                            {"log", (std::filesystem::path(tr_out) / "log.csv").string()},
                            {"best_checkpoint", (std::filesystem::path(tr_out) / "best").string()},
                            {"last_checkpoint", (std::filesystem::path(tr_out) / "last").string()}}
                 .dump(2)
          << '\n';
      return 0;
    }

    if (ev->parsed()) {
      auto ck = load_checkpoint(ev_ckpt);
      if (ev_threshold) ck.config.threshold = *ev_threshold;
      ck.config.validate();
      const SplitManifest m = load_manifest(ev_manifest);
      const auto dir = resolve_data_dir(ev_manifest, m, ev_data);
      auto echo = to_json(ck.config);
      echo["checkpoint"] = ev_ckpt;
      echo["split"] = ev_split;
      echo["data_dir"] = dir.string();
      echo_config(err, "eval", echo);
      const auto r = evaluate(*ck.net, dir, pick_split(m, ev_split), ck.config);
      auto report = r.report();
      report["split"] = ev_split;
      if (ev_out.empty())
        out << report.dump(2) << '\n';
      else
        write_json_file(ev_out, report);
      return 0;
    }

    if (pr->parsed()) {
      auto ck = load_checkpoint(pr_ckpt);
      if (pr_threshold) ck.config.threshold = *pr_threshold;
      ck.config.validate();
      const bool from_sample = !pr_data.empty() || !pr_id.empty();
      if (from_sample == !pr_image.empty()) throw ValidationError("predict needs either --data with --id, or --image");
      if (from_sample && (pr_data.empty() || pr_id.empty())) throw ValidationError("--data and --id go together");
      auto echo = to_json(ck.config);
      echo["checkpoint"] = pr_ckpt;
      echo["input"] = from_sample ? pr_data + "/" + pr_id : pr_image;
      echo["out"] = pr_out;
      echo_config(err, "predict", echo);

      Tensor5<float> image;
      std::optional<Tensor5<float>> mask;
      if (from_sample) {
        Sample s = load_training_sample(pr_data, pr_id, ck.config);
        image = std::move(s.image);
        mask = std::move(s.mask);
      } else {
        image = load_mhd(pr_image).data;
        if (ck.config.normalize) image = normalize_intensity(image, ck.config.window);
      }
      Rng unused(0);
      const auto prob = ck.net->forward(image, Mode::eval, unused);
      const auto pred = threshold_probabilities(prob, ck.config.threshold);
      save_tensor(prob, pr_out + ".prob");
      save_tensor(pred, pr_out + ".mask");
      nlohmann::json j{{"prob", pr_out + ".prob"}, {"mask", pr_out + ".mask"},
                       {"foreground_voxels", static_cast<std::int64_t>(tensor_reduce(pred, ReduceOp::sum))}};
      if (mask) j["metrics"] = to_json(seg_metrics(pred, *mask));
      out << j.dump(2) << '\n';
      return 0;
    }

    if (hm->parsed()) {
      const auto prob = load_tensor<float>(hm_prob);
      const std::int64_t slice = hm_slice < 0 ? prob.depth() / 2 : hm_slice;
      echo_config(err, "heatmap", {{"prob", hm_prob}, {"slice", slice}, {"out", hm_out}, {"color", hm_color}});
      if (slice >= prob.depth())
        throw ValidationError("--slice " + std::to_string(slice) + " outside [0, " + std::to_string(prob.depth()) + ")");
      export_heatmap(prob, slice, hm_out, hm_color ? HeatmapStyle::color : HeatmapStyle::gray);
      out << nlohmann::json{{"out", hm_out}, {"slice", slice}}.dump(2) << '\n';
      return 0;
    }
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    err << "invalid input: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "invalid input: " << e.what() << '\n';
    return 1;
  } catch (const std::logic_error& e) {
    err << "invalid input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace lungseg
