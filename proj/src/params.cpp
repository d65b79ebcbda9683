#include "lungseg/params.hpp"

#include <fstream>
#include <map>

namespace lungseg {

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params)
    if (p.grad) p.grad->fill(T(0));
}

template <typename T>
std::size_t count_trainable(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.trainable()) n += p.value->size();
  return n;
}

template <typename T>
void copy_values(const ParamList<T>& src, ParamList<T>& dst) {
  std::map<std::string, const Tensor5<T>*> by_name;
  for (const auto& p : src) by_name[p.name] = p.value;
  for (auto& p : dst) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ValidationError("copy_values: no source tensor named " + p.name);
    if (!it->second->same_shape(*p.value)) throw ShapeError("copy_values: shape mismatch for " + p.name);
    *p.value = *it->second;
  }
}

namespace {

std::string file_stem_for(const std::string& name) {
  std::string s = name;
  for (auto& ch : s)
    if (ch == '/' || ch == '\\' || ch == ' ') ch = '_';
  return s;
}

}  // namespace

template <typename T>
void save_parameters(const std::filesystem::path& dir, const ParamList<T>& params,
                     const nlohmann::json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "lungseg-checkpoint-1";
  manifest["dtype"] = std::string(dtype_name<T>());
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : params) {
    const std::string stem = file_stem_for(p.name);
    save_tensor(*p.value, dir / stem);
    tensors.push_back({{"name", p.name},
                       {"role", p.role},
                       {"file", stem},
                       {"trainable", p.trainable()},
                       {"shape", std::vector<std::int64_t>(p.value->shape().begin(), p.value->shape().end())}});
  }
  manifest["tensors"] = std::move(tensors);
  manifest["extra"] = extra;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
}

template <typename T>
nlohmann::json load_parameters(const std::filesystem::path& dir, ParamList<T>& params) {
  const auto manifest = read_checkpoint_manifest(dir);
  std::map<std::string, std::string> files;
  for (const auto& t : manifest.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file");
  if (files.size() != params.size())
    throw ValidationError("checkpoint " + dir.string() + " holds " + std::to_string(files.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  for (auto& p : params) {
    auto it = files.find(p.name);
    if (it == files.end()) throw ValidationError("checkpoint is missing tensor " + p.name);
    auto loaded = load_tensor<T>(dir / it->second);
    if (!loaded.same_shape(*p.value))
      throw ShapeError("checkpoint tensor " + p.name + " has shape " + shape_to_string(loaded.shape()) +
                       ", model expects " + shape_to_string(p.value->shape()));
    *p.value = std::move(loaded);
  }
  return manifest.value("extra", nlohmann::json::object());
}

#define LUNGSEG_INSTANTIATE(T)                                                                 \
  template void zero_grads(ParamList<T>&);                                                     \
  template std::size_t count_trainable(const ParamList<T>&);                                   \
  template void copy_values(const ParamList<T>&, ParamList<T>&);                               \
  template void save_parameters(const std::filesystem::path&, const ParamList<T>&,            \
                                const nlohmann::json&);                                        \
  template nlohmann::json load_parameters(const std::filesystem::path&, ParamList<T>&);

LUNGSEG_INSTANTIATE(float)
LUNGSEG_INSTANTIATE(double)

}  // namespace lungseg
