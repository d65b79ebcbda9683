#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungseg/tensor.hpp"

namespace lungseg {

/// A named tensor owned by a layer. Buffers (batch-norm running statistics)
/// carry no gradient and are skipped by the optimizer.
template <typename T>
struct ParamRef {
  std::string name;
  std::string role;
  Tensor5<T>* value = nullptr;
  Tensor5<T>* grad = nullptr;

  bool trainable() const { return grad != nullptr; }
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
void zero_grads(ParamList<T>& params);

template <typename T>
std::size_t count_trainable(const ParamList<T>& params);

/// Copies every value (trainable or buffer) from `src` to `dst`, matching by name.
template <typename T>
void copy_values(const ParamList<T>& src, ParamList<T>& dst);

// Checkpoint directory layout: manifest.json names every tensor with its role
// and file stem; each tensor is stored with save_tensor(). `extra` is merged
// into the manifest under "extra".

template <typename T>
void save_parameters(const std::filesystem::path& dir, const ParamList<T>& params,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Loads into existing tensors; names and shapes must match exactly.
/// Returns the manifest's "extra" object.
template <typename T>
nlohmann::json load_parameters(const std::filesystem::path& dir, ParamList<T>& params);

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace lungseg
