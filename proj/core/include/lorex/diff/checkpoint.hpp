#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorex/diff/layers.hpp"

namespace lorex::diff {

// File layout: one line of JSON
//   {"format":"lorex-tensors","version":1,"tensors":[{"name":..,"shape":[..]},..],"meta":{..}}
// terminated by '\n', followed by the little-endian float64 payload of every
// tensor in header order.
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& meta = nlohmann::json::object());
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store,
                     const nlohmann::json& meta = nlohmann::json::object());
CheckpointData load_checkpoint(const std::filesystem::path& path);
/// Loads values into a store whose names and shapes must match the file.
nlohmann::json load_into(const std::filesystem::path& path, ParameterStore& store);

}  // namespace lorex::diff
