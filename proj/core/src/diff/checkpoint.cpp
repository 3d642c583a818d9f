#include "lorex/diff/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <stdexcept>

namespace lorex::diff {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& meta) {
  nlohmann::json header = {{"format", "lorex-tensors"}, {"version", kCheckpointVersion}};
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    if (t.values.size() != numel(t.shape)) {
      throw ShapeError("save_checkpoint", t.name + " has " + std::to_string(t.values.size()) +
                                              " values for shape " + to_string(t.shape));
    }
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  }
  header["meta"] = meta;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << header.dump() << '\n';
    for (const auto& t : tensors)
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store,
                     const nlohmann::json& meta) {
  std::vector<NamedTensor> tensors;
  for (const auto& [name, t] : store.entries())
    tensors.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  save_checkpoint(path, tensors, meta);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": bad header: " + e.what());
  }
  if (header.value("format", "") != "lorex-tensors") {
    throw std::runtime_error(path.string() + ": not a lorex tensor checkpoint");
  }
  if (header.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                             header.value("version", nlohmann::json()).dump());
  }
  CheckpointData data;
  data.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    NamedTensor t{entry.at("name").get<std::string>(), entry.at("shape").get<Shape>(), {}};
    t.values.resize(numel(t.shape));
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path.string() + ": truncated payload at " + t.name);
    data.tensors.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error(path.string() + ": trailing bytes after payload");
  }
  return data;
}

nlohmann::json load_into(const std::filesystem::path& path, ParameterStore& store) {
  auto data = load_checkpoint(path);
  if (data.tensors.size() != store.size()) {
    throw std::runtime_error(path.string() + ": holds " + std::to_string(data.tensors.size()) +
                             " tensors, model has " + std::to_string(store.size()));
  }
  for (auto& t : data.tensors) {
    auto dst = store.get(t.name);
    if (dst.shape() != t.shape) {
      throw ShapeError("load_into", t.name + " is " + to_string(t.shape) + " in file and " +
                                        to_string(dst.shape()) + " in model");
    }
    std::copy(t.values.begin(), t.values.end(), dst.mutable_data().begin());
  }
  return data.meta;
}

}  // namespace lorex::diff
