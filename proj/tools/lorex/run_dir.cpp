#include "run_dir.hpp"

#include <cerrno>
#include <csignal>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include "lorex/hash.hpp"

namespace lorex::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json Marker::to_json() const {
  return {{"stage", stage}, {"params", params}, {"inputs", inputs}, {"artifacts", artifacts}, {"seconds", seconds}};
}

Marker Marker::from_json(const json& j) {
  Marker m;
  m.stage = j.at("stage").get<std::string>();
  m.params = j.at("params");
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  m.seconds = j.value("seconds", 0.0);
  return m;
}

RunDirectory::RunDirectory(fs::path root) : root_(std::move(root)) {}

std::optional<json> RunDirectory::stored_config() const {
  const auto p = path("config.json");
  if (!fs::exists(p)) return std::nullopt;
  return json::parse(read_text(p));
}

void RunDirectory::write_config(const json& config) const { write_text(path("config.json"), config.dump(2) + "\n"); }

std::optional<Marker> RunDirectory::marker(const std::string& stage) const {
  const auto p = path("markers/" + stage + ".json");
  if (!fs::exists(p)) return std::nullopt;
  try {
    return Marker::from_json(json::parse(read_text(p)));
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

std::string RunDirectory::marker_digest(const std::string& stage) const {
  auto m = marker(stage);
  if (!m) return {};
  auto j = m->to_json();
  j.erase("seconds");
  return sha256_hex(j.dump());
}

bool RunDirectory::intact(const std::string& stage) const {
  auto m = marker(stage);
  if (!m) return false;
  for (const auto& [rel, digest] : m->artifacts) {
    const auto p = path(rel);
    if (!fs::exists(p) || sha256_file(p) != digest) return false;
  }
  return true;
}

Marker RunDirectory::complete(const std::string& stage, json params, std::map<std::string, std::string> inputs,
                              const std::vector<std::string>& artifacts, double seconds) const {
  Marker m;
  m.stage = stage;
  m.params = std::move(params);
  m.inputs = std::move(inputs);
  m.seconds = seconds;
  for (const auto& rel : artifacts) m.artifacts[rel] = sha256_file(path(rel));
  write_text(path("markers/" + stage + ".json"), m.to_json().dump(2) + "\n");
  return m;
}

void RunDirectory::remove_marker(const std::string& stage) const { fs::remove(path("markers/" + stage + ".json")); }

RunLock::RunLock(const fs::path& root) : path_(root / ".lock") {
  fs::create_directories(root);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const auto pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw CliError(kExitRuntime, "cannot create lock file " + path_.string());
    long holder = 0;
    std::ifstream(path_) >> holder;
    const bool alive = holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM);
    if (alive)
      throw CliError(kExitRuntime, "run directory " + root.string() + " is locked by process " +
                                       std::to_string(holder));
    fs::remove(path_);  // stale lock from a process that no longer exists
  }
  throw CliError(kExitRuntime, "cannot acquire lock " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

}  // namespace lorex::cli
