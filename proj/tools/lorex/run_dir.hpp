#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace lorex::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitPrerequisite = 3;
inline constexpr int kExitRuntime = 4;

class CliError : public std::runtime_error {
 public:
  CliError(int code, const std::string& message) : std::runtime_error(message), code_(code) {}
  int code() const noexcept { return code_; }

 private:
  int code_;
};

/// Completion record of one stage: the settings it ran with, the digests of the
/// markers it consumed and the SHA-256 of every artifact it wrote.
struct Marker {
  std::string stage;
  nlohmann::json params = nlohmann::json::object();
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> artifacts;  // relative path -> sha256
  double seconds = 0;

  nlohmann::json to_json() const;
  static Marker from_json(const nlohmann::json& j);
};

class RunDirectory {
 public:
  explicit RunDirectory(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& relative) const { return root_ / relative; }

  std::optional<nlohmann::json> stored_config() const;
  void write_config(const nlohmann::json& config) const;

  std::optional<Marker> marker(const std::string& stage) const;
  /// Digest of the marker without its timing, empty when absent.
  std::string marker_digest(const std::string& stage) const;
  /// Marker present and every recorded artifact hashes to its recorded digest.
  bool intact(const std::string& stage) const;
  /// Hashes the listed artifacts and writes the marker.
  Marker complete(const std::string& stage, nlohmann::json params, std::map<std::string, std::string> inputs,
                  const std::vector<std::string>& artifacts, double seconds) const;
  void remove_marker(const std::string& stage) const;

 private:
  std::filesystem::path root_;
};

/// Exclusive per-directory lock held for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& root);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace lorex::cli
