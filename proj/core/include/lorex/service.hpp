#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorex/explain.hpp"

namespace lorex {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path static_dir;
  std::chrono::milliseconds session_idle = std::chrono::minutes(30);
  std::vector<std::string> steer_splits = {"test", "train"};
  std::uint64_t cluster_seed = 0;
};

struct ApiRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
  std::string session_id;  // from the X-Session-Id header, may be empty
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
  std::string session_id;  // echoed back as X-Session-Id when set
};

/// JSON-over-HTTP facade. The model snapshot is read-only; steering state lives
/// in per-session objects that expire after `session_idle` without requests.
class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void load(std::shared_ptr<const Dataset> dataset, std::shared_ptr<const SelorModel> model,
            nlohmann::json metrics = nlohmann::json::object());
  bool loaded() const;

  ApiResponse handle(const ApiRequest& request);

  /// Binds and serves until stop(). Returns false when the address cannot be bound.
  bool listen();
  /// Binds without serving; returns the bound port or -1.
  int bind();
  /// Serves on a port obtained from bind().
  bool serve();
  void stop();
  int port() const { return bound_port_; }

  std::size_t session_count();
  void expire_idle();

 private:
  struct Session {
    std::mutex mutex;
    std::unique_ptr<SteeringSession> steering;
    std::chrono::steady_clock::time_point last_used;
  };
  struct Impl;

  std::shared_ptr<Session> session(const std::string& id, bool create, std::string* assigned);
  ApiResponse explain(const ApiRequest& r);
  ApiResponse clusters(const ApiRequest& r);
  ApiResponse exclude(const ApiRequest& r);
  ApiResponse reset(const ApiRequest& r);
  ApiResponse atoms(const ApiRequest& r);

  ServiceConfig config_;
  mutable std::mutex state_mutex_;
  std::shared_ptr<const Dataset> dataset_;
  std::shared_ptr<const SelorModel> model_;
  std::shared_ptr<const Explainer> explainer_;
  nlohmann::json metrics_;
  std::string model_hash_;
  std::unordered_map<std::int64_t, std::size_t> by_id_;

  std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_session_ = 0;

  std::mutex cluster_mutex_;
  std::map<std::pair<std::string, std::size_t>, nlohmann::json> cluster_cache_;

  std::unique_ptr<Impl> impl_;
  int bound_port_ = -1;
};

}  // namespace lorex
