#include "lorex/service.hpp"

#include <charconv>
#include <cstdio>

#include <httplib.h>

namespace lorex {

namespace {

using nlohmann::json;

ApiResponse error(int status, std::string code, std::string message) {
  ApiResponse r;
  r.status = status;
  r.body = {{"code", std::move(code)}, {"message", std::move(message)}};
  return r;
}

std::optional<long long> parse_int(const std::string& s) {
  long long v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  return json::parse(body);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

struct Service::Impl {
  httplib::Server server;
};

Service::Service(ServiceConfig config) : config_(std::move(config)), impl_(std::make_unique<Impl>()) {}

Service::~Service() { stop(); }

void Service::load(std::shared_ptr<const Dataset> dataset, std::shared_ptr<const SelorModel> model, json metrics) {
  auto explainer = std::make_shared<const Explainer>(model, dataset);
  std::unordered_map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < dataset->instances.size(); ++i) by_id.emplace(dataset->instances[i].id, i);
  {
    std::lock_guard lock(state_mutex_);
    dataset_ = std::move(dataset);
    model_ = std::move(model);
    explainer_ = std::move(explainer);
    metrics_ = std::move(metrics);
    model_hash_ = hex64(model_->fingerprint());
    by_id_ = std::move(by_id);
  }
  std::lock_guard lock(sessions_mutex_);
  sessions_.clear();
}

bool Service::loaded() const {
  std::lock_guard lock(state_mutex_);
  return explainer_ != nullptr;
}

std::size_t Service::session_count() {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

void Service::expire_idle() {
  const auto now = std::chrono::steady_clock::now();
  std::lock_guard lock(sessions_mutex_);
  std::erase_if(sessions_, [&](const auto& kv) {
    std::lock_guard s(kv.second->mutex);
    return now - kv.second->last_used > config_.session_idle;
  });
}

std::shared_ptr<Service::Session> Service::session(const std::string& id, bool create, std::string* assigned) {
  std::lock_guard lock(sessions_mutex_);
  std::string key = id;
  if (key.empty()) {
    if (!create) return nullptr;
    key = "s" + std::to_string(++next_session_);
    while (sessions_.contains(key)) key = "s" + std::to_string(++next_session_);
  }
  auto it = sessions_.find(key);
  if (it == sessions_.end()) {
    if (!create) return nullptr;
    auto s = std::make_shared<Session>();
    s->steering = std::make_unique<SteeringSession>(explainer_, config_.steer_splits);
    s->last_used = std::chrono::steady_clock::now();
    it = sessions_.emplace(key, std::move(s)).first;
  }
  if (assigned) *assigned = key;
  return it->second;
}

ApiResponse Service::handle(const ApiRequest& r) {
  expire_idle();
  try {
    if (r.path == "/healthz") {
      if (r.method != "GET") return error(404, "not_found", "no route " + r.method + " " + r.path);
      std::lock_guard lock(state_mutex_);
      ApiResponse out;
      out.body = {{"status", "ok"}, {"model_loaded", explainer_ != nullptr}};
      if (explainer_) out.body["model_hash"] = model_hash_;
      return out;
    }
    const bool get = r.method == "GET", post = r.method == "POST";
    const bool known = (get && (r.path == "/api/v1/clusters" || r.path == "/api/v1/metrics" || r.path == "/api/v1/atoms")) ||
                       (post && (r.path == "/api/v1/explain" || r.path == "/api/v1/steer/exclude" ||
                                 r.path == "/api/v1/steer/reset"));
    if (!known) return error(404, "not_found", "no route " + r.method + " " + r.path);
    if (!loaded()) return error(503, "model_not_loaded", "no model is loaded");

    if (r.path == "/api/v1/explain") return explain(r);
    if (r.path == "/api/v1/clusters") return clusters(r);
    if (r.path == "/api/v1/steer/exclude") return exclude(r);
    if (r.path == "/api/v1/steer/reset") return reset(r);
    if (r.path == "/api/v1/atoms") return atoms(r);
    ApiResponse out;
    std::lock_guard lock(state_mutex_);
    out.body = metrics_;
    return out;
  } catch (const json::exception& e) {
    return error(400, "invalid_json", e.what());
  } catch (const DataError& e) {
    return error(400, "schema_mismatch", e.field() + ": " + e.what());
  } catch (const std::exception& e) {
    return error(500, "internal", e.what());
  }
}

ApiResponse Service::explain(const ApiRequest& r) {
  const json body = parse_body(r.body);
  if (!body.is_object()) return error(400, "schema_mismatch", "body: expected a JSON object");
  const bool has_id = body.contains("instance_id"), has_fields = body.contains("instance");
  if (has_id == has_fields)
    return error(400, "schema_mismatch", "body: expected exactly one of 'instance_id' or 'instance'");

  Instance x;
  if (has_id) {
    if (!body["instance_id"].is_number_integer())
      return error(400, "schema_mismatch", "instance_id: expected an integer");
    const auto id = body["instance_id"].get<std::int64_t>();
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return error(404, "unknown_instance", "no instance with id " + std::to_string(id));
    x = dataset_->instances[it->second];
  } else {
    x = instance_from_json(*dataset_, body["instance"]);
  }

  ApiResponse out;
  auto s = session(r.session_id, true, &out.session_id);
  std::lock_guard lock(s->mutex);
  s->last_used = std::chrono::steady_clock::now();
  out.body = s->steering->explain(x).to_json(*dataset_);
  out.body["session_id"] = out.session_id;
  out.body["exclusion_version"] = s->steering->version();
  out.body["excluded"] = std::vector<int>(s->steering->excluded().begin(), s->steering->excluded().end());
  return out;
}

ApiResponse Service::clusters(const ApiRequest& r) {
  long long k = 10;
  if (auto it = r.query.find("k"); it != r.query.end()) {
    auto v = parse_int(it->second);
    if (!v) return error(400, "schema_mismatch", "k: expected an integer");
    k = *v;
  }
  if (k < 1) return error(422, "invalid_k", "k must be at least 1");
  if (static_cast<std::size_t>(k) > dataset_->train_size())
    return error(422, "invalid_k", "k exceeds the number of train instances");

  const auto key = std::make_pair(model_hash_, static_cast<std::size_t>(k));
  std::lock_guard lock(cluster_mutex_);
  auto it = cluster_cache_.find(key);
  if (it == cluster_cache_.end()) {
    const auto& gen = model_->generator();
    auto report = cluster_explanations(explainer_->baseline("train"), *dataset_, model_->pool(),
                                       gen.atom_embeddings().data(), gen.config().hidden, key.second,
                                       config_.cluster_seed);
    json j = report.to_json(model_->pool(), *dataset_);
    j["model_hash"] = model_hash_;
    j["table"] = report.table(model_->pool(), *dataset_);
    it = cluster_cache_.emplace(key, std::move(j)).first;
  }
  ApiResponse out;
  out.body = it->second;
  return out;
}

ApiResponse Service::exclude(const ApiRequest& r) {
  const json body = parse_body(r.body);
  if (!body.is_object() || !body.contains("atom_ids") || !body["atom_ids"].is_array())
    return error(400, "schema_mismatch", "atom_ids: required array of integers");
  std::vector<int> ids;
  for (const auto& v : body["atom_ids"]) {
    if (!v.is_number_integer()) return error(400, "schema_mismatch", "atom_ids: expected integers");
    ids.push_back(v.get<int>());
  }
  const auto n = static_cast<int>(model_->pool().size());
  for (int a : ids) {
    if (a == kNullAtom) return error(422, "null_atom", "the NULL atom cannot be excluded");
    if (a < 0 || a >= n) return error(422, "unknown_atom", "unknown atom id " + std::to_string(a));
  }

  ApiResponse out;
  auto s = session(r.session_id, true, &out.session_id);
  std::lock_guard lock(s->mutex);
  s->last_used = std::chrono::steady_clock::now();
  std::size_t max_instances = 100;
  if (auto it = r.query.find("max_instances"); it != r.query.end()) {
    auto v = parse_int(it->second);
    if (!v || *v < 0) return error(400, "schema_mismatch", "max_instances: expected a non-negative integer");
    max_instances = static_cast<std::size_t>(*v);
  }
  out.body = s->steering->exclude(ids).to_json(model_->pool(), *dataset_, max_instances);
  out.body["session_id"] = out.session_id;
  return out;
}

ApiResponse Service::reset(const ApiRequest& r) {
  ApiResponse out;
  auto s = session(r.session_id, true, &out.session_id);
  std::lock_guard lock(s->mutex);
  s->last_used = std::chrono::steady_clock::now();
  s->steering->reset();
  out.body = {{"session_id", out.session_id},
              {"version", s->steering->version()},
              {"excluded", json::array()}};
  return out;
}

ApiResponse Service::atoms(const ApiRequest& r) {
  std::string query;
  if (auto it = r.query.find("query"); it != r.query.end()) query = it->second;
  std::size_t limit = 50;
  if (auto it = r.query.find("limit"); it != r.query.end()) {
    auto v = parse_int(it->second);
    if (!v || *v < 1) return error(400, "schema_mismatch", "limit: expected a positive integer");
    limit = static_cast<std::size_t>(*v);
  }
  const auto& pool = model_->pool();
  json list = json::array();
  for (int id : pool.search(query, limit)) {
    const auto& a = pool[id];
    list.push_back({{"atom_id", id}, {"atom", a.display}, {"kind", std::string(to_string(a.kind))},
                    {"coverage", a.coverage}});
  }
  ApiResponse out;
  out.body = {{"query", query}, {"atoms", std::move(list)}};
  return out;
}

int Service::bind() {
  auto& srv = impl_->server;
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    ApiRequest r;
    r.method = req.method;
    r.path = req.path;
    for (const auto& [k, v] : req.params) r.query.emplace(k, v);
    r.body = req.body;
    r.session_id = req.get_header_value("X-Session-Id");
    if (r.session_id.empty())
      if (auto it = r.query.find("session_id"); it != r.query.end()) r.session_id = it->second;
    auto out = handle(r);
    res.status = out.status;
    if (!out.session_id.empty()) res.set_header("X-Session-Id", out.session_id);
    res.set_content(out.body.dump(), "application/json; charset=utf-8");
  };
  for (const char* p : {"/healthz", "/api/v1/clusters", "/api/v1/metrics", "/api/v1/atoms"}) srv.Get(p, dispatch);
  for (const char* p : {"/api/v1/explain", "/api/v1/steer/exclude", "/api/v1/steer/reset"}) srv.Post(p, dispatch);
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    json body = {{"code", res.status == 404 ? "not_found" : "http_error"},
                 {"message", "no route " + req.method + " " + req.path}};
    res.set_content(body.dump(), "application/json; charset=utf-8");
  });
  if (!config_.static_dir.empty() && !srv.set_mount_point("/", config_.static_dir.string())) return -1;

  if (config_.port == 0) {
    bound_port_ = srv.bind_to_any_port(config_.host);
  } else {
    bound_port_ = srv.bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  return bound_port_;
}

bool Service::serve() { return bound_port_ > 0 && impl_->server.listen_after_bind(); }

bool Service::listen() { return bind() > 0 && serve(); }

void Service::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace lorex
