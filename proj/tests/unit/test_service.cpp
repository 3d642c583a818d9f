#include <doctest.h>

#include <fstream>
#include <thread>

#include <httplib.h>

#include "../support/toy_pipeline.hpp"
#include "lorex/service.hpp"

using namespace lorex;
using nlohmann::json;

namespace {

struct Loaded {
  std::shared_ptr<const Dataset> dataset;
  std::shared_ptr<const SelorModel> model;
  json metrics;
};

const Loaded& loaded() {
  static const Loaded l = [] {
    auto ds = lorex::testing::toy_dataset();
    auto run = run_pipeline(ds, lorex::testing::toy_config());
    Loaded x;
    x.dataset = std::make_shared<const Dataset>(std::move(ds));
    x.model = std::make_shared<const SelorModel>(std::move(run.selor));
    x.metrics = run.selor_report.to_json();
    return x;
  }();
  return l;
}

std::unique_ptr<Service> make_service(ServiceConfig cfg = {}) {
  auto s = std::make_unique<Service>(std::move(cfg));
  s->load(loaded().dataset, loaded().model, loaded().metrics);
  return s;
}

ApiResponse call(Service& s, std::string method, std::string path, json body = nullptr, std::string session = {},
                 std::map<std::string, std::string> query = {}) {
  ApiRequest r;
  r.method = std::move(method);
  r.path = std::move(path);
  r.query = std::move(query);
  r.body = body.is_null() ? "" : body.dump();
  r.session_id = std::move(session);
  return s.handle(r);
}

int spurious() { return *loaded().model->pool().find("marker == on"); }

std::int64_t test_id(std::size_t i) {
  const auto& ds = *loaded().dataset;
  return ds.instances[ds.splits.test[i]].id;
}

bool has_atom(const json& explanation, int id) {
  for (const auto& a : explanation["atom_ids"])
    if (a.get<int>() == id) return true;
  return false;
}

}  // namespace

TEST_CASE("service reports 503 before a model is loaded") {
  Service s({});
  auto h = call(s, "GET", "/healthz");
  CHECK(h.status == 200);
  CHECK(h.body["model_loaded"] == false);
  auto r = call(s, "POST", "/api/v1/explain", {{"instance_id", 0}});
  CHECK(r.status == 503);
  CHECK(r.body["code"] == "model_not_loaded");
  CHECK(r.body.contains("message"));
}

TEST_CASE("explain by id and by fields") {
  auto s = make_service();
  const auto& ds = *loaded().dataset;
  auto a = call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(0)}});
  REQUIRE(a.status == 200);
  CHECK(a.body["instance_id"] == test_id(0));
  CHECK(a.body["exclusion_version"] == 0);
  CHECK_FALSE(a.session_id.empty());
  CHECK(a.body["session_id"] == a.session_id);

  // Same body twice in one session gives identical payloads.
  auto b = call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(0)}}, a.session_id);
  CHECK(a.body.dump() == b.body.dump());

  // Raw fields reproduce the row's explanation; only the id differs.
  const auto& x = ds.instances[ds.splits.test[0]];
  json fields;
  for (std::size_t f = 0; f < ds.features.size(); ++f) {
    const auto& feat = ds.features[f];
    if (feat.kind == FeatureKind::Numeric) fields[feat.name] = x.values[f];
    else fields[feat.name] = feat.categories[static_cast<std::size_t>(x.values[f])];
  }
  auto c = call(*s, "POST", "/api/v1/explain", {{"instance", fields}}, a.session_id);
  REQUIRE(c.status == 200);
  CHECK(c.body["atom_ids"] == a.body["atom_ids"]);
  CHECK(c.body["confidence"] == a.body["confidence"]);
  CHECK(c.body["instance_id"] == -1);
}

TEST_CASE("explain rejects malformed bodies with field-level messages") {
  auto s = make_service();
  auto bad_json = s->handle({"POST", "/api/v1/explain", {}, "{not json", ""});
  CHECK(bad_json.status == 400);
  CHECK(bad_json.body["code"] == "invalid_json");

  auto both = call(*s, "POST", "/api/v1/explain", {{"instance_id", 1}, {"instance", json::object()}});
  CHECK(both.status == 400);

  auto missing = call(*s, "POST", "/api/v1/explain", {{"instance", {{"color", "red"}}}});
  CHECK(missing.status == 400);
  CHECK(missing.body["code"] == "schema_mismatch");
  const auto msg = missing.body["message"].get<std::string>();
  CHECK(msg.find("required field missing") != std::string::npos);
  CHECK(msg.rfind("color", 0) != 0);

  json fields = {{"color", "red"}, {"shape", "square"}, {"marker", "on"}, {"size", "heavy"}, {"weight", 1.0}};
  auto bad_num = call(*s, "POST", "/api/v1/explain", {{"instance", fields}});
  CHECK(bad_num.status == 400);
  CHECK(bad_num.body["message"].get<std::string>().rfind("size", 0) == 0);

  auto unknown = call(*s, "POST", "/api/v1/explain", {{"instance_id", 987654321}});
  CHECK(unknown.status == 404);
  CHECK(unknown.body["code"] == "unknown_instance");

  auto route = call(*s, "GET", "/api/v1/nothing");
  CHECK(route.status == 404);
  CHECK(route.body["code"] == "not_found");
}

TEST_CASE("clusters are validated and cached") {
  auto s = make_service();
  const auto train = loaded().dataset->train_size();
  for (std::string k : {"1", "10"}) {
    auto r = call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", k}});
    REQUIRE(r.status == 200);
    CHECK(r.body["clusters"].size() == std::stoul(k));
    std::size_t members = 0;
    for (const auto& c : r.body["clusters"]) members += c["num"].get<std::size_t>();
    CHECK(members == train);
    auto again = call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", k}});
    CHECK(again.body.dump() == r.body.dump());
  }
  CHECK(call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", "0"}}).status == 422);
  CHECK(call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", "-3"}}).status == 422);
  CHECK(call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", "ten"}}).status == 400);
  CHECK(call(*s, "GET", "/api/v1/clusters").body["clusters"].size() == 10);
}

TEST_CASE("steering round-trip through the API") {
  auto s = make_service();
  const int sp = spurious();
  // Find a test row whose explanation uses the spurious atom.
  std::int64_t target = -1;
  json before;
  for (std::size_t i = 0; i < loaded().dataset->splits.test.size() && target < 0; ++i) {
    auto r = call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(i)}}, "golden");
    if (has_atom(r.body, sp)) {
      target = test_id(i);
      before = r.body;
    }
  }
  REQUIRE(target >= 0);

  auto ex = call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {sp}}}, "golden");
  REQUIRE(ex.status == 200);
  CHECK(ex.body["affected"].get<std::size_t>() > 0);
  CHECK(ex.body["version"] == 1);
  CHECK(ex.body.contains("replacements"));
  for (const auto& split : ex.body["splits"]) CHECK(split.contains("accuracy_delta"));

  auto after = call(*s, "POST", "/api/v1/explain", {{"instance_id", target}}, "golden");
  CHECK_FALSE(has_atom(after.body, sp));
  CHECK(after.body["exclusion_version"] == 1);
  CHECK(after.body["excluded"] == json::array({sp}));

  auto rs = call(*s, "POST", "/api/v1/steer/reset", nullptr, "golden");
  CHECK(rs.status == 200);
  CHECK(rs.body["excluded"].empty());
  auto restored = call(*s, "POST", "/api/v1/explain", {{"instance_id", target}}, "golden");
  for (const char* key : {"atom_ids", "atoms", "confidence", "distribution", "coverage_n", "predicted_class"})
    CHECK(restored.body[key] == before[key]);

  CHECK(call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {0}}}, "golden").status == 422);
  const int n = static_cast<int>(loaded().model->pool().size());
  auto unk = call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {n}}}, "golden");
  CHECK(unk.status == 422);
  CHECK(unk.body["code"] == "unknown_atom");
  CHECK(call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", "x"}}, "golden").status == 400);
}

TEST_CASE("two interleaved sessions see only their own exclusions") {
  auto s = make_service();
  const int sp = spurious();
  const int square = *loaded().model->pool().find("shape == square");
  const std::size_t n = loaded().dataset->splits.test.size();

  std::thread ta([&] { call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {sp}}}, "a"); });
  std::thread tb([&] { call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {square}}}, "b"); });
  ta.join();
  tb.join();

  std::size_t b_uses_spurious = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto ea = call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(i)}}, "a");
    auto eb = call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(i)}}, "b");
    CHECK_FALSE(has_atom(ea.body, sp));
    CHECK_FALSE(has_atom(eb.body, square));
    CHECK(ea.body["excluded"] == json::array({sp}));
    CHECK(eb.body["excluded"] == json::array({square}));
    b_uses_spurious += has_atom(eb.body, sp);
  }
  CHECK(b_uses_spurious > 0);
  CHECK(s->session_count() == 2);
}

TEST_CASE("no request sequence changes the model hash") {
  auto s = make_service();
  const auto fp = loaded().model->fingerprint();
  const auto hash = call(*s, "GET", "/healthz").body["model_hash"];
  call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {spurious()}}}, "h");
  call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(0)}}, "h");
  call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", "3"}});
  call(*s, "POST", "/api/v1/steer/reset", nullptr, "h");
  CHECK(loaded().model->fingerprint() == fp);
  CHECK(call(*s, "GET", "/healthz").body["model_hash"] == hash);
  CHECK(call(*s, "GET", "/api/v1/clusters", nullptr, {}, {{"k", "3"}}).body["model_hash"] == hash);
  // A second service over the same model reports the same hash.
  CHECK(call(*make_service(), "GET", "/healthz").body["model_hash"] == hash);
}

TEST_CASE("idle sessions expire") {
  ServiceConfig cfg;
  cfg.session_idle = std::chrono::milliseconds(50);
  auto s = make_service(cfg);
  call(*s, "POST", "/api/v1/steer/exclude", {{"atom_ids", {spurious()}}}, "idle");
  CHECK(s->session_count() == 1);
  std::this_thread::sleep_for(std::chrono::milliseconds(120));
  s->expire_idle();
  CHECK(s->session_count() == 0);
  auto r = call(*s, "POST", "/api/v1/explain", {{"instance_id", test_id(0)}}, "idle");
  CHECK(r.body["exclusion_version"] == 0);
  CHECK(r.body["excluded"].empty());
}

TEST_CASE("metrics and atom search") {
  auto s = make_service();
  auto m = call(*s, "GET", "/api/v1/metrics");
  CHECK(m.status == 200);
  CHECK(m.body == loaded().metrics);
  auto a = call(*s, "GET", "/api/v1/atoms", nullptr, {}, {{"query", "MARKER"}});
  REQUIRE(a.status == 200);
  REQUIRE_FALSE(a.body["atoms"].empty());
  for (const auto& atom : a.body["atoms"]) {
    CHECK(atom["atom"].get<std::string>().find("marker") != std::string::npos);
    CHECK(atom["atom_id"].get<int>() > 0);
    CHECK(atom.contains("coverage"));
  }
  auto limited = call(*s, "GET", "/api/v1/atoms", nullptr, {}, {{"query", ""}, {"limit", "3"}});
  CHECK(limited.body["atoms"].size() == 3);
  CHECK(call(*s, "GET", "/api/v1/atoms", nullptr, {}, {{"limit", "0"}}).status == 400);
}

TEST_CASE("HTTP transport: headers, static assets, error bodies") {
  lorex::testing::TempDir dir("service");
  std::ofstream(dir.path() / "index.html") << "<html>console</html>";
  ServiceConfig cfg;
  cfg.port = 0;
  cfg.static_dir = dir.path();
  auto s = make_service(cfg);
  const int port = s->bind();
  REQUIRE(port > 0);
  std::thread server([&] { s->serve(); });

  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(30, 0);
  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["model_loaded"] == true);

  auto page = cli.Get("/index.html");
  REQUIRE(page);
  CHECK(page->body == "<html>console</html>");

  httplib::Headers h = {{"X-Session-Id", "tab-1"}};
  auto ex = cli.Post("/api/v1/steer/exclude", h, json{{"atom_ids", {spurious()}}}.dump(), "application/json");
  REQUIRE(ex);
  CHECK(ex->status == 200);
  CHECK(ex->get_header_value("X-Session-Id") == "tab-1");
  auto e = cli.Post("/api/v1/explain", h, json{{"instance_id", test_id(0)}}.dump(), "application/json");
  REQUIRE(e);
  CHECK(json::parse(e->body)["exclusion_version"] == 1);
  auto other = cli.Post("/api/v1/explain?session_id=tab-2", json{{"instance_id", test_id(0)}}.dump(),
                        "application/json");
  REQUIRE(other);
  CHECK(json::parse(other->body)["exclusion_version"] == 0);

  auto k0 = cli.Get("/api/v1/clusters?k=0");
  REQUIRE(k0);
  CHECK(k0->status == 422);
  CHECK(json::parse(k0->body)["code"] == "invalid_k");

  auto missing = cli.Get("/api/v2/explain");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  auto body = json::parse(missing->body);
  CHECK(body.contains("code"));
  CHECK(body.contains("message"));

  s->stop();
  server.join();
}
