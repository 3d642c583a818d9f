#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lorex/diff/checkpoint.hpp"
#include "lorex/explain.hpp"
#include "lorex/hash.hpp"
#include "lorex/service.hpp"
#include "lorex/trainer.hpp"
#include "run_dir.hpp"

#ifndef LOREX_DEFAULT_DATA_DIR
#define LOREX_DEFAULT_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lorex;
using namespace lorex::cli;

namespace {

using Clock = std::chrono::steady_clock;

struct Flag {
  std::string key;
  CLI::Option* option = nullptr;
  std::function<json()> value;
};

/// Options shared by every subcommand. Values not given on the command line are
/// taken from the run's config.json, then from the defaults below.
struct Options {
  std::string run_dir = "run";
  std::string dataset;
  std::uint64_t seed = 0;
  double noise_ratio = 0.0;
  std::size_t num_atoms = 5000;
  std::size_t min_df = 200;
  std::size_t pretrain_samples = 10000;
  std::size_t max_rule_len = 4;
  std::size_t sampler_k = 200;
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double lr = 1e-5;
  double gamma = 0.95;
  std::size_t hidden = 512;
  std::size_t pretrain_epochs = 10;
  std::size_t pretrain_batch = 16;
  double pretrain_lr = 1e-5;
  std::size_t estimator_ffn = 512;
  std::size_t estimator_mlp = 256;
  bool force = false;
  bool quiet = false;

  std::string split = "test";
  std::optional<std::int64_t> instance_id;
  std::string instance_json;
  std::vector<int> exclude;
  std::size_t k = 10;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;
  double session_idle_minutes = 30;
  std::vector<double> ratios = {0.05, 0.1, 0.15, 0.2};

  std::vector<Flag> flags;
};

template <class T>
void add_flag(CLI::App& app, Options& o, const std::string& key, T& target, const std::string& help) {
  auto* opt = app.add_option("--" + key, target, help)
                  ->capture_default_str()
                  ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  o.flags.push_back({key, opt, [&target] { return json(target); }});
}

struct Stage {
  std::string name;
  std::string command;
  std::vector<std::string> inputs;
  std::vector<std::string> keys;
};

const std::vector<Stage>& stages() {
  static const std::vector<Stage> s = {
      {"base", "train-base", {}, {"dataset", "dataset_sha256", "seed", "noise-ratio", "epochs", "batch", "lr", "gamma", "hidden"}},
      {"embeddings", "extract-embeddings", {"base"}, {}},
      {"atoms", "build-atoms", {"embeddings"}, {"num-atoms"}},
      {"rules", "sample-rules", {"atoms"}, {"min-df", "pretrain-samples", "sampler-k", "max-rule-len", "seed"}},
      {"estimator", "pretrain-ce", {"rules"},
       {"pretrain-epochs", "pretrain-batch", "pretrain-lr", "gamma", "estimator-ffn", "estimator-mlp", "hidden",
        "max-rule-len", "seed"}},
      {"selor", "train", {"estimator"}, {"epochs", "batch", "lr", "gamma", "hidden", "max-rule-len", "seed"}},
      {"explanations", "explain", {"selor"}, {}},
      {"clusters", "cluster", {"selor"}, {}},
      {"noise-grid", "noise-grid", {}, {}},
  };
  return s;
}

const Stage& stage(const std::string& name) {
  for (const auto& s : stages())
    if (s.name == name) return s;
  throw std::logic_error("unknown stage " + name);
}

fs::path resolve_dataset(const std::string& name) {
  std::vector<fs::path> candidates = {name};
  if (fs::path(name).extension() != ".json") {
    std::vector<fs::path> dirs;
    if (const char* env = std::getenv("LOREX_DATA_DIR"); env && *env) dirs.emplace_back(env);
    dirs.emplace_back(LOREX_DEFAULT_DATA_DIR);
    for (const auto& d : dirs) candidates.push_back(d / (name + ".json"));
  }
  for (const auto& c : candidates)
    if (fs::is_regular_file(c)) return fs::absolute(c).lexically_normal();
  throw CliError(kExitUsage, "dataset '" + name + "' not found (looked for a .json description as given, in "
                             "$LOREX_DATA_DIR and in " LOREX_DEFAULT_DATA_DIR ")");
}

class Runner {
 public:
  Runner(Options& o) : o_(o), dir_(o.run_dir), t0_(Clock::now()) {}

  void say(const std::string& msg) const {
    if (o_.quiet) return;
    const double s = std::chrono::duration<double>(Clock::now() - t0_).count();
    std::cerr << "[lorex " << std::fixed << std::setprecision(1) << s << "s] " << msg << std::endl;
  }

  /// Merges explicit flags over config.json and persists the result.
  void resolve(bool need_dataset = true) {
    json cfg = dir_.stored_config().value_or(json::object());
    for (const auto& f : o_.flags)
      if (f.option->count() > 0 || !cfg.contains(f.key)) cfg[f.key] = f.value();
    if (o_.flags.front().option->count() > 0) cfg["dataset"] = resolve_dataset(cfg["dataset"].get<std::string>()).string();
    if (cfg["dataset"].get<std::string>().empty()) {
      if (need_dataset) throw CliError(kExitUsage, "--dataset is required: " + dir_.root().string() + " has no config.json");
    } else {
      const fs::path p = cfg["dataset"].get<std::string>();
      if (!fs::is_regular_file(p)) throw CliError(kExitUsage, "dataset description " + p.string() + " no longer exists");
      auto dc = DatasetConfig::load(p);
      const auto& data = dc.kind == DatasetKind::Text ? dc.text.path : dc.tabular.path;
      cfg["dataset_sha256"] = sha256_hex(sha256_file(p) + (fs::exists(data) ? sha256_file(data) : std::string{}));
    }
    cfg_ = std::move(cfg);
    if (dir_.stored_config() != cfg_) dir_.write_config(cfg_);
  }

  const json& config() const { return cfg_; }
  RunDirectory& dir() { return dir_; }

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.set_seed(cfg_["seed"].get<std::uint64_t>());
    p.train.epochs = cfg_["epochs"];
    p.train.batch = cfg_["batch"];
    p.train.lr = cfg_["lr"];
    p.train.gamma = cfg_["gamma"];
    p.train.hidden = cfg_["hidden"];
    p.train.max_len = cfg_["max-rule-len"];
    p.pool.num_atoms = cfg_["num-atoms"];
    p.sampler.min_df = cfg_["min-df"];
    p.sampler.per_length = cfg_["pretrain-samples"];
    p.sampler.k = cfg_["sampler-k"];
    p.sampler.max_len = p.train.max_len;
    p.pretrain.epochs = cfg_["pretrain-epochs"];
    p.pretrain.batch = cfg_["pretrain-batch"];
    p.pretrain.lr = cfg_["pretrain-lr"];
    p.pretrain.gamma = cfg_["gamma"];
    p.estimator_ffn = cfg_["estimator-ffn"];
    p.estimator_mlp = cfg_["estimator-mlp"];
    p.noise_ratio = cfg_["noise-ratio"];
    return p;
  }

  /// The dataset as every stage sees it, with train labels flipped when noise is configured.
  Dataset dataset(bool with_noise = true) const {
    auto ds = load_dataset(DatasetConfig::load(cfg_["dataset"].get<std::string>()), cfg_["seed"].get<std::uint64_t>());
    const double r = cfg_["noise-ratio"];
    if (with_noise && r > 0) inject_symmetric_noise(ds, r, cfg_["seed"].get<std::uint64_t>());
    return ds;
  }

  json params(const Stage& s, const json& extra = json::object()) const {
    json p = json::object();
    for (const auto& k : s.keys) p[k] = cfg_.at(k);
    for (const auto& [k, v] : extra.items()) p[k] = v;
    return p;
  }

  /// Verifies a completed stage, its settings and its whole upstream chain.
  void require(const std::string& name) const {
    const auto& s = stage(name);
    auto m = dir_.marker(name);
    if (!m || !dir_.intact(name))
      throw CliError(kExitPrerequisite, "missing prerequisite: stage '" + name + "' has not completed in " +
                                            dir_.root().string() + "; run `lorex " + s.command + "` first");
    const json want = params(s);
    if (m->params != want) {
      std::string diff;
      for (const auto& [k, v] : want.items())
        if (!m->params.contains(k) || m->params[k] != v)
          diff += (diff.empty() ? "" : ", ") + k + " " + (m->params.contains(k) ? m->params[k].dump() : "unset") +
                  " -> " + v.dump();
      throw CliError(kExitPrerequisite, "stage '" + name + "' was produced with different settings (" + diff +
                                            "); rerun `lorex " + s.command + "`");
    }
    for (const auto& in : s.inputs) {
      require(in);
      auto it = m->inputs.find(in);
      if (it == m->inputs.end() || it->second != dir_.marker_digest(in))
        throw CliError(kExitPrerequisite, "stage '" + name + "' is stale: '" + in + "' changed since it ran; rerun `lorex " +
                                              s.command + "`");
    }
  }

  /// Runs `body` unless the stage already completed with identical settings and inputs.
  void run(const std::string& name, const json& extra, const std::function<std::vector<std::string>()>& body) {
    const auto& s = stage(name);
    for (const auto& in : s.inputs) require(in);
    const json p = params(s, extra);
    std::map<std::string, std::string> inputs;
    for (const auto& in : s.inputs) inputs[in] = dir_.marker_digest(in);
    if (!o_.force) {
      auto m = dir_.marker(name);
      if (m && m->params == p && m->inputs == inputs && dir_.intact(name)) {
        say(name + ": up to date, artifacts verified (use --force to rerun)");
        return;
      }
    }
    dir_.remove_marker(name);
    const auto t = Clock::now();
    say(name + ": running");
    auto artifacts = body();
    const double secs = std::chrono::duration<double>(Clock::now() - t).count();
    dir_.complete(name, p, inputs, artifacts, secs);
    say(name + ": done in " + std::to_string(secs) + "s");
  }

  AtomPool pool(const Dataset& ds) const {
    auto pool = AtomPool::from_json(json::parse(read_text(dir_.path("atoms.json"))), ds);
    auto ck = diff::load_checkpoint(dir_.path("checkpoints/atom_embeddings.bin"));
    const auto& t = ck.tensors.at(0);
    pool.set_embeddings(t.values, t.shape.at(1));
    return pool;
  }

  SelorModel selor(const Dataset& ds) const { return SelorModel::load(dir_.path("checkpoints/selor"), pool(ds)); }

 private:
  Options& o_;
  RunDirectory dir_;
  Clock::time_point t0_;
  json cfg_;
};

std::string epoch_line(const std::string& what, const EpochLog& e) {
  std::ostringstream s;
  s << what << " epoch " << e.epoch << " loss " << e.loss << " val PR-AUC " << e.val.pr_auc << " (" << e.seconds
    << "s)";
  return s.str();
}

json pretrain_json(const PretrainReport& r) {
  return {{"val_mae_p", r.val_mae_p},     {"val_mae_p_by_len", r.val_mae_p_by_len}, {"val_mae_c", r.val_mae_c},
          {"train_rules", r.train_rules}, {"val_rules", r.val_rules},                {"seconds", r.seconds}};
}

std::string merged_csv(const MetricsReport& a, const MetricsReport& b) {
  auto second = b.csv();
  return a.csv() + second.substr(second.find('\n') + 1);
}

std::string ratio_name(double r) {
  std::ostringstream s;
  s << "ratio-" << std::fixed << std::setprecision(2) << r;
  return s.str();
}

void cmd_train_base(Runner& R) {
  R.run("base", {}, [&] {
    auto ds = R.dataset();
    auto pc = R.pipeline();
    MetricsReport report;
    auto base = train_base(ds, pc.train, &report, [&](const EpochLog& e) { R.say(epoch_line("base", e)); });
    base.save(R.dir().path("checkpoints/base.bin"));
    write_text(R.dir().path("base_metrics.json"), report.to_json().dump(2) + "\n");
    write_text(R.dir().path("base_metrics.csv"), report.csv());
    R.say("base test PR-AUC " + std::to_string(report.test.pr_auc));
    return std::vector<std::string>{"checkpoints/base.bin", "base_metrics.json", "base_metrics.csv"};
  });
}

void cmd_extract_embeddings(Runner& R) {
  R.run("embeddings", {}, [&] {
    auto ds = R.dataset();
    auto base = BaseModel::load(R.dir().path("checkpoints/base.bin"));
    auto reps = base.representations(ds, ds.splits.train);
    diff::save_checkpoint(R.dir().path("checkpoints/train_embeddings.bin"),
                          {{"train_representations", {ds.train_size(), base.hidden()}, std::move(reps)}},
                          {{"kind", "train-embeddings"}});
    return std::vector<std::string>{"checkpoints/train_embeddings.bin"};
  });
}

void cmd_build_atoms(Runner& R) {
  R.run("atoms", {}, [&] {
    auto ds = R.dataset();
    auto pool = AtomPool::build(ds, R.pipeline().pool);
    auto ck = diff::load_checkpoint(R.dir().path("checkpoints/train_embeddings.bin"));
    const auto& reps = ck.tensors.at(0);
    pool.init_embeddings(ds, reps.values, reps.shape.at(1));
    write_text(R.dir().path("atoms.json"), pool.to_json().dump(1) + "\n");
    diff::save_checkpoint(R.dir().path("checkpoints/atom_embeddings.bin"),
                          {{"atoms.embedding", {pool.size(), pool.embedding_dim()}, pool.embeddings()}},
                          {{"kind", "atom-embeddings"}});
    R.say("atom pool: " + std::to_string(pool.size() - 1) + " atoms plus NULL");
    return std::vector<std::string>{"atoms.json", "checkpoints/atom_embeddings.bin"};
  });
}

void cmd_sample_rules(Runner& R) {
  R.run("rules", {}, [&] {
    auto ds = R.dataset();
    auto pool = R.pool(ds);
    auto tm = TrueMatrix::build(pool, ds);
    auto rules = sample_rules(tm, R.pipeline().sampler);
    for (const auto& w : rules.warnings) R.say("warning: " + w);
    write_rules_jsonl(R.dir().path("rules.jsonl"), rules);
    json per_length = json::array();
    for (const auto& l : rules.by_length) per_length.push_back(l.size());
    json summary = {{"rules", rules.size()},
                    {"per_length", per_length},
                    {"survivors", rules.survivors},
                    {"warnings", rules.warnings}};
    write_text(R.dir().path("rules_summary.json"), summary.dump(2) + "\n");
    R.say("sampled " + std::to_string(rules.size()) + " rules");
    return std::vector<std::string>{"rules.jsonl", "rules_summary.json"};
  });
}

void cmd_pretrain_ce(Runner& R) {
  R.run("estimator", {}, [&] {
    auto ds = R.dataset();
    auto pc = R.pipeline();
    auto pool = R.pool(ds);
    auto rules = read_rules_jsonl(R.dir().path("rules.jsonl"));
    ConsequentEstimator est(estimator_config(ds, pc), pool.embeddings(), ds.train_prior(), pc.pretrain.seed);
    auto report = est.pretrain(rules, pc.pretrain, [&](const PretrainEpoch& e) {
      R.say("estimator epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) + " val MAE " +
            std::to_string(e.mae_p));
    });
    est.save(R.dir().path("checkpoints/estimator.bin"));
    write_text(R.dir().path("pretrain_metrics.csv"), report.csv());
    write_text(R.dir().path("pretrain_metrics.json"), pretrain_json(report).dump(2) + "\n");
    return std::vector<std::string>{"checkpoints/estimator.bin", "pretrain_metrics.csv", "pretrain_metrics.json"};
  });
}

void cmd_train(Runner& R) {
  R.run("selor", {}, [&] {
    auto ds = R.dataset();
    auto pc = R.pipeline();
    auto base = BaseModel::load(R.dir().path("checkpoints/base.bin"));
    GeneratorConfig gc;
    gc.input_dim = ds.input_dim();
    gc.hidden = pc.train.hidden;
    SelorModel model(gc, R.pool(ds), ConsequentEstimator::load(R.dir().path("checkpoints/estimator.bin")),
                     pc.train.seed);
    model.init_backbone_from(base);
    auto report = train_selor(model, ds, pc.train, {}, [&](const EpochLog& e) { R.say(epoch_line("selor", e)); });
    model.save(R.dir().path("checkpoints/selor"));

    const auto base_json = json::parse(read_text(R.dir().path("base_metrics.json")));
    json metrics = {{"base", base_json},
                    {"pretrain", json::parse(read_text(R.dir().path("pretrain_metrics.json")))},
                    {"selor", report.to_json()},
                    {"config", R.config()}};
    write_text(R.dir().path("metrics.json"), metrics.dump(2) + "\n");
    auto base_csv = read_text(R.dir().path("base_metrics.csv"));
    auto selor_csv = report.csv();
    write_text(R.dir().path("metrics.csv"), base_csv + selor_csv.substr(selor_csv.find('\n') + 1));
    R.say("self-explaining model test PR-AUC " + std::to_string(report.test.pr_auc) + ", base " +
          std::to_string(base_json["test"]["pr_auc"].get<double>()));
    return std::vector<std::string>{"checkpoints/selor/generator.bin", "checkpoints/selor/estimator.bin",
                                    "metrics.json", "metrics.csv"};
  });
}

void cmd_explain(Runner& R, const Options& o) {
  if (o.instance_id || !o.instance_json.empty()) {
    R.require("selor");
    auto ds = std::make_shared<const Dataset>(R.dataset());
    auto model = std::make_shared<const SelorModel>(R.selor(*ds));
    auto explainer = std::make_shared<const Explainer>(model, ds);
    SteeringSession session(explainer, {});
    if (!o.exclude.empty()) session.exclude(o.exclude);
    Instance x;
    if (o.instance_id) {
      auto it = std::find_if(ds->instances.begin(), ds->instances.end(),
                             [&](const Instance& i) { return i.id == *o.instance_id; });
      if (it == ds->instances.end()) throw CliError(kExitUsage, "no instance with id " + std::to_string(*o.instance_id));
      x = *it;
    } else {
      x = instance_from_json(*ds, json::parse(o.instance_json));
    }
    std::cout << session.explain(x).to_json(*ds).dump(2) << std::endl;
    return;
  }
  R.run("explanations", {{"split", o.split}, {"exclude", o.exclude}}, [&] {
    auto ds = std::make_shared<const Dataset>(R.dataset());
    auto model = std::make_shared<const SelorModel>(R.selor(*ds));
    auto explainer = std::make_shared<const Explainer>(model, ds);
    std::vector<std::string> artifacts = {"explanations.jsonl"};
    std::ostringstream out;
    if (o.exclude.empty()) {
      for (const auto& e : explainer->baseline(o.split)) out << e.to_json(*ds).dump() << '\n';
    } else {
      SteeringSession session(explainer, {o.split});
      auto report = session.exclude(o.exclude);
      for (std::size_t i = 0; i < explainer->split_rows(o.split).size(); ++i)
        out << session.current(o.split, i).to_json(*ds).dump() << '\n';
      write_text(R.dir().path("steering.json"), report.to_json(model->pool(), *ds).dump(2) + "\n");
      artifacts.push_back("steering.json");
      R.say("exclusion affected " + std::to_string(report.affected) + " explanations");
    }
    write_text(R.dir().path("explanations.jsonl"), out.str());
    return artifacts;
  });
}

void cmd_cluster(Runner& R, const Options& o) {
  R.run("clusters", {{"k", o.k}}, [&] {
    auto ds = std::make_shared<const Dataset>(R.dataset());
    auto model = std::make_shared<const SelorModel>(R.selor(*ds));
    Explainer explainer(model, ds);
    if (o.k < 1 || o.k > ds->train_size()) throw CliError(kExitUsage, "--k must be between 1 and the train size");
    const auto& gen = model->generator();
    auto report = cluster_explanations(explainer.baseline("train"), *ds, model->pool(), gen.atom_embeddings().data(),
                                       gen.config().hidden, o.k, R.config()["seed"].get<std::uint64_t>());
    auto table = report.table(model->pool(), *ds);
    write_text(R.dir().path("clusters.json"), report.to_json(model->pool(), *ds).dump(2) + "\n");
    write_text(R.dir().path("clusters.txt"), table);
    std::cout << table;
    return std::vector<std::string>{"clusters.json", "clusters.txt"};
  });
}

void cmd_noise_grid(Runner& R, const Options& o) {
  json extra = {{"ratios", o.ratios}};
  for (const auto& k : {"dataset", "dataset_sha256", "seed", "epochs", "batch", "lr", "gamma", "hidden", "num-atoms",
                        "min-df", "pretrain-samples", "sampler-k", "max-rule-len", "pretrain-epochs",
                        "pretrain-batch", "pretrain-lr", "estimator-ffn", "estimator-mlp"})
    extra[k] = R.config().at(k);
  auto clean = R.dataset(false);
  std::vector<std::string> artifacts;
  auto body = [&] {
    json rows = json::array();
    std::string csv = "ratio,model,pr_auc,f1,accuracy\n";
    for (double ratio : o.ratios) {
      auto pc = R.pipeline();
      pc.noise_ratio = ratio;
      R.say("noise ratio " + std::to_string(ratio));
      auto r = run_pipeline(clean, pc, [&](const std::string& m) { R.say("  " + m); });
      const auto child = std::string("noise-grid/") + ratio_name(ratio);
      auto cfg = R.config();
      cfg["noise-ratio"] = ratio;
      write_text(R.dir().path(child + "/config.json"), cfg.dump(2) + "\n");
      json metrics = {{"base", r.base_report.to_json()},
                      {"pretrain", pretrain_json(r.pretrain_report)},
                      {"selor", r.selor_report.to_json()},
                      {"flipped", r.flipped.size()}};
      write_text(R.dir().path(child + "/metrics.json"), metrics.dump(2) + "\n");
      write_text(R.dir().path(child + "/metrics.csv"), merged_csv(r.base_report, r.selor_report));
      artifacts.push_back(child + "/metrics.json");
      for (const auto* rep : {&r.base_report, &r.selor_report}) {
        const auto& m = rep->test;
        rows.push_back({{"ratio", ratio}, {"model", rep->model}, {"pr_auc", m.pr_auc}, {"f1", m.f1},
                        {"accuracy", m.accuracy}});
        std::ostringstream line;
        line << ratio << ',' << rep->model << ',' << m.pr_auc << ',' << m.f1 << ',' << m.accuracy << '\n';
        csv += line.str();
      }
    }
    write_text(R.dir().path("noise_grid.json"), rows.dump(2) + "\n");
    write_text(R.dir().path("noise_grid.csv"), csv);
    std::cout << csv;
    artifacts.push_back("noise_grid.json");
    artifacts.push_back("noise_grid.csv");
    return artifacts;
  };
  R.run("noise-grid", extra, body);
}

std::atomic<Service*> g_service{nullptr};

void on_signal(int) {
  if (auto* s = g_service.load()) s->stop();
}

void cmd_serve(Runner& R, const Options& o) {
  ServiceConfig sc;
  sc.host = o.host;
  sc.port = o.port;
  sc.static_dir = o.static_dir;
  sc.session_idle = std::chrono::milliseconds(static_cast<long long>(o.session_idle_minutes * 60000.0));
  Service service(sc);
  {
    RunLock lock(R.dir().root());
    R.require("selor");
    auto ds = std::make_shared<const Dataset>(R.dataset());
    auto model = std::make_shared<const SelorModel>(R.selor(*ds));
    service.load(ds, model, json::parse(read_text(R.dir().path("metrics.json"))));
  }
  if (service.bind() < 0)
    throw CliError(kExitRuntime, "cannot listen on " + o.host + ":" + std::to_string(o.port));
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "serving on http://" << o.host << ":" << service.port() << std::endl;
  service.serve();
  g_service = nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Self-explaining classifiers with logic-rule explanations"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_option("--run-dir,-r", o.run_dir, "Run directory holding config, checkpoints and stage markers")
      ->capture_default_str();
  add_flag(app, o, "dataset", o.dataset, "Dataset name (resolved in $LOREX_DATA_DIR) or path to its .json description");
  add_flag(app, o, "seed", o.seed, "Run seed, expanded per stage");
  add_flag(app, o, "noise-ratio", o.noise_ratio, "Fraction of train labels flipped symmetrically");
  add_flag(app, o, "num-atoms", o.num_atoms, "Word atoms kept for text datasets");
  add_flag(app, o, "min-df", o.min_df, "Minimum train coverage of a sampled antecedent");
  add_flag(app, o, "pretrain-samples", o.pretrain_samples, "Sampled antecedents per rule length");
  add_flag(app, o, "max-rule-len", o.max_rule_len, "Maximum antecedent length");
  add_flag(app, o, "sampler-k", o.sampler_k, "Survivors kept while extending (multiple of --pretrain-samples)");
  add_flag(app, o, "epochs", o.epochs, "Training epochs (base and self-explaining model)");
  add_flag(app, o, "batch", o.batch, "Mini-batch size");
  add_flag(app, o, "lr", o.lr, "Adam learning rate");
  add_flag(app, o, "gamma", o.gamma, "Exponential learning-rate decay per epoch");
  add_flag(app, o, "hidden", o.hidden, "Backbone and embedding width");
  add_flag(app, o, "pretrain-epochs", o.pretrain_epochs, "Consequent estimator epochs");
  add_flag(app, o, "pretrain-batch", o.pretrain_batch, "Consequent estimator mini-batch size");
  add_flag(app, o, "pretrain-lr", o.pretrain_lr, "Consequent estimator learning rate");
  add_flag(app, o, "estimator-ffn", o.estimator_ffn, "Consequent estimator feed-forward width");
  add_flag(app, o, "estimator-mlp", o.estimator_mlp, "Consequent estimator MLP width");
  app.add_flag("--force", o.force, "Rerun the stage even when it is up to date");
  app.add_flag("--quiet,-q", o.quiet, "Suppress progress output");
  app.footer("Exit codes: 0 success, 2 usage error, 3 prerequisite missing, 4 runtime failure.\n"
             "LOREX_DATA_DIR sets the directory searched for dataset descriptions.");

  auto* train_base = app.add_subcommand("train-base", "Train the base classifier");
  auto* extract = app.add_subcommand("extract-embeddings", "Extract base-model train representations");
  auto* atoms = app.add_subcommand("build-atoms", "Build the atom pool and its embeddings");
  auto* sample = app.add_subcommand("sample-rules", "Sample frequent antecedents for estimator pretraining");
  auto* pretrain = app.add_subcommand("pretrain-ce", "Pretrain the consequent estimator");
  auto* train = app.add_subcommand("train", "Train the self-explaining model");
  auto* grid = app.add_subcommand("noise-grid", "Train both models under label noise, one child run per ratio");
  grid->add_option("--ratios", o.ratios, "Noise ratios")->delimiter(',')->capture_default_str();
  auto* explain = app.add_subcommand("explain", "Explain a split (to explanations.jsonl) or a single instance");
  explain->add_option("--split", o.split, "Split to explain")->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  explain->add_option("--instance-id", o.instance_id, "Explain one dataset instance and print it");
  explain->add_option("--instance-json", o.instance_json, "Explain one instance given as a JSON object of fields");
  explain->add_option("--exclude", o.exclude, "Atom ids excluded at test time")->delimiter(',');
  auto* cluster = app.add_subcommand("cluster", "Cluster train explanations");
  cluster->add_option("--k", o.k, "Number of clusters")->capture_default_str();
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API for the steering console");
  serve->add_option("--host", o.host, "Bind address")->capture_default_str();
  serve->add_option("--port", o.port, "Port (0 picks a free one)")->capture_default_str();
  serve->add_option("--static-dir", o.static_dir, "Console assets served at /");
  serve->add_option("--session-idle-minutes", o.session_idle_minutes, "Idle time before a session expires")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    Runner R(o);
    if (serve->parsed()) {
      R.resolve();
      cmd_serve(R, o);
      return kExitOk;
    }
    RunLock lock(o.run_dir);
    R.resolve();
    if (train_base->parsed()) cmd_train_base(R);
    else if (extract->parsed()) cmd_extract_embeddings(R);
    else if (atoms->parsed()) cmd_build_atoms(R);
    else if (sample->parsed()) cmd_sample_rules(R);
    else if (pretrain->parsed()) cmd_pretrain_ce(R);
    else if (train->parsed()) cmd_train(R);
    else if (grid->parsed()) cmd_noise_grid(R, o);
    else if (explain->parsed()) cmd_explain(R, o);
    else if (cluster->parsed()) cmd_cluster(R, o);
    return kExitOk;
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.code();
  } catch (const DataError& e) {
    std::cerr << "error: " << e.field() << ": " << e.what() << std::endl;
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitRuntime;
  }
}
