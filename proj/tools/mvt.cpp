// mvt: generate scenarios, train, predict and evaluate from the command line.
//
// Every subcommand resolves one effective config (built-in defaults, then
// --config FILE, then --set key=value overrides, then dedicated flags),
// prints it as a single JSON line and writes it to <out>/config.json, so a
// run can be reproduced with `--config <out>/config.json`.

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "multiverse/multiverse.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Logging and failures

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

Level g_level = Level::info;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Level level_from_env() {
  const char* v = std::getenv("MVT_LOG");
  if (!v || !*v) return Level::info;
  const std::string s = v;
  if (s == "error" || s == "0") return Level::error;
  if (s == "warn" || s == "1") return Level::warn;
  if (s == "info" || s == "2") return Level::info;
  if (s == "debug" || s == "3") return Level::debug;
  throw UsageError("MVT_LOG must be one of error|warn|info|debug, got '" + s + "'");
}

void log(Level lv, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (lv <= g_level) std::cerr << "[mvt " << names[static_cast<int>(lv)] << "] " << msg << '\n';
}

int exit_code_for(mvt::ErrorKind k) {
  switch (k) {
    case mvt::ErrorKind::training: return 3;
    case mvt::ErrorKind::generation:
    case mvt::ErrorKind::numeric:
    case mvt::ErrorKind::check:
    case mvt::ErrorKind::io: return 1;
    default: return 2;
  }
}

int fail(const std::string& kind, int code, const std::string& msg, json extra = json::object()) {
  extra["error"] = kind;
  extra["exit"] = code;
  extra["message"] = msg;
  std::cerr << extra.dump() << '\n';
  return code;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError("missing --" + what);
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

void write_text(const fs::path& path, const std::string& body) { mvt::detail::write_atomic(path, body); }

// ---------------------------------------------------------------------------
// Effective config

json default_config() {
  json gen = mvt::to_json(mvt::GeneratorConfig{});
  gen["n"] = 20;
  json train = mvt::to_json(mvt::TrainConfig{});
  train.erase("seed");
  return {{"seed", 0},
          {"generate", gen},
          {"model", mvt::to_json(mvt::ModelConfig{})},
          {"train", train},
          {"predict",
           {{"k", 20},
            {"gamma", 1.0},
            {"rule", "cross_beam"},
            {"steps", 0},
            {"strict_bounds", false},
            {"with_beliefs", true}}},
          {"eval", {{"k", 20}, {"horizons", {1.0, 2.0, 3.0}}, {"unit", "seconds"}}},
          {"run", {{"checkpoint_every", 0}}}};
}

bool same_type(const json& def, const json& v) {
  if (def.is_null()) return true;
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number_float()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return def.type() == v.type();
}

class ConfigBuilder {
 public:
  ConfigBuilder() : cfg_(default_config()) {}

  void merge_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path);
    std::ifstream is(path);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw mvt::ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw mvt::ConfigError(path + ": top level must be an object");
    merge(cfg_, j, "");
  }

  void set(const std::string& dotted, json value) {
    json* node = &cfg_;
    std::stringstream ss(dotted);
    std::vector<std::string> parts;
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    if (parts.empty()) throw mvt::ConfigError("empty config key");
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!node->is_object() || !node->contains(parts[i])) throw mvt::ConfigError("unknown config key '" + dotted + "'");
      node = &(*node)[parts[i]];
    }
    if (node->is_object()) throw mvt::ConfigError("config key '" + dotted + "' is a section, not a value");
    if (!same_type(*node, value))
      throw mvt::ConfigError("config key '" + dotted + "' expects " + node->type_name() + ", got " + value.dump());
    *node = std::move(value);
    explicit_.insert(dotted);
  }

  void set_raw(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json v;
    try {
      v = json::parse(raw);
    } catch (const json::exception&) {
      v = raw;
    }
    set(key, std::move(v));
  }

  json& config() { return cfg_; }
  const std::set<std::string>& explicit_keys() const { return explicit_; }

 private:
  void merge(json& base, const json& over, const std::string& prefix) {
    for (const auto& [key, v] : over.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (!base.contains(key)) throw mvt::ConfigError("unknown config key '" + path + "'");
      json& slot = base[key];
      if (slot.is_object()) {
        if (!v.is_object()) throw mvt::ConfigError("config key '" + path + "' must be an object");
        merge(slot, v, path);
        continue;
      }
      if (!same_type(slot, v))
        throw mvt::ConfigError("config key '" + path + "' expects " + slot.type_name() + ", got " + v.dump());
      // Keys that merely restate a default do not count as explicit, so a
      // config echoed by one subcommand can be fed to another.
      if (slot != v) explicit_.insert(path);
      slot = v;
    }
  }

  json cfg_;
  std::set<std::string> explicit_;
};

template <typename F>
auto parse_section(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw mvt::ConfigError(name + ": " + e.what());
  }
}

mvt::GeneratorConfig generator_config(const json& cfg) {
  json j = cfg.at("generate");
  j.erase("n");
  return parse_section("generate", [&] { return mvt::generator_config_from_json(j); });
}

mvt::ModelConfig model_config(const json& cfg) {
  return parse_section("model", [&] { return mvt::model_config_from_json(cfg.at("model")); });
}

mvt::TrainConfig train_config(const json& cfg) {
  json j = cfg.at("train");
  j["seed"] = cfg.at("seed");
  return parse_section("train", [&] { return mvt::train_config_from_json(j); });
}

void echo_config(const json& cfg, const fs::path& out) {
  std::cout << "config " << cfg.dump() << '\n';
  write_text(out / "config.json", cfg.dump(2) + "\n");
}

// For predict/eval the model comes from the checkpoint; explicit model keys
// in the config must agree with it.
void adopt_checkpoint_model(json& cfg, const json& ck_model, const std::set<std::string>& explicit_keys) {
  for (const auto& key : explicit_keys) {
    if (!key.starts_with("model.")) continue;
    const std::string leaf = key.substr(6);
    if (!ck_model.contains(leaf)) throw mvt::ConfigError("checkpoint model config lacks '" + leaf + "'");
    if (ck_model.at(leaf) != cfg.at("model").at(leaf))
      throw mvt::ConfigError("model mismatch: " + key + " is " + cfg.at("model").at(leaf).dump() +
                             " in the config but " + ck_model.at(leaf).dump() + " in the checkpoint");
  }
  cfg["model"] = ck_model;
}

// ---------------------------------------------------------------------------
// Shared options

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string scale;
  std::size_t jobs = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file");
  sub->add_option("--set", c.sets, "Override a config value, e.g. --set model.d_enc=16");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_option("--scale", c.scale, "Grid scales: fine or multi")->check(CLI::IsMember({"fine", "multi"}));
  sub->add_option("--jobs", c.jobs, "Worker threads for per-scenario work")->check(CLI::PositiveNumber);
}

ConfigBuilder build_config(const Common& c) {
  ConfigBuilder b;
  if (!c.config_path.empty()) b.merge_file(c.config_path);
  for (const auto& s : c.sets) b.set_raw(s);
  if (c.seed) b.set("seed", *c.seed);
  return b;
}

fs::path prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw mvt::IoError("cannot create output directory " + out + ": " + ec.message());
  return fs::path(out);
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results land in their
// own slot, and the first failure in index order is rethrown.
template <typename R, typename F>
std::vector<R> parallel_map(std::size_t n, std::size_t jobs, F fn) {
  std::vector<std::optional<R>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), std::max<std::size_t>(n, 1));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  std::vector<R> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  Common common;
  std::optional<std::size_t> n;
  std::optional<std::size_t> j;
};

int cmd_generate(const GenerateArgs& a) {
  auto b = build_config(a.common);
  if (a.n) b.set("generate.n", *a.n);
  if (a.j) {
    b.set("generate.num_futures", *a.j);
    b.set("generate.num_destinations", *a.j);
  }
  if (!a.common.scale.empty()) b.set("generate.multi_scale", a.common.scale == "multi");
  json& cfg = b.config();
  const auto gcfg = generator_config(cfg);
  mvt::validate(gcfg);
  const auto n = cfg.at("generate").at("n").get<std::size_t>();
  if (n < 1) throw mvt::ConfigError("generate.n must be >= 1");
  const auto out = prepare_out(a.common.out);
  echo_config(cfg, out);

  const auto set = mvt::generate_scenarios(gcfg, cfg.at("seed").get<std::uint64_t>(), n);
  mvt::write_scenarios(set, out / "scenarios.jsonl");
  std::size_t futures = 0, points = 0;
  for (const auto& s : set.scenarios) {
    futures += s.futures.size();
    for (const auto& f : s.futures) points += f.size();
  }
  std::cout << "scenarios " << set.scenarios.size() << " mean_J "
            << fmt(static_cast<double>(futures) / static_cast<double>(set.scenarios.size()), "%.4f")
            << " mean_future_len " << fmt(static_cast<double>(points) / static_cast<double>(futures), "%.4f") << '\n';
  log(Level::info, "wrote " + (out / "scenarios.jsonl").string());
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::string scenarios;
  std::string resume;
  std::optional<std::size_t> epochs;
};

json history_to_json(const std::vector<mvt::LossBreakdown>& h) {
  json out = json::array();
  for (const auto& b : h) out.push_back({b.l_cls, b.l_reg, b.l_wd, b.total});
  return out;
}

std::vector<mvt::LossBreakdown> history_from_json(const json& j) {
  std::vector<mvt::LossBreakdown> h;
  for (const auto& r : j) h.push_back({r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(),
                                       r.at(3).get<double>()});
  return h;
}

std::string loss_row(std::size_t epoch, const mvt::LossBreakdown& b) {
  std::ostringstream os;
  os.precision(9);
  os << epoch << ',' << b.l_cls << ',' << b.l_reg << ',' << b.l_wd << ',' << b.total << '\n';
  return os.str();
}

int cmd_train(const TrainArgs& a) {
  require_file(a.scenarios, "scenarios");
  auto b = build_config(a.common);
  if (a.epochs) b.set("train.epochs", *a.epochs);
  if (!a.common.scale.empty()) b.set("model.use_multi_scale", a.common.scale == "multi");

  std::optional<mvt::Checkpoint> resume;
  if (!a.resume.empty()) {
    require_file(a.resume, "resume");
    resume = mvt::load_checkpoint(a.resume);
    adopt_checkpoint_model(b.config(), resume->metadata.at("model"), b.explicit_keys());
  }
  json& cfg = b.config();
  const auto mcfg = model_config(cfg);
  const auto tcfg = train_config(cfg);
  mvt::validate(mcfg);
  mvt::validate(tcfg);
  const auto every = cfg.at("run").at("checkpoint_every").get<std::size_t>();
  const auto data = mvt::read_scenarios(a.scenarios);
  if (data.scenarios.empty()) throw mvt::ConfigError("scenario file is empty: " + a.scenarios);
  const auto out = prepare_out(a.common.out);
  echo_config(cfg, out);

  auto state = mvt::start_training<float>(mcfg, tcfg);
  if (resume) {
    mvt::check_compatible(resume->params, mcfg);
    state.params = resume->params;
    state.optimizer.import_state(resume->optimizer_state);
    state.epoch = resume->metadata.at("epoch").get<std::size_t>();
    state.history = history_from_json(resume->metadata.at("history"));
    if (state.history.size() != state.epoch)
      throw mvt::FormatError(a.resume + ": history length does not match epoch");
    log(Level::info, "resuming from epoch " + std::to_string(state.epoch));
  }

  const fs::path log_path = out / "loss.csv";
  std::ofstream csv(log_path, std::ios::trunc);
  if (!csv) throw mvt::IoError("cannot open " + log_path.string());
  csv << "epoch,l_cls,l_reg,l_wd,total\n";
  for (std::size_t e = 0; e < state.history.size(); ++e) csv << loss_row(e + 1, state.history[e]);
  csv.flush();

  auto save = [&](const mvt::TrainResult<float>& r, std::size_t epoch) {
    const json meta = {{"seed", tcfg.seed},
                       {"model", mvt::to_json(mcfg)},
                       {"train", cfg.at("train")},
                       {"epoch", epoch},
                       {"history", history_to_json(r.history)},
                       {"scenarios", a.scenarios}};
    mvt::save_checkpoint(out / "model.mvck", r.params, meta, r.optimizer_state);
  };
  auto on_epoch = [&](std::size_t e, const mvt::LossBreakdown& l) {
    csv << loss_row(e, l);
    csv.flush();
    log(Level::info, "epoch " + std::to_string(e) + "/" + std::to_string(tcfg.epochs) + " total " + fmt(l.total) +
                         " cls " + fmt(l.l_cls) + " reg " + fmt(l.l_reg));
  };

  // Training runs in chunks so a checkpoint can be written every few epochs;
  // the epoch order depends only on (seed, epoch), so chunking changes nothing.
  mvt::TrainResult<float> r;
  r.params = state.params;
  r.history = state.history;
  r.optimizer_state = state.optimizer.export_state();
  std::size_t done = state.epoch;
  bool stopped = false;
  while (done < tcfg.epochs && !stopped) {
    auto chunk = tcfg;
    chunk.epochs = every ? std::min(tcfg.epochs, done + every) : tcfg.epochs;
    // Early stopping tracks improvement within one call, so it needs the
    // whole run in a single chunk.
    if (tcfg.patience) chunk.epochs = tcfg.epochs;
    try {
      r = mvt::train<float>(data, mcfg, chunk, std::move(state), on_epoch);
    } catch (const mvt::TrainingError& e) {
      return fail("training", 3, e.what(), {{"epoch", e.epoch()}, {"last_finite_loss", e.last_finite_loss()}});
    }
    done += r.epochs_run;
    stopped = r.early_stopped;
    save(r, done);
    state = mvt::TrainState<float>{r.params, mvt::Optimizer<float>(tcfg), done, r.history};
    state.optimizer.import_state(r.optimizer_state);
  }
  if (stopped) log(Level::info, "early stop after epoch " + std::to_string(done));
  if (!r.history.empty())
    std::cout << "epochs " << done << " initial_loss " << fmt(r.history.front().total) << " final_loss "
              << fmt(r.history.back().total) << '\n';
  if (!fs::exists(out / "model.mvck")) save(r, done);
  log(Level::info, "wrote " + (out / "model.mvck").string());
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  Common common;
  std::string checkpoint;
  std::string scenarios;
  std::optional<std::size_t> k;
  std::optional<double> gamma;
  bool emit_heatmaps = false;
  bool strict_bounds = false;
};

struct LoadedModel {
  mvt::ParameterStore<float> params;
  mvt::ModelConfig cfg;
};

LoadedModel load_model(const std::string& path, ConfigBuilder& b) {
  require_file(path, "checkpoint");
  auto ck = mvt::load_checkpoint(path);
  if (!ck.metadata.contains("model")) throw mvt::FormatError(path + ": metadata has no model config");
  adopt_checkpoint_model(b.config(), ck.metadata.at("model"), b.explicit_keys());
  LoadedModel m{std::move(ck.params), model_config(b.config())};
  mvt::check_compatible(m.params, m.cfg);
  return m;
}

mvt::PredictOptions predict_options(const json& cfg) {
  const json& p = cfg.at("predict");
  mvt::PredictOptions o;
  o.k = p.at("k").get<std::size_t>();
  if (o.k < 1) throw mvt::ConfigError("predict.k must be >= 1");
  o.gamma0 = p.at("gamma").get<double>();
  if (!std::isfinite(o.gamma0) || o.gamma0 < 0) throw mvt::ConfigError("predict.gamma must be finite and >= 0");
  o.rule = mvt::diversity_rule_from_string(p.at("rule").get<std::string>());
  o.steps = p.at("steps").get<std::size_t>();
  o.bounds = p.at("strict_bounds").get<bool>() ? mvt::Bounds::strict : mvt::Bounds::clamp;
  o.keep_beliefs = p.at("with_beliefs").get<bool>();
  return o;
}

// Default horizon: the generator's pred_len when the scenario file records
// it, otherwise the model's maximum.
std::size_t default_steps(const mvt::ScenarioSet& set, const mvt::ModelConfig& mcfg) {
  if (set.generator_config.contains("pred_len"))
    return std::min(mcfg.max_pred_len, set.generator_config.at("pred_len").get<std::size_t>());
  return mcfg.max_pred_len;
}

std::vector<mvt::PredictionSet> run_predictions(const LoadedModel& m, const mvt::ScenarioSet& set,
                                                mvt::PredictOptions opt, std::size_t jobs) {
  if (!opt.steps) opt.steps = default_steps(set, m.cfg);
  if (opt.steps > m.cfg.max_pred_len)
    throw mvt::ConfigError("predict.steps " + std::to_string(opt.steps) + " exceeds model max_pred_len " +
                           std::to_string(m.cfg.max_pred_len));
  return parallel_map<mvt::PredictionSet>(set.scenarios.size(), jobs, [&](std::size_t i) {
    log(Level::debug, "predicting " + set.scenarios[i].scenario_id);
    return mvt::predict(m.params, m.cfg, set.scenarios[i], opt);
  });
}

void write_heatmaps(const fs::path& dir, const mvt::PredictionSet& ps, const mvt::GridSpec& grid) {
  const fs::path sdir = dir / ps.scenario_id;
  fs::create_directories(sdir);
  for (std::size_t t = 0; t < ps.beliefs.size(); ++t) {
    const auto& b = ps.beliefs[t];
    char stem[32];
    std::snprintf(stem, sizeof stem, "step_%02zu", t + 1);
    std::ostringstream csv;
    csv.precision(9);
    for (std::size_t r = 0; r < grid.rows; ++r) {
      for (std::size_t c = 0; c < grid.cols; ++c) csv << (c ? "," : "") << b[r * grid.cols + c];
      csv << '\n';
    }
    write_text(sdir / (std::string(stem) + ".csv"), csv.str());
    const double mx = *std::max_element(b.begin(), b.end());
    std::string pgm = "P5\n" + std::to_string(grid.cols) + " " + std::to_string(grid.rows) + "\n255\n";
    for (double v : b) pgm.push_back(static_cast<char>(mx > 0 ? std::lround(255.0 * v / mx) : 0));
    write_text(sdir / (std::string(stem) + ".pgm"), pgm);
  }
}

int cmd_predict(const PredictArgs& a) {
  require_file(a.scenarios, "scenarios");
  auto b = build_config(a.common);
  if (a.k) b.set("predict.k", *a.k);
  if (a.gamma) b.set("predict.gamma", *a.gamma);
  if (a.strict_bounds) b.set("predict.strict_bounds", true);
  if (!a.common.scale.empty()) b.set("model.use_multi_scale", a.common.scale == "multi");
  const auto model = load_model(a.checkpoint, b);
  json& cfg = b.config();
  const auto opt = predict_options(cfg);
  const auto set = mvt::read_scenarios(a.scenarios);
  const auto out = prepare_out(a.common.out);
  echo_config(cfg, out);

  const auto preds = run_predictions(model, set, opt, a.common.jobs);
  std::string body;
  std::size_t outside = 0;
  for (const auto& p : preds) {
    body += mvt::to_json(p, opt.keep_beliefs).dump() + "\n";
    outside += p.points_outside_cell;
  }
  write_text(out / "predictions.jsonl", body);
  if (a.emit_heatmaps) {
    auto with_beliefs = opt;
    with_beliefs.keep_beliefs = true;
    const auto& maps = opt.keep_beliefs ? preds : run_predictions(model, set, with_beliefs, a.common.jobs);
    for (std::size_t i = 0; i < maps.size(); ++i) write_heatmaps(out / "heatmaps", maps[i], set.scenarios[i].fine);
  }
  if (outside) log(Level::warn, std::to_string(outside) + " predicted points fell outside their chosen cell");
  std::cout << "predictions " << preds.size() << " k " << opt.k << '\n';
  log(Level::info, "wrote " + (out / "predictions.jsonl").string());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  Common common;
  std::string scenarios;
  std::string predictions;
  std::string checkpoint;
  std::optional<std::size_t> k;
  std::optional<double> gamma;
  bool strict_bounds = false;
};

std::vector<mvt::PredictionSet> read_predictions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw mvt::IoError("cannot open " + path);
  std::vector<mvt::PredictionSet> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(mvt::prediction_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw mvt::ParseError(lineno, path + ": " + e.what());
    } catch (const mvt::ParseError& e) {
      throw mvt::ParseError(lineno, path + ": " + e.what());
    }
  }
  return out;
}

int cmd_eval(const EvalArgs& a) {
  require_file(a.scenarios, "scenarios");
  if (a.predictions.empty() == a.checkpoint.empty())
    throw UsageError("eval needs exactly one of --predictions or --checkpoint");
  auto b = build_config(a.common);
  if (a.k) b.set("eval.k", *a.k);
  if (a.gamma) b.set("predict.gamma", *a.gamma);
  if (a.strict_bounds) b.set("predict.strict_bounds", true);
  std::optional<LoadedModel> model;
  if (!a.checkpoint.empty()) {
    if (!a.common.scale.empty()) b.set("model.use_multi_scale", a.common.scale == "multi");
    model = load_model(a.checkpoint, b);
  } else {
    require_file(a.predictions, "predictions");
  }
  json& cfg = b.config();
  mvt::EvalOptions eo;
  eo.k = cfg.at("eval").at("k").get<std::size_t>();
  if (eo.k < 1) throw mvt::ConfigError("eval.k must be >= 1");
  eo.horizons = parse_section("eval", [&] { return cfg.at("eval").at("horizons").get<std::vector<double>>(); });
  for (double h : eo.horizons)
    if (!(h > 0)) throw mvt::ConfigError("eval.horizons must be positive");
  eo.unit = mvt::horizon_unit_from_string(cfg.at("eval").at("unit").get<std::string>());
  const auto set = mvt::read_scenarios(a.scenarios);
  const auto out = prepare_out(a.common.out);
  echo_config(cfg, out);

  const auto preds = model ? run_predictions(*model, set, predict_options(cfg), a.common.jobs)
                           : read_predictions(a.predictions);
  const auto res = mvt::evaluate(set.scenarios, preds, eo);
  write_text(out / "eval.json", mvt::to_json(res).dump(2) + "\n");
  const auto table = mvt::format_table(res);
  write_text(out / "eval.txt", table);
  write_text(out / "eval_rows.csv", mvt::format_csv(res));
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-future trajectory prediction on grid scenes"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Generate forking-path scenarios");
  add_common(gen, ga.common);
  gen->add_option("--n", ga.n, "Number of scenarios");
  gen->add_option("--j", ga.j, "Futures per scenario");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a scenario file");
  add_common(tr, ta.common);
  tr->add_option("--scenarios", ta.scenarios, "Scenario JSONL file");
  tr->add_option("--resume", ta.resume, "Checkpoint to resume from");
  tr->add_option("--epochs", ta.epochs, "Total epochs");

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Predict K trajectories per scenario");
  add_common(pr, pa.common);
  pr->add_option("--checkpoint", pa.checkpoint, "Model checkpoint");
  pr->add_option("--scenarios", pa.scenarios, "Scenario JSONL file");
  pr->add_option("--k", pa.k, "Number of predictions");
  pr->add_option("--gamma", pa.gamma, "Diversity penalty");
  pr->add_flag("--emit-heatmaps", pa.emit_heatmaps, "Write per-step belief grids as CSV and PGM");
  pr->add_flag("--strict-bounds", pa.strict_bounds, "Reject observed points outside the grid");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate predictions against scenario futures");
  add_common(ev, ea.common);
  ev->add_option("--scenarios", ea.scenarios, "Scenario JSONL file");
  ev->add_option("--predictions", ea.predictions, "Prediction JSONL file");
  ev->add_option("--checkpoint", ea.checkpoint, "Predict inline from this checkpoint");
  ev->add_option("--k", ea.k, "K for minADE/minFDE");
  ev->add_option("--gamma", ea.gamma, "Diversity penalty for inline prediction");
  ev->add_flag("--strict-bounds", ea.strict_bounds, "Reject observed points outside the grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    g_level = level_from_env();
    if (gen->parsed()) return cmd_generate(ga);
    if (tr->parsed()) return cmd_train(ta);
    if (pr->parsed()) return cmd_predict(pa);
    return cmd_eval(ea);
  } catch (const UsageError& e) {
    return fail("usage", 2, e.what());
  } catch (const mvt::TrainingError& e) {
    return fail("training", 3, e.what(), {{"epoch", e.epoch()}, {"last_finite_loss", e.last_finite_loss()}});
  } catch (const mvt::Error& e) {
    return fail(mvt::to_string(e.kind()), exit_code_for(e.kind()), e.what());
  } catch (const json::exception& e) {
    return fail("format", 2, e.what());
  } catch (const std::exception& e) {
    return fail("runtime", 1, e.what());
  }
}
