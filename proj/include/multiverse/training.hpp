#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiverse/autodiff.hpp"
#include "multiverse/model.hpp"
#include "multiverse/nn.hpp"
#include "multiverse/scenegen.hpp"

namespace mvt {

inline constexpr double kProbFloor = 1e-12;

struct LossBreakdown {
  double l_cls = 0.0;
  double l_reg = 0.0;
  double l_wd = 0.0;
  double total = 0.0;
};

enum class OptimizerKind { adadelta, adam, sgd };

struct TrainConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.001;
  double learning_rate = 0.3;
  OptimizerKind optimizer = OptimizerKind::adadelta;
  double rho = 0.95;       // adadelta decay
  double epsilon = 1e-6;   // adadelta / adam stabilizer
  double beta1 = 0.9;      // adam
  double beta2 = 0.999;    // adam
  std::size_t epochs = 100;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // Decode horizon during training; 0 means the longest future of each scenario.
  std::size_t pred_len = 0;
  // Early stop when the epoch total has not improved by more than min_delta
  // (relative) for `patience` epochs; 0 disables.
  std::size_t patience = 0;
  double min_delta = 1e-4;
};

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adadelta: return "adadelta";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sgd: return "sgd";
  }
  return "adadelta";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adadelta") return OptimizerKind::adadelta;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline void validate(const TrainConfig& c) {
  if (!(c.lambda1 > 0.0)) throw ConfigError("train.lambda1 must be > 0");
  if (!(c.lambda2 >= 0.0)) throw ConfigError("train.lambda2 must be >= 0");
  if (!(c.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(c.rho > 0.0 && c.rho < 1.0)) throw ConfigError("train.rho must lie in (0, 1)");
  if (!(c.epsilon > 0.0)) throw ConfigError("train.epsilon must be > 0");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda1", c.lambda1},       {"lambda2", c.lambda2},   {"learning_rate", c.learning_rate},
          {"optimizer", to_string(c.optimizer)},
          {"rho", c.rho},               {"epsilon", c.epsilon},   {"beta1", c.beta1},
          {"beta2", c.beta2},           {"epochs", c.epochs},     {"batch_size", c.batch_size},
          {"seed", c.seed},             {"shuffle", c.shuffle},   {"pred_len", c.pred_len},
          {"patience", c.patience},     {"min_delta", c.min_delta}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  c.rho = j.at("rho").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.shuffle = j.at("shuffle").get<bool>();
  c.pred_len = j.at("pred_len").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.min_delta = j.at("min_delta").get<double>();
  return c;
}

// ---------------------------------------------------------------------------
// Losses on graph values

// Mean over steps of -log C_t[true cell], probabilities floored at 1e-12.
// Uses the first gt_cells.size() beliefs.
template <typename T>
Var loss_cls(Graph<T>& g, const std::vector<Var>& beliefs, const std::vector<CellIndex>& gt_cells) {
  if (gt_cells.empty()) throw ArgumentError("loss_cls: no targets");
  if (gt_cells.size() > beliefs.size())
    throw ArgumentError("loss_cls: " + std::to_string(gt_cells.size()) + " targets for " +
                        std::to_string(beliefs.size()) + " beliefs");
  std::vector<Var> terms;
  for (std::size_t t = 0; t < gt_cells.size(); ++t)
    terms.push_back(nn::neg_log_prob_at(g, beliefs[t], gt_cells[t].value, T(kProbFloor)));
  return nn::linear_combination(g, terms, std::vector<T>(terms.size(), T{1} / static_cast<T>(terms.size())));
}

// Smooth-L1 between predicted offsets and p_t - center(i), applied at every
// cell; mean over steps, cells and both coordinates.
template <typename T>
Var loss_reg(Graph<T>& g, const std::vector<Var>& offsets, const Trajectory& gt_points, const GridSpec& grid) {
  if (gt_points.empty()) throw ArgumentError("loss_reg: no targets");
  if (gt_points.size() > offsets.size())
    throw ArgumentError("loss_reg: " + std::to_string(gt_points.size()) + " targets for " +
                        std::to_string(offsets.size()) + " offset fields");
  std::vector<Var> terms;
  for (std::size_t t = 0; t < gt_points.size(); ++t) {
    require_shape(g.value(offsets[t]).shape(), Shape{grid.rows, grid.cols, 2}, "loss_reg offsets");
    terms.push_back(nn::smooth_l1_sum(g, offsets[t], offset_targets<T>(grid, gt_points[t])));
  }
  const T norm = static_cast<T>(gt_points.size() * grid.num_cells() * 2);
  return nn::linear_combination(g, terms, std::vector<T>(terms.size(), T{1} / norm));
}

template <typename T>
Var weight_decay(Graph<T>& g, const ParameterStore<T>& params) {
  std::vector<Var> terms;
  for (const auto& [name, e] : params.entries())
    if (e.trainable) terms.push_back(nn::sum_squares(g, g.param(params, name)));
  if (terms.empty()) return g.constant(Tensor<T>::scalar(T{0}));
  return nn::linear_combination(g, terms, std::vector<T>(terms.size(), T{1}));
}

struct LossVars {
  Var l_cls;
  Var l_reg;
  Var l_wd;
  Var total;
};

inline LossBreakdown combine(double l_cls, double l_reg, double l_wd, const TrainConfig& c) {
  return {l_cls, l_reg, l_wd, l_cls + c.lambda1 * l_reg + c.lambda2 * l_wd};
}

template <typename T>
LossBreakdown breakdown(const Graph<T>& g, const LossVars& v) {
  return {static_cast<double>(g.value(v.l_cls)[0]), static_cast<double>(g.value(v.l_reg)[0]),
          static_cast<double>(g.value(v.l_wd)[0]), static_cast<double>(g.value(v.total)[0])};
}

// Data loss of one scenario: per scale, the mean over its futures of the
// classification and regression losses, summed across scales.
template <typename T>
LossVars scenario_loss(Graph<T>& g, const ParameterStore<T>& params, const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const Scenario& sc, const SceneInputs<T>& in, bool include_weight_decay = true) {
  const std::size_t steps = tcfg.pred_len ? tcfg.pred_len : sc.longest_future();
  const Rollout ro = rollout(g, params, mcfg, in, steps);
  std::vector<Var> cls_terms, reg_terms;
  const T inv_j = T{1} / static_cast<T>(sc.futures.size());
  for (const auto& sr : ro.scales) {
    for (const auto& fut : sc.futures) {
      const std::size_t n = std::min(fut.size(), steps);
      const Trajectory pts(fut.begin(), fut.begin() + static_cast<long>(n));
      std::vector<CellIndex> cells;
      for (const Point2& p : pts) cells.push_back(quantize_point(sr.grid, p));
      cls_terms.push_back(loss_cls(g, sr.beliefs, cells));
      if (!sr.offsets.empty()) reg_terms.push_back(loss_reg(g, sr.offsets, pts, sr.grid));
    }
  }
  LossVars v;
  v.l_cls = nn::linear_combination(g, cls_terms, std::vector<T>(cls_terms.size(), inv_j));
  v.l_reg = reg_terms.empty() ? g.constant(Tensor<T>::scalar(T{0}))
                              : nn::linear_combination(g, reg_terms, std::vector<T>(reg_terms.size(), inv_j));
  v.l_wd = include_weight_decay ? weight_decay(g, params) : g.constant(Tensor<T>::scalar(T{0}));
  v.total = nn::linear_combination(g, {v.l_cls, v.l_reg, v.l_wd},
                                   {T{1}, static_cast<T>(tcfg.lambda1), static_cast<T>(tcfg.lambda2)});
  return v;
}

// ---------------------------------------------------------------------------
// Optimizers

// Per-parameter adaptive updates. Slot buffers are keyed by parameter name
// so the state can be checkpointed and restored exactly.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads) {
    ++steps_;
    for (const auto& [name, e] : params.entries()) {
      if (!e.trainable) continue;
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor<T>& grad = git->second;
      auto vals = params.values(name);
      auto& a = slot(slot_a_, name, vals.size());
      auto& b = slot(slot_b_, name, vals.size());
      switch (cfg_.optimizer) {
        case OptimizerKind::adadelta: {
          const double rho = cfg_.rho, eps = cfg_.epsilon, lr = cfg_.learning_rate;
          for (std::size_t i = 0; i < vals.size(); ++i) {
            const double gi = grad[i];
            const double sq = rho * a[i] + (1.0 - rho) * gi * gi;
            const double delta = std::sqrt(b[i] + eps) / std::sqrt(sq + eps) * gi;
            a[i] = static_cast<T>(sq);
            b[i] = static_cast<T>(rho * b[i] + (1.0 - rho) * delta * delta);
            vals[i] = static_cast<T>(vals[i] - lr * delta);
          }
          break;
        }
        case OptimizerKind::adam: {
          const double b1 = cfg_.beta1, b2 = cfg_.beta2, lr = cfg_.learning_rate;
          const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
          const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
          for (std::size_t i = 0; i < vals.size(); ++i) {
            const double gi = grad[i];
            const double m = b1 * a[i] + (1.0 - b1) * gi;
            const double v = b2 * b[i] + (1.0 - b2) * gi * gi;
            a[i] = static_cast<T>(m);
            b[i] = static_cast<T>(v);
            vals[i] = static_cast<T>(vals[i] - lr * (m / c1) / (std::sqrt(v / c2) + 1e-8));
          }
          break;
        }
        case OptimizerKind::sgd:
          for (std::size_t i = 0; i < vals.size(); ++i)
            vals[i] = static_cast<T>(vals[i] - cfg_.learning_rate * grad[i]);
          break;
      }
    }
  }

  std::uint64_t steps() const noexcept { return steps_; }

  // Flat view for checkpointing: "a/<param>", "b/<param>", "steps".
  std::map<std::string, Tensor<T>> export_state() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [n, v] : slot_a_) out.emplace("a/" + n, Tensor<T>(Shape{v.size()}, v));
    for (const auto& [n, v] : slot_b_) out.emplace("b/" + n, Tensor<T>(Shape{v.size()}, v));
    out.emplace("steps", Tensor<T>::scalar(static_cast<T>(steps_)));
    return out;
  }

  void import_state(const std::map<std::string, Tensor<T>>& st) {
    slot_a_.clear();
    slot_b_.clear();
    steps_ = 0;
    for (const auto& [k, v] : st) {
      if (k == "steps")
        steps_ = static_cast<std::uint64_t>(v[0]);
      else if (k.rfind("a/", 0) == 0)
        slot_a_[k.substr(2)] = v.storage();
      else if (k.rfind("b/", 0) == 0)
        slot_b_[k.substr(2)] = v.storage();
      else
        throw FormatError("unknown optimizer state entry " + k);
    }
  }

 private:
  static std::vector<T>& slot(std::map<std::string, std::vector<T>>& m, const std::string& name, std::size_t n) {
    auto& v = m[name];
    if (v.empty()) v.assign(n, T{0});
    return v;
  }

  TrainConfig cfg_;
  std::uint64_t steps_ = 0;
  std::map<std::string, std::vector<T>> slot_a_;
  std::map<std::string, std::vector<T>> slot_b_;
};

// ---------------------------------------------------------------------------
// Training driver

template <typename T>
struct TrainState {
  ParameterStore<T> params;
  Optimizer<T> optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::vector<LossBreakdown> history;
};

template <typename T>
struct TrainResult {
  ParameterStore<T> params;
  std::vector<LossBreakdown> history;
  std::map<std::string, Tensor<T>> optimizer_state;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
};

using EpochCallback = std::function<void(std::size_t epoch, const LossBreakdown&)>;

template <typename T>
TrainState<T> start_training(const ModelConfig& mcfg, const TrainConfig& tcfg) {
  return {init_parameters<T>(mcfg, tcfg.seed), Optimizer<T>(tcfg), 0, {}};
}

// Runs epochs [state.epoch, tcfg.epochs). The scenario order of epoch e
// depends only on (seed, e), so a run resumed from a checkpoint replays
// exactly the epochs an uninterrupted run would.
template <typename T>
TrainResult<T> train(const ScenarioSet& data, const ModelConfig& mcfg, const TrainConfig& tcfg, TrainState<T> state,
                     const EpochCallback& on_epoch = {}) {
  validate(mcfg);
  validate(tcfg);
  if (data.scenarios.empty()) throw ArgumentError("train: empty scenario set");
  check_compatible(state.params, mcfg);

  std::vector<SceneInputs<T>> inputs;
  inputs.reserve(data.scenarios.size());
  for (const auto& s : data.scenarios) inputs.push_back(prepare_inputs<T>(s));

  TrainResult<T> res;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  double last_finite = state.history.empty() ? std::numeric_limits<double>::quiet_NaN() : state.history.back().total;

  const std::size_t n = data.scenarios.size();
  for (std::size_t epoch = state.epoch; epoch < tcfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (tcfg.shuffle) {
      std::mt19937_64 rng(detail::mix_seed(tcfg.seed, epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }

    LossBreakdown epoch_loss;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += tcfg.batch_size) {
      const std::size_t stop = std::min(n, start + tcfg.batch_size);
      const T inv_b = T{1} / static_cast<T>(stop - start);
      std::map<std::string, Tensor<T>> grads;
      double cls = 0.0, reg = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t idx = order[k];
        Graph<T> g;
        LossVars lv;
        try {
          lv = scenario_loss(g, state.params, mcfg, tcfg, data.scenarios[idx], inputs[idx], false);
          g.backward(lv.total);
        } catch (const NumericError& e) {
          throw TrainingError(static_cast<int>(epoch + 1), last_finite,
                              "training diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
        }
        cls += static_cast<double>(g.value(lv.l_cls)[0]);
        reg += static_cast<double>(g.value(lv.l_reg)[0]);
        for (auto& [name, gr] : g.param_grads()) {
          auto [it, fresh] = grads.try_emplace(name, Tensor<T>(gr.shape()));
          for (std::size_t i = 0; i < gr.size(); ++i) it->second[i] += inv_b * gr[i];
        }
      }
      cls /= static_cast<double>(stop - start);
      reg /= static_cast<double>(stop - start);
      // Weight decay enters once per batch: d/dtheta lambda2 * |theta|^2.
      const double wd = state.params.squared_norm();
      for (const auto& [name, e] : state.params.entries()) {
        if (!e.trainable) continue;
        auto [it, fresh] = grads.try_emplace(name, Tensor<T>(e.value.shape()));
        for (std::size_t i = 0; i < e.value.size(); ++i)
          it->second[i] += static_cast<T>(2.0 * tcfg.lambda2) * e.value[i];
      }
      const LossBreakdown b = combine(cls, reg, wd, tcfg);
      if (!std::isfinite(b.total))
        throw TrainingError(static_cast<int>(epoch + 1), last_finite,
                            "training diverged at epoch " + std::to_string(epoch + 1) +
                                " (last finite loss " + std::to_string(last_finite) + ")");
      for (const auto& [name, gr] : grads)
        if (!gr.all_finite())
          throw TrainingError(static_cast<int>(epoch + 1), last_finite,
                              "non-finite gradient for " + name + " at epoch " + std::to_string(epoch + 1));
      state.optimizer.step(state.params, grads);
      epoch_loss.l_cls += b.l_cls;
      epoch_loss.l_reg += b.l_reg;
      epoch_loss.l_wd += b.l_wd;
      epoch_loss.total += b.total;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    epoch_loss = combine(epoch_loss.l_cls * inv, epoch_loss.l_reg * inv, epoch_loss.l_wd * inv, tcfg);
    last_finite = epoch_loss.total;
    state.history.push_back(epoch_loss);
    state.epoch = epoch + 1;
    ++res.epochs_run;
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);

    if (tcfg.patience > 0) {
      if (epoch_loss.total < best * (1.0 - tcfg.min_delta)) {
        best = epoch_loss.total;
        since_best = 0;
      } else if (++since_best >= tcfg.patience) {
        res.early_stopped = true;
        break;
      }
    }
  }
  res.params = std::move(state.params);
  res.history = std::move(state.history);
  res.optimizer_state = state.optimizer.export_state();
  return res;
}

template <typename T = float>
TrainResult<T> train(const ScenarioSet& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                     const EpochCallback& on_epoch = {}) {
  return train<T>(data, mcfg, tcfg, start_training<T>(mcfg, tcfg), on_epoch);
}

}  // namespace mvt
