#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <string>

#include "multiverse/autodiff.hpp"
#include "multiverse/errors.hpp"

namespace mvt {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Denominator floor for the relative error, so entries whose true gradient
  // is zero are judged by absolute error instead.
  double abs_floor = 1e-6;
  // Fraction of parameter entries to probe; 1.0 checks every entry.
  double sample_fraction = 1.0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar fragment against central
// differences, parameter entry by parameter entry.
//
// `fragment(graph, params)` must build its loss on the given graph reading
// parameters through graph.param(params, name) and return the scalar Var.
template <typename Fragment>
GradCheckReport grad_check(const Fragment& fragment, const ParameterStore<double>& params, double tolerance,
                           const GradCheckOptions& opt = {}) {
  auto eval = [&](const ParameterStore<double>& p) {
    Graph<double> g(false);
    return g.value(fragment(g, p))[0];
  };

  Graph<double> g;
  Var loss = fragment(g, params);
  const double base = g.value(loss)[0];
  if (!std::isfinite(base)) throw CheckError("grad_check: fragment loss is not finite");
  const double again = eval(params);
  if (std::memcmp(&base, &again, sizeof base) != 0)
    throw CheckError("grad_check: fragment is not deterministic");
  g.backward(loss);
  const auto grads = g.param_grads();

  std::mt19937_64 rng(opt.sample_seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  GradCheckReport rep;
  rep.tolerance = tolerance;
  ParameterStore<double> probe = params;
  for (const auto& [name, entry] : params.entries()) {
    if (!entry.trainable) continue;
    auto it = grads.find(name);
    auto vals = probe.values(name);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (opt.sample_fraction < 1.0 && coin(rng) >= opt.sample_fraction) continue;
      const double orig = vals[i];
      vals[i] = orig + opt.epsilon;
      const double up = eval(probe);
      vals[i] = orig - opt.epsilon;
      const double down = eval(probe);
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double analytic = it == grads.end() ? 0.0 : it->second[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++rep.checked;
      if (!(rel <= rep.max_rel_error)) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = i;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.passed = rep.checked > 0 && rep.max_rel_error < tolerance;
  return rep;
}

}  // namespace mvt
