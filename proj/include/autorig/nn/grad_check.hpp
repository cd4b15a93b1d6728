#pragma once

// Finite-difference verification of reverse-mode gradients.

#include "autorig/nn/layers.hpp"

#include <functional>

namespace autorig::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<flat index>]"
  double worst_analytic = 0.0, worst_numeric = 0.0;
  size_t checked = 0;
};

/// Compares reverse-mode gradients of the scalar `loss` with central
/// differences for every parameter in `store` (at most `max_entries` sampled
/// entries per parameter; 0 = all). Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
/// `loss` must be a deterministic function of the parameters.
inline GradCheckResult grad_check(ParamStore<double>& store, const std::function<Var<double>(Tape<double>&)>& loss,
                                  double eps = 1e-5, size_t max_entries = 0, std::uint64_t seed = 0,
                                  double floor = 1e-6) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto evaluate = [&]() {
    Tape<double> tape(false);
    return loss(tape).scalar();
  };

  GradCheckResult result;
  Rng rng(seed);
  for (size_t p = 0; p < store.size(); ++p) {
    Parameter<double>& param = store[p];
    const Eigen::Index n = param.value.size();
    std::vector<Eigen::Index> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (max_entries > 0 && static_cast<size_t>(n) > max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(max_entries);
    }
    for (Eigen::Index i : entries) {
      double& x = param.value.data()[i];
      const double saved = x;
      x = saved + eps;
      const double up = evaluate();
      x = saved - eps;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = param.grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error || !std::isfinite(rel)) {
        result.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        result.worst = param.name + "[" + std::to_string(i) + "]";
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace autorig::nn
