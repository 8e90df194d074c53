#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "cmq/params.hpp"

namespace cmq::ad {

/// Builds a scalar on the given tape from bound parameters. Must be
/// deterministic.
using ScalarFn = std::function<Var(Tape&, const Bound&)>;

struct GradCheckResult {
  double max_error = 0.0;  // max |analytic - fd| / max(1, |fd|)
  std::string worst;       // "name[index]" of the worst coordinate
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients against central differences on every
/// coordinate of `params`.
inline GradCheckResult grad_check(const ScalarFn& f, const ParamSet& params, double eps = 1e-5) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");

  ParamSet analytic;
  {
    Tape tape;
    const Bound b = bind(tape, params, true);
    const Var root = f(tape, b);
    tape.backward(root);
    analytic = collect_grads(tape, b, params);
  }

  auto eval = [&](const ParamSet& ps) {
    Tape tape;
    const Bound b = bind(tape, ps, false);
    return f(tape, b).value().item();
  };

  GradCheckResult res;
  ParamSet probe = params;
  for (std::size_t e = 0; e < params.size(); ++e) {
    const auto& name = params.entries()[e].first;
    Tensor& slot = probe.entries()[e].second;
    for (std::size_t i = 0; i < slot.size(); ++i) {
      const double orig = slot[i];
      slot[i] = orig + eps;
      const double up = eval(probe);
      slot[i] = orig - eps;
      const double down = eval(probe);
      slot[i] = orig;
      const std::string coord = name + "[" + std::to_string(i) + "]";
      if (!std::isfinite(up) || !std::isfinite(down))
        throw Error("grad_check: non-finite function value when perturbing " + coord);
      const double fd = (up - down) / (2.0 * eps);
      const double err = std::fabs(analytic.entries()[e].second[i] - fd) / std::max(1.0, std::fabs(fd));
      if (err > res.max_error || res.worst.empty()) {
        if (err >= res.max_error) {
          res.max_error = err;
          res.worst = coord;
        }
      }
      ++res.coordinates;
    }
  }
  return res;
}

}  // namespace cmq::ad
