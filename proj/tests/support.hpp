#pragma once

// Helpers shared by the unit tests.

#include <cmath>
#include <functional>
#include <vector>

#include "cmq/ops.hpp"

namespace cmq::test {

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

using MultiFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Reduces f's (possibly non-scalar) output with fixed random weights and
/// compares reverse-mode gradients of every input against central
/// differences. Returns max |analytic - fd| / max(1, |fd|).
inline double fd_error(const std::vector<Tensor>& inputs, const MultiFn& f, std::uint64_t seed = 7,
                       double eps = 1e-6) {
  Tensor w;
  {
    ad::Tape t;
    std::vector<ad::Var> xs;
    for (const auto& x : inputs) xs.push_back(t.constant(x));
    Rng rng(seed);
    w = random_tensor(f(t, xs).value().shape, rng);
  }
  auto value = [&](const std::vector<Tensor>& in) {
    ad::Tape t;
    std::vector<ad::Var> xs;
    for (const auto& x : in) xs.push_back(t.constant(x));
    return ad::weighted_sum(f(t, xs), w).value().item();
  };
  ad::Tape t;
  std::vector<ad::Var> xs;
  for (const auto& x : inputs) xs.push_back(t.leaf(x));
  t.backward(ad::weighted_sum(f(t, xs), w));

  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = t.grad(xs[k]);
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + eps;
      const double up = value(probe);
      probe[k][i] = orig - eps;
      const double down = value(probe);
      probe[k][i] = orig;
      const double fd = (up - down) / (2 * eps);
      worst = std::max(worst, std::fabs(g[i] - fd) / std::max(1.0, std::fabs(fd)));
    }
  }
  return worst;
}

}  // namespace cmq::test
