#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "cmq/nets.hpp"

namespace cmq::agents {

using ad::Var;

/// Parameter-shared recurrent utility network. Input per agent row is the
/// observation, the previous action one-hot, and the agent index one-hot.
struct AgentSpec {
  std::size_t obs_dim = 0;
  std::size_t n_agents = 1;
  std::size_t n_actions = 1;
  std::size_t hidden = 64;

  std::size_t input_dim() const { return obs_dim + n_actions + n_agents; }
  nets::NetSpec net() const {
    return {{input_dim(), hidden, n_actions}, {ad::Activation::relu, ad::Activation::identity}, hidden};
  }
};

inline const std::string kPrefix = "agent.";

inline ParamSet init_agent_params(const AgentSpec& spec, std::uint64_t seed) {
  return nets::init_params(spec.net(), seed, kPrefix);
}

inline constexpr std::size_t kNoAction = static_cast<std::size_t>(-1);

/// Network inputs for rows ordered (episode, agent). `obs` is
/// [rows x obs_dim]; last_actions[r] may be kNoAction at episode start.
inline Tensor build_inputs(const AgentSpec& spec, const Tensor& obs, std::span<const std::size_t> last_actions) {
  const std::size_t R = obs.rows();
  if (obs.cols() != spec.obs_dim)
    throw Error("agent inputs: observation dim mismatch, expected " + std::to_string(spec.obs_dim) + " got " +
                shape_str(obs.shape));
  if (last_actions.size() != R)
    throw Error("agent inputs: need " + std::to_string(R) + " last actions, got " + std::to_string(last_actions.size()));
  const std::size_t D = spec.input_dim();
  Tensor x(Shape{R, D}, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    auto row = x.row(r);
    std::copy_n(obs.data.data() + r * spec.obs_dim, spec.obs_dim, row.begin());
    if (last_actions[r] != kNoAction) row[spec.obs_dim + last_actions[r]] = 1.0;
    row[spec.obs_dim + spec.n_actions + r % spec.n_agents] = 1.0;
  }
  return x;
}

struct AgentOut {
  Var q;  // [rows x n_actions]
  Var h;  // [rows x hidden]
};

/// Q_i(tau_i, .) for a batch of agent rows; h carries the history.
inline AgentOut agent_q(const Bound& p, const AgentSpec& spec, Var inputs, Var h_prev) {
  auto [q, h] = nets::recurrent_forward(p, spec.net(), inputs, h_prev, kPrefix);
  return {q, h};
}

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  double decay_steps = 50000;

  double value(double step) const {
    if (decay_steps <= 0 || step >= decay_steps) return end;
    const double frac = std::min(1.0, std::max(0.0, step / decay_steps));
    return start + (end - start) * frac;
  }
};

/// Epsilon-greedy over available actions. Greedy ties go to the lowest
/// index.
inline std::size_t select_action(std::span<const double> q, double eps, Rng& rng, std::span<const double> avail) {
  if (avail.size() != q.size())
    throw Error("select_action: mask has " + std::to_string(avail.size()) + " entries for " + std::to_string(q.size()) +
                " actions");
  std::vector<std::size_t> allowed;
  for (std::size_t a = 0; a < q.size(); ++a)
    if (avail[a] > 0.0) allowed.push_back(a);
  if (allowed.empty()) throw Error("select_action: no available action");
  if (eps < 0.0 || eps > 1.0) throw Error("select_action: eps must lie in [0,1]");
  if (rng.uniform() < eps) return allowed[rng.below(allowed.size())];
  std::size_t best = allowed[0];
  for (std::size_t a : allowed)
    if (q[a] > q[best]) best = a;
  return best;
}

/// Greedy choice without randomness.
inline std::size_t greedy_action(std::span<const double> q, std::span<const double> avail) {
  std::size_t best = q.size();
  for (std::size_t a = 0; a < q.size(); ++a)
    if (avail[a] > 0.0 && (best == q.size() || q[a] > q[best])) best = a;
  if (best == q.size()) throw Error("greedy_action: no available action");
  return best;
}

}  // namespace cmq::agents
