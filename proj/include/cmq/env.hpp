#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include "cmq/tensor.hpp"

namespace cmq::env {

// ---------------------------------------------------------------------------
// Level-based foraging

enum class Action : std::size_t { up = 0, down = 1, left = 2, right = 3, eat = 4, noop = 5 };
inline constexpr std::size_t kLbfActions = 6;
inline constexpr std::size_t kLbfConcepts = 4;

inline const char* action_name(std::size_t a) {
  static constexpr std::array<const char*, kLbfActions> names{"up", "down", "left", "right", "eat", "noop"};
  return a < kLbfActions ? names[a] : "?";
}

struct LbfConfig {
  int grid_w = 8;
  int grid_h = 8;
  int n_agents = 2;
  int n_foods = 2;
  int max_agent_level = 2;
  int episode_limit = 50;
  int view_range = 2;  // half-width of the square observation window
  double coop_penalty = -0.002;
  bool force_coop = true;  // food 0 needs the two lowest-level agents together

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("lbf config: " + m); };
    if (grid_w < 4 || grid_h < 4) fail("grid must be at least 4x4");
    if (n_agents < 1) fail("n_agents must be >= 1");
    if (n_foods < 1) fail("n_foods must be >= 1");
    if (max_agent_level < 1) fail("max_agent_level must be >= 1");
    if (episode_limit < 1) fail("episode_limit must be >= 1");
    if (view_range < 0) fail("view_range must be >= 0");
    if (force_coop && n_agents < 2) fail("force_coop needs at least 2 agents");
    if (n_agents + n_foods > grid_w * grid_h)
      fail("grid " + std::to_string(grid_w) + "x" + std::to_string(grid_h) + " too small for " +
           std::to_string(n_agents + n_foods) + " entities");
  }

  int max_food_level() const { return (force_coop ? 2 : 1) * max_agent_level; }
  std::size_t window() const { return static_cast<std::size_t>(2 * view_range + 1); }
  std::size_t obs_dim() const { return 3 * window() * window() + 3; }
  std::size_t state_dim() const { return static_cast<std::size_t>(3 * n_agents + 4 * n_foods + 1); }
};

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct AgentInfo {
  Cell pos;
  int level = 1;
  friend bool operator==(const AgentInfo&, const AgentInfo&) = default;
};

struct FoodInfo {
  Cell pos;
  int level = 1;
  bool alive = true;
  friend bool operator==(const FoodInfo&, const FoodInfo&) = default;
};

struct LbfState {
  std::vector<AgentInfo> agents;
  std::vector<FoodInfo> foods;
  int t = 0;
  int total_food_level = 0;  // sum over the initial foods; normalizes rewards

  friend bool operator==(const LbfState&, const LbfState&) = default;
};

inline bool adjacent(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y) == 1; }
inline int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

/// Throws if positions overlap, leave the grid, or levels are invalid.
inline void check_state(const LbfConfig& cfg, const LbfState& s) {
  auto fail = [](const std::string& m) { throw Error("lbf state: " + m); };
  if (s.agents.size() != static_cast<std::size_t>(cfg.n_agents)) fail("agent count mismatch");
  if (s.foods.size() != static_cast<std::size_t>(cfg.n_foods)) fail("food count mismatch");
  if (s.t < 0 || s.t > cfg.episode_limit) fail("timestep out of range");
  std::vector<std::uint8_t> occ(static_cast<std::size_t>(cfg.grid_w * cfg.grid_h), 0);
  auto claim = [&](Cell c, const char* who) {
    if (c.x < 0 || c.y < 0 || c.x >= cfg.grid_w || c.y >= cfg.grid_h) fail(std::string(who) + " off grid");
    auto& o = occ[static_cast<std::size_t>(c.y * cfg.grid_w + c.x)];
    if (o) fail(std::string(who) + " overlaps another entity");
    o = 1;
  };
  for (const auto& a : s.agents) {
    if (a.level < 1) fail("agent level < 1");
    claim(a.pos, "agent");
  }
  for (const auto& f : s.foods) {
    if (f.level < 1) fail("food level < 1");
    if (f.alive) claim(f.pos, "food");
  }
}

/// Per-agent egocentric observations, one row each:
///   3 channels over the (2v+1)^2 window (food level, other agents' level,
///   off-grid marker), then own level and normalized x, y.
inline Tensor lbf_observe(const LbfConfig& cfg, const LbfState& s) {
  const std::size_t n = s.agents.size();
  const std::size_t w = cfg.window();
  const std::size_t area = w * w;
  const std::size_t dim = cfg.obs_dim();
  Tensor obs(Shape{n, dim}, 0.0);
  const double food_norm = static_cast<double>(cfg.max_food_level());
  const double agent_norm = static_cast<double>(cfg.max_agent_level);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = obs.row(i);
    const Cell me = s.agents[i].pos;
    for (int dy = -cfg.view_range; dy <= cfg.view_range; ++dy)
      for (int dx = -cfg.view_range; dx <= cfg.view_range; ++dx) {
        const std::size_t cell = static_cast<std::size_t>((dy + cfg.view_range) * static_cast<int>(w) + dx + cfg.view_range);
        const Cell c{me.x + dx, me.y + dy};
        if (c.x < 0 || c.y < 0 || c.x >= cfg.grid_w || c.y >= cfg.grid_h) {
          row[2 * area + cell] = 1.0;
          continue;
        }
        for (const auto& f : s.foods)
          if (f.alive && f.pos == c) row[cell] = std::min(1.0, f.level / food_norm);
        for (std::size_t j = 0; j < n; ++j)
          if (j != i && s.agents[j].pos == c) row[area + cell] = std::min(1.0, s.agents[j].level / agent_norm);
      }
    row[3 * area] = std::min(1.0, s.agents[i].level / agent_norm);
    row[3 * area + 1] = cfg.grid_w > 1 ? static_cast<double>(me.x) / (cfg.grid_w - 1) : 0.0;
    row[3 * area + 2] = cfg.grid_h > 1 ? static_cast<double>(me.y) / (cfg.grid_h - 1) : 0.0;
  }
  return obs;
}

/// Flat global state: per agent (x/W, y/H, level/Lmax), per food
/// (x/W, y/H, level/Lfood, alive), then t/limit.
inline Tensor encode_state(const LbfConfig& cfg, const LbfState& s) {
  std::vector<double> v;
  v.reserve(cfg.state_dim());
  const double W = cfg.grid_w, H = cfg.grid_h;
  for (const auto& a : s.agents) {
    v.push_back(a.pos.x / W);
    v.push_back(a.pos.y / H);
    v.push_back(std::min(1.0, static_cast<double>(a.level) / cfg.max_agent_level));
  }
  for (const auto& f : s.foods) {
    v.push_back(f.pos.x / W);
    v.push_back(f.pos.y / H);
    v.push_back(std::min(1.0, static_cast<double>(f.level) / cfg.max_food_level()));
    v.push_back(f.alive ? 1.0 : 0.0);
  }
  v.push_back(static_cast<double>(s.t) / cfg.episode_limit);
  return Tensor::vec(std::move(v));
}

/// Ground-truth cooperation concepts:
///   0: some agent is adjacent to an alive food it can eat alone
///   1: some alive food needs more than the strongest single agent
///   2: two agents are within Chebyshev distance 2 of the same alive food
///   3: all foods have been eaten
inline Tensor lbf_concept_labels(const LbfState& s) {
  Tensor c(Shape{kLbfConcepts}, 0.0);
  int max_level = 0;
  for (const auto& a : s.agents) max_level = std::max(max_level, a.level);
  bool any_alive = false;
  for (const auto& f : s.foods) {
    if (!f.alive) continue;
    any_alive = true;
    int near = 0;
    for (const auto& a : s.agents) {
      if (adjacent(a.pos, f.pos) && a.level >= f.level) c[0] = 1.0;
      if (chebyshev(a.pos, f.pos) <= 2) ++near;
    }
    if (f.level > max_level) c[1] = 1.0;
    if (near >= 2) c[2] = 1.0;
  }
  c[3] = any_alive ? 0.0 : 1.0;
  return c;
}

struct LbfReset {
  LbfState state;
  Tensor obs;
};

/// Random start: agent levels and ordinary food levels uniform in
/// {1..max_agent_level}; with force_coop, food 0 gets the sum of the two
/// lowest agent levels. Entities occupy distinct uniformly drawn cells.
inline LbfReset lbf_reset(const LbfConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  LbfState s;
  const std::size_t cells = static_cast<std::size_t>(cfg.grid_w * cfg.grid_h);
  std::vector<std::uint8_t> used(cells, 0);
  auto draw_cell = [&] {
    std::size_t c;
    do c = rng.below(cells);
    while (used[c]);
    used[c] = 1;
    return Cell{static_cast<int>(c % static_cast<std::size_t>(cfg.grid_w)),
                static_cast<int>(c / static_cast<std::size_t>(cfg.grid_w))};
  };
  for (int i = 0; i < cfg.n_agents; ++i)
    s.agents.push_back({Cell{}, 1 + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.max_agent_level)))});
  for (int f = 0; f < cfg.n_foods; ++f)
    s.foods.push_back({Cell{}, 1 + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.max_agent_level))), true});
  if (cfg.force_coop) {
    std::vector<int> lv;
    for (const auto& a : s.agents) lv.push_back(a.level);
    std::sort(lv.begin(), lv.end());
    s.foods[0].level = lv[0] + lv[1];
  }
  for (auto& f : s.foods) f.pos = draw_cell();
  for (auto& a : s.agents) a.pos = draw_cell();
  for (const auto& f : s.foods) s.total_food_level += f.level;
  return {s, lbf_observe(cfg, s)};
}

struct LbfStep {
  LbfState state;
  Tensor obs;
  double reward = 0.0;
  bool done = false;
};

/// Pure transition. Moves resolve in ascending agent index against current
/// occupancy; `eat` targets the lowest-index alive adjacent food and a food
/// is consumed when the levels of its eaters reach its level.
inline LbfStep lbf_step(const LbfConfig& cfg, const LbfState& state, const std::vector<std::size_t>& actions) {
  if (actions.size() != state.agents.size())
    throw Error("lbf_step: expected " + std::to_string(state.agents.size()) + " actions, got " +
                std::to_string(actions.size()));
  for (std::size_t i = 0; i < actions.size(); ++i)
    if (actions[i] >= kLbfActions)
      throw Error("lbf_step: invalid action id " + std::to_string(actions[i]) + " for agent " + std::to_string(i));
  if (state.t >= cfg.episode_limit) throw Error("lbf_step: episode already finished");

  LbfStep out;
  LbfState& s = out.state;
  s = state;
  auto blocked = [&](Cell c, std::size_t self) {
    if (c.x < 0 || c.y < 0 || c.x >= cfg.grid_w || c.y >= cfg.grid_h) return true;
    for (const auto& f : s.foods)
      if (f.alive && f.pos == c) return true;
    for (std::size_t j = 0; j < s.agents.size(); ++j)
      if (j != self && s.agents[j].pos == c) return true;
    return false;
  };
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    Cell target = s.agents[i].pos;
    switch (static_cast<Action>(actions[i])) {
      case Action::up: --target.y; break;
      case Action::down: ++target.y; break;
      case Action::left: --target.x; break;
      case Action::right: ++target.x; break;
      default: continue;
    }
    if (!blocked(target, i)) s.agents[i].pos = target;
  }

  std::vector<int> load(s.foods.size(), 0);
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    if (static_cast<Action>(actions[i]) != Action::eat) continue;
    for (std::size_t f = 0; f < s.foods.size(); ++f)
      if (s.foods[f].alive && adjacent(s.agents[i].pos, s.foods[f].pos)) {
        load[f] += s.agents[i].level;
        break;
      }
  }
  bool consumed = false;
  for (std::size_t f = 0; f < s.foods.size(); ++f) {
    auto& food = s.foods[f];
    if (food.alive && load[f] > 0 && load[f] >= food.level) {
      food.alive = false;
      out.reward += static_cast<double>(food.level) / s.total_food_level;
      consumed = true;
    }
  }
  if (!consumed) out.reward += cfg.coop_penalty;
  ++s.t;
  const bool all_eaten = std::none_of(s.foods.begin(), s.foods.end(), [](const FoodInfo& f) { return f.alive; });
  out.done = all_eaten || s.t >= cfg.episode_limit;
  out.obs = lbf_observe(cfg, s);
  return out;
}

// ---------------------------------------------------------------------------
// One-step matrix games

struct MatrixGame {
  std::size_t n_agents = 2;
  std::size_t n_actions = 2;
  std::vector<double> payoff;  // row-major over the joint action

  void validate() const {
    if (n_agents < 1) throw Error("matrix game: n_agents must be >= 1");
    if (n_actions < 1) throw Error("matrix game: n_actions must be >= 1");
    std::size_t expect = 1;
    for (std::size_t i = 0; i < n_agents; ++i) expect *= n_actions;
    if (payoff.size() != expect)
      throw Error("matrix game: payoff needs " + std::to_string(expect) + " entries, got " + std::to_string(payoff.size()));
    for (double v : payoff)
      if (!std::isfinite(v)) throw Error("matrix game: non-finite payoff");
  }
};

inline double matrix_game_payoff(const MatrixGame& g, const std::vector<std::size_t>& joint) {
  if (joint.size() != g.n_agents)
    throw Error("matrix game: expected " + std::to_string(g.n_agents) + " actions, got " + std::to_string(joint.size()));
  std::size_t idx = 0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (joint[i] >= g.n_actions)
      throw Error("matrix game: action " + std::to_string(joint[i]) + " of agent " + std::to_string(i) + " out of range");
    idx = idx * g.n_actions + joint[i];
  }
  return g.payoff.at(idx);
}

// ---------------------------------------------------------------------------
// Uniform interface used by rollouts

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::size_t n_agents() const = 0;
  virtual std::size_t n_actions() const = 0;
  virtual std::size_t obs_dim() const = 0;
  virtual std::size_t state_dim() const = 0;
  /// Number of ground-truth concept labels (0 if the task has none).
  virtual std::size_t n_labels() const = 0;
  virtual std::size_t episode_limit() const = 0;

  virtual void reset(std::uint64_t seed) = 0;
  virtual StepOutcome step(const std::vector<std::size_t>& actions) = 0;
  virtual Tensor observations() const = 0;  // [n x obs_dim]
  virtual Tensor state() const = 0;         // [state_dim]
  virtual Tensor labels() const = 0;        // [n_labels]
  virtual Tensor avail_actions() const = 0; // [n x n_actions]
  virtual std::unique_ptr<Environment> clone() const = 0;
};

class LbfEnv final : public Environment {
 public:
  explicit LbfEnv(LbfConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    reset(0);
  }
  std::size_t n_agents() const override { return static_cast<std::size_t>(cfg_.n_agents); }
  std::size_t n_actions() const override { return kLbfActions; }
  std::size_t obs_dim() const override { return cfg_.obs_dim(); }
  std::size_t state_dim() const override { return cfg_.state_dim(); }
  std::size_t n_labels() const override { return kLbfConcepts; }
  std::size_t episode_limit() const override { return static_cast<std::size_t>(cfg_.episode_limit); }

  void reset(std::uint64_t seed) override {
    auto r = lbf_reset(cfg_, seed);
    state_ = std::move(r.state);
    obs_ = std::move(r.obs);
  }
  StepOutcome step(const std::vector<std::size_t>& actions) override {
    auto r = lbf_step(cfg_, state_, actions);
    state_ = std::move(r.state);
    obs_ = std::move(r.obs);
    return {r.reward, r.done};
  }
  Tensor observations() const override { return obs_; }
  Tensor state() const override { return encode_state(cfg_, state_); }
  Tensor labels() const override { return lbf_concept_labels(state_); }
  Tensor avail_actions() const override { return Tensor(Shape{n_agents(), kLbfActions}, 1.0); }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<LbfEnv>(*this); }

  const LbfConfig& config() const { return cfg_; }
  const LbfState& lbf_state() const { return state_; }

 private:
  LbfConfig cfg_;
  LbfState state_;
  Tensor obs_;
};

/// Single-step cooperative game; every agent observes a constant 1.
class MatrixGameEnv final : public Environment {
 public:
  explicit MatrixGameEnv(MatrixGame g) : game_(std::move(g)) { game_.validate(); }
  std::size_t n_agents() const override { return game_.n_agents; }
  std::size_t n_actions() const override { return game_.n_actions; }
  std::size_t obs_dim() const override { return 1; }
  std::size_t state_dim() const override { return 1; }
  std::size_t n_labels() const override { return 0; }
  std::size_t episode_limit() const override { return 1; }

  void reset(std::uint64_t) override { finished_ = false; }
  StepOutcome step(const std::vector<std::size_t>& actions) override {
    if (finished_) throw Error("matrix game: episode already finished");
    finished_ = true;
    return {matrix_game_payoff(game_, actions), true};
  }
  Tensor observations() const override { return Tensor(Shape{game_.n_agents, 1}, 1.0); }
  Tensor state() const override { return Tensor(Shape{1}, finished_ ? 0.0 : 1.0); }
  Tensor labels() const override { return Tensor(Shape{0}); }
  Tensor avail_actions() const override { return Tensor(Shape{game_.n_agents, game_.n_actions}, 1.0); }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<MatrixGameEnv>(*this); }

  const MatrixGame& game() const { return game_; }

 private:
  MatrixGame game_;
  bool finished_ = false;
};

}  // namespace cmq::env
