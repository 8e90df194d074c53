#include <gtest/gtest.h>

#include <set>

#include "cmq/env.hpp"

using namespace cmq;
using namespace cmq::env;

namespace {

constexpr std::size_t U = 0, D = 1, L = 2, R = 3, EAT = 4, NOOP = 5;

LbfConfig small_cfg() {
  LbfConfig c;
  c.grid_w = c.grid_h = 5;
  c.force_coop = false;
  return c;
}

LbfState make_state(std::vector<AgentInfo> agents, std::vector<FoodInfo> foods) {
  LbfState s;
  s.agents = std::move(agents);
  s.foods = std::move(foods);
  for (const auto& f : s.foods) s.total_food_level += f.level;
  return s;
}

// Walks `steps` uniformly random joint actions from a seeded reset.
LbfState random_walk(const LbfConfig& cfg, std::uint64_t seed, int steps) {
  Rng rng(mix_seed(seed, 99));
  LbfState s = lbf_reset(cfg, seed).state;
  for (int t = 0; t < steps; ++t) {
    std::vector<std::size_t> a(s.agents.size());
    for (auto& x : a) x = rng.below(kLbfActions);
    const auto r = lbf_step(cfg, s, a);
    s = r.state;
    if (r.done) break;
  }
  return s;
}

// Second, independently written version of the concept predicates.
std::array<int, 4> labels_reference(const LbfState& s) {
  std::array<int, 4> c{0, 0, 0, 0};
  int strongest = 0;
  for (const auto& a : s.agents) strongest = a.level > strongest ? a.level : strongest;
  int alive = 0;
  for (const auto& f : s.foods) {
    if (!f.alive) continue;
    ++alive;
    int close = 0;
    for (const auto& a : s.agents) {
      const int dx = a.pos.x - f.pos.x, dy = a.pos.y - f.pos.y;
      if ((dx * dx + dy * dy == 1) && a.level >= f.level) c[0] = 1;
      if (dx >= -2 && dx <= 2 && dy >= -2 && dy <= 2) ++close;
    }
    if (f.level > strongest) c[1] = 1;
    if (close >= 2) c[2] = 1;
  }
  c[3] = alive == 0;
  return c;
}

}  // namespace

TEST(Lbf, ResetIsDeterministic) {
  const LbfConfig cfg;
  const auto a = lbf_reset(cfg, 42), b = lbf_reset(cfg, 42);
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(a.obs, b.obs);
  EXPECT_FALSE(a.state == lbf_reset(cfg, 43).state);
}

TEST(Lbf, ResetPlacesEntitiesOnDistinctCells) {
  const LbfConfig cfg;
  const auto s = lbf_reset(cfg, 7).state;
  std::set<std::pair<int, int>> cells;
  for (const auto& a : s.agents) cells.insert({a.pos.x, a.pos.y});
  for (const auto& f : s.foods) cells.insert({f.pos.x, f.pos.y});
  EXPECT_EQ(cells.size(), 4u);
}

TEST(Lbf, ResetSweepSatisfiesStateInvariants) {
  const LbfConfig cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = lbf_reset(cfg, seed);
    EXPECT_NO_THROW(check_state(cfg, r.state)) << "seed " << seed;
    EXPECT_EQ(r.state.t, 0);
    int strongest = 0;
    for (const auto& a : r.state.agents) strongest = std::max(strongest, a.level);
    const bool needs_help = std::any_of(r.state.foods.begin(), r.state.foods.end(),
                                        [&](const FoodInfo& f) { return f.level > strongest; });
    EXPECT_TRUE(needs_help) << "seed " << seed;
  }
}

TEST(Lbf, ConfigValidation) {
  LbfConfig c;
  c.n_agents = 10;
  c.n_foods = 7;
  c.grid_w = c.grid_h = 4;
  EXPECT_THROW(lbf_reset(c, 1), Error);
  c = LbfConfig{};
  c.grid_w = 3;
  EXPECT_THROW(c.validate(), Error);
  c = LbfConfig{};
  c.episode_limit = 0;
  EXPECT_THROW(c.validate(), Error);
  c = LbfConfig{};
  c.n_agents = 1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Lbf, NoopCostsPenalty) {
  const LbfConfig cfg;
  const auto r = lbf_step(cfg, lbf_reset(cfg, 3).state, {NOOP, NOOP});
  EXPECT_EQ(r.reward, -0.002);
  EXPECT_FALSE(r.done);
}

TEST(Lbf, StrongAgentEatsWeakFoodAlone) {
  const LbfConfig cfg = small_cfg();
  const auto s = make_state({{{1, 1}, 2}, {{4, 4}, 1}}, {{{2, 1}, 1, true}, {{0, 4}, 2, true}});
  const auto r = lbf_step(cfg, s, {EAT, NOOP});
  EXPECT_FALSE(r.state.foods[0].alive);
  EXPECT_TRUE(r.state.foods[1].alive);
  EXPECT_DOUBLE_EQ(r.reward, 1.0 / 3.0);
}

TEST(Lbf, TwoWeakAgentsEatTogether) {
  const LbfConfig cfg = small_cfg();
  const auto s = make_state({{{1, 2}, 1}, {{3, 2}, 1}}, {{{2, 2}, 2, true}});
  const auto r = lbf_step(cfg, s, {EAT, EAT});
  EXPECT_FALSE(r.state.foods[0].alive);
  EXPECT_DOUBLE_EQ(r.reward, 1.0);
  EXPECT_TRUE(r.done);

  const auto alone = lbf_step(cfg, s, {EAT, NOOP});
  EXPECT_TRUE(alone.state.foods[0].alive);
  EXPECT_EQ(alone.reward, -0.002);
}

TEST(Lbf, EatPicksLowestIndexFood) {
  const LbfConfig cfg = small_cfg();
  const auto s = make_state({{{2, 2}, 2}, {{0, 0}, 1}}, {{{2, 1}, 1, true}, {{2, 3}, 1, true}});
  const auto r = lbf_step(cfg, s, {EAT, NOOP});
  EXPECT_FALSE(r.state.foods[0].alive);
  EXPECT_TRUE(r.state.foods[1].alive);
}

TEST(Lbf, MovementIsBlockedByWallsFoodAndAgents) {
  const LbfConfig cfg = small_cfg();
  const auto s = make_state({{{0, 0}, 1}, {{2, 0}, 1}}, {{{0, 1}, 1, true}});
  auto r = lbf_step(cfg, s, {U, NOOP});
  EXPECT_EQ(r.state.agents[0].pos, (Cell{0, 0}));
  r = lbf_step(cfg, s, {D, NOOP});
  EXPECT_EQ(r.state.agents[0].pos, (Cell{0, 0}));
  r = lbf_step(cfg, s, {R, L});
  // Agent 0 claims (1,0) first; agent 1 then finds it occupied.
  EXPECT_EQ(r.state.agents[0].pos, (Cell{1, 0}));
  EXPECT_EQ(r.state.agents[1].pos, (Cell{2, 0}));
}

TEST(Lbf, FollowingIntoVacatedCellSucceedsInIndexOrder) {
  const LbfConfig cfg = small_cfg();
  const auto s = make_state({{{2, 2}, 1}, {{1, 2}, 1}}, {{{4, 4}, 1, true}});
  auto r = lbf_step(cfg, s, {R, R});
  EXPECT_EQ(r.state.agents[0].pos, (Cell{3, 2}));
  EXPECT_EQ(r.state.agents[1].pos, (Cell{2, 2}));
  // The reverse ordering leaves the follower behind.
  const auto s2 = make_state({{{1, 2}, 1}, {{2, 2}, 1}}, {{{4, 4}, 1, true}});
  r = lbf_step(cfg, s2, {R, R});
  EXPECT_EQ(r.state.agents[0].pos, (Cell{1, 2}));
  EXPECT_EQ(r.state.agents[1].pos, (Cell{3, 2}));
}

TEST(Lbf, InvalidActionsAreRejected) {
  const LbfConfig cfg;
  const auto s = lbf_reset(cfg, 1).state;
  EXPECT_THROW(lbf_step(cfg, s, {6, 0}), Error);
  EXPECT_THROW(lbf_step(cfg, s, {0}), Error);
  LbfState over = s;
  over.t = cfg.episode_limit;
  EXPECT_THROW(lbf_step(cfg, over, {0, 0}), Error);
}

TEST(Lbf, EpisodeEndsAtLimit) {
  LbfConfig cfg = small_cfg();
  cfg.episode_limit = 3;
  LbfState s = lbf_reset(cfg, 5).state;
  for (int t = 0; t < 3; ++t) {
    const auto r = lbf_step(cfg, s, {NOOP, NOOP});
    EXPECT_EQ(r.done, t == 2);
    s = r.state;
  }
}

TEST(Lbf, ConceptLabelExamples) {
  auto eaten = make_state({{{0, 0}, 1}, {{4, 4}, 1}}, {{{2, 2}, 1, false}, {{3, 3}, 2, false}});
  EXPECT_EQ(lbf_concept_labels(eaten), Tensor::vec({0, 0, 0, 1}));
  auto lone = make_state({{{1, 1}, 3}}, {{{1, 2}, 1, true}});
  EXPECT_EQ(lbf_concept_labels(lone)[0], 1.0);
}

TEST(Lbf, ConceptLabelsMatchIndependentPredicates) {
  const LbfConfig cfg;
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const auto s = random_walk(cfg, 1000 + i, static_cast<int>(rng.below(50)));
    const auto ref = labels_reference(s);
    const Tensor c = lbf_concept_labels(s);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(c[k], ref[k]) << "state " << i << " concept " << k;
  }
}

TEST(Lbf, StateEncodingIsNormalizedAndInjective) {
  const LbfConfig cfg;
  Rng rng(3);
  std::set<std::vector<double>> seen;
  std::set<std::pair<int, int>> distinct_states;
  for (int i = 0; i < 2000; ++i) {
    const auto s = random_walk(cfg, 5000 + i, static_cast<int>(rng.below(50)));
    const Tensor e = encode_state(cfg, s);
    ASSERT_EQ(e.size(), cfg.state_dim());
    for (double v : e.data) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    seen.insert(e.data);
  }
  // Pairs of distinct states from the scan never share an encoding: compare
  // the number of distinct encodings with the number of distinct states.
  std::set<std::string> states;
  Rng rng2(3);
  for (int i = 0; i < 2000; ++i) {
    const auto s = random_walk(cfg, 5000 + i, static_cast<int>(rng2.below(50)));
    std::string key;
    for (const auto& a : s.agents) key += std::to_string(a.pos.x) + "," + std::to_string(a.pos.y) + "," + std::to_string(a.level) + ";";
    for (const auto& f : s.foods)
      key += std::to_string(f.pos.x) + "," + std::to_string(f.pos.y) + "," + std::to_string(f.level) + "," +
             std::to_string(f.alive) + ";";
    key += std::to_string(s.t);
    states.insert(key);
  }
  EXPECT_EQ(seen.size(), states.size());
}

TEST(Lbf, DeadFoodKeepsPositionInEncoding) {
  const LbfConfig cfg = small_cfg();
  const auto s = make_state({{{1, 1}, 2}, {{4, 4}, 1}}, {{{2, 1}, 1, true}, {{0, 4}, 2, true}});
  const auto r = lbf_step(cfg, s, {EAT, NOOP});
  const Tensor e = encode_state(cfg, r.state);
  const std::size_t f0 = 3 * 2;
  EXPECT_DOUBLE_EQ(e[f0], 2.0 / 5);
  EXPECT_DOUBLE_EQ(e[f0 + 1], 1.0 / 5);
  EXPECT_EQ(e[f0 + 3], 0.0);
}

TEST(Lbf, TrajectoryInvariants) {
  const LbfConfig cfg;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    LbfState s = lbf_reset(cfg, seed).state;
    double ret = 0;
    double prev_c2 = lbf_concept_labels(s)[1];
    bool done = false;
    while (!done) {
      std::vector<std::size_t> a{rng.below(6), rng.below(6)};
      const auto r1 = lbf_step(cfg, s, a);
      const auto r2 = lbf_step(cfg, s, a);
      ASSERT_EQ(r1.state, r2.state);
      ASSERT_EQ(r1.reward, r2.reward);
      ASSERT_NO_THROW(check_state(cfg, r1.state));
      ASSERT_NE(r1.state.agents[0].pos, r1.state.agents[1].pos);
      for (double v : r1.obs.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
      const double c2 = lbf_concept_labels(r1.state)[1];
      ASSERT_LE(c2, prev_c2);
      prev_c2 = c2;
      ret += r1.reward;
      done = r1.done;
      s = r1.state;
    }
    EXPECT_LE(ret, 1.0 + 1e-12);
    EXPECT_GE(ret, cfg.episode_limit * -0.002 - 1e-12);
  }
}

TEST(Lbf, ObservationLayout) {
  const LbfConfig cfg;
  const auto s = make_state({{{0, 0}, 1}, {{1, 0}, 2}}, {{{0, 1}, 4, true}, {{7, 7}, 1, true}});
  const Tensor obs = lbf_observe(cfg, s);
  ASSERT_EQ(obs.cols(), cfg.obs_dim());
  const std::size_t w = cfg.window(), area = w * w, centre = 2 * w + 2;
  EXPECT_EQ(obs.at(0, centre + w), 1.0);             // food level 4 below agent 0
  EXPECT_EQ(obs.at(0, area + centre + 1), 1.0);      // agent 1 to the right
  EXPECT_EQ(obs.at(0, 2 * area + centre - 1), 1.0);  // left of (0,0) is off grid
  EXPECT_EQ(obs.at(0, 3 * area), 0.5);               // own level 1 of 2
  EXPECT_EQ(obs.at(1, 3 * area + 1), 1.0 / 7);
}

TEST(MatrixGame, PayoffLookup) {
  const MatrixGame g{2, 2, {8, -12, -12, 0}};
  EXPECT_EQ(matrix_game_payoff(g, {0, 0}), 8);
  EXPECT_EQ(matrix_game_payoff(g, {1, 1}), 0);
  EXPECT_THROW(matrix_game_payoff(g, {2, 0}), Error);
  EXPECT_THROW(matrix_game_payoff(g, {0}), Error);
  EXPECT_THROW((MatrixGame{2, 2, {1, 2, 3}}.validate()), Error);
  EXPECT_THROW((MatrixGame{2, 2, {1, 2, 3, NAN}}.validate()), Error);
}

TEST(MatrixGame, EnvTerminatesAfterOneStep) {
  MatrixGameEnv e({2, 2, {8, -12, -12, 0}});
  e.reset(0);
  EXPECT_EQ(e.state()[0], 1.0);
  const auto out = e.step({0, 0});
  EXPECT_EQ(out.reward, 8);
  EXPECT_TRUE(out.done);
  EXPECT_THROW(e.step({0, 0}), Error);
  e.reset(1);
  EXPECT_NO_THROW(e.step({1, 1}));
}

TEST(MatrixGame, MonotoneGameOptimumIsPerAgentArgmax) {
  // u0 + u1 with 5 actions each: per-agent argmax equals the exhaustive
  // optimum over all 25 joint actions.
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> u0(5), u1(5);
    for (auto& v : u0) v = rng.uniform(-1, 1);
    for (auto& v : u1) v = rng.uniform(-1, 1);
    MatrixGame g{2, 5, {}};
    for (std::size_t a = 0; a < 5; ++a)
      for (std::size_t b = 0; b < 5; ++b) g.payoff.push_back(u0[a] + u1[b]);
    double best = -1e9;
    for (std::size_t a = 0; a < 5; ++a)
      for (std::size_t b = 0; b < 5; ++b) best = std::max(best, matrix_game_payoff(g, {a, b}));
    const auto a0 = static_cast<std::size_t>(std::max_element(u0.begin(), u0.end()) - u0.begin());
    const auto a1 = static_cast<std::size_t>(std::max_element(u1.begin(), u1.end()) - u1.begin());
    EXPECT_EQ(matrix_game_payoff(g, {a0, a1}), best);
  }
}
