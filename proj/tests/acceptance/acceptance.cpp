// Acceptance suite: one PASS/FAIL line per criterion.
//
// Training criteria write their runs under --out and resume from finished
// checkpoints found there, so a second invocation only re-evaluates. Pass
// --fresh to discard earlier runs.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>

#include "cmq/experiments.hpp"
#include "cmq/runtime.hpp"

namespace {

using namespace cmq;
namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr int kGradConfigs = 20;
constexpr int kMonotoneDraws = 1000;
constexpr double kMonotoneFloor = -1e-10;
constexpr int kIgmInstances = 500;
constexpr int kInterventionMixers = 200;
constexpr int kReplacementDraws = 100000;
constexpr double kReplacementProb = 0.25;
constexpr double kReplacementTol = 0.01;
constexpr std::size_t kMatrixSteps = 5000;
constexpr int kMatrixSeedsNeeded = 4;
constexpr std::size_t kLbfSteps = 200000;
constexpr double kLbfThreshold = 0.8;
constexpr int kLbfSeedsNeeded = 3;
constexpr std::size_t kHeldoutStates = 1000;
constexpr std::uint64_t kHeldoutSeed = 0x5eed0ff;
constexpr double kConceptAccuracy = 0.9;
constexpr std::size_t kSweepSteps = 50000;
const std::vector<std::size_t> kSweepKs{4, 8, 16};
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};
const std::vector<std::uint64_t> kSweepSeeds{1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

std::vector<double> draw(std::size_t n, Rng& rng, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Default init leaves biases at zero; random biases move units off their kinks.
ParamSet random_mixer(const mixer::MixerConfig& cfg, std::uint64_t seed) {
  ParamSet p = mixer::init_mixer_params(cfg, seed);
  Rng rng(mix_seed(seed, 91));
  for (auto& [name, t] : p.entries())
    if (name.ends_with(".b"))
      for (auto& v : t.data) v = rng.uniform(-0.5, 0.5);
  return p;
}

// ---------------------------------------------------------------------------
// Property criteria

Outcome gradcheck() {
  double worst = 0.0;
  for (int c = 0; c < kGradConfigs; ++c) {
    const auto prob = experiments::make_tiny_problem(1000 + c, 3, 4, 8);
    worst = std::max(worst, experiments::check_tiny_problem(prob, kGradEps).max_error);
  }
  return {worst <= kGradTol, "max relative error " + fmt(worst) + " over " + std::to_string(kGradConfigs) +
                                 " configs (tolerance " + fmt(kGradTol) + ")"};
}

Outcome monotonicity() {
  Rng rng(4242);
  double lowest = INFINITY;
  for (int d = 0; d < kMonotoneDraws; ++d) {
    const std::size_t n = 1 + rng.below(5), K = 1 + rng.below(16), S = 2 + rng.below(10);
    const mixer::MixerConfig cfg{K, 4 + rng.below(8), 4 + rng.below(8), 4 + rng.below(8), n, S};
    const ParamSet P = random_mixer(cfg, 50000 + d);
    Tape t;
    const Bound b = bind(t, P, false);
    const Var q = t.leaf(Tensor(Shape{1, n}, draw(n, rng, -5, 5)));
    const auto o = mixer::mix(b, cfg, q, t.constant(Tensor(Shape{1, S}, draw(S, rng, -2, 2))));
    t.backward(ad::sum(o.q_tot));
    for (double g : t.grad(q).data) lowest = std::min(lowest, g);
  }
  return {lowest >= kMonotoneFloor,
          "min dQtot/dq_i " + fmt(lowest) + " over " + std::to_string(kMonotoneDraws) + " draws (floor -1e-10)"};
}

Outcome igm() {
  Rng rng(777);
  int mismatches = 0;
  for (int trial = 0; trial < kIgmInstances; ++trial) {
    const std::size_t n = 1 + rng.below(3), A = 2 + rng.below(4), S = 2 + rng.below(8);
    const mixer::MixerConfig cfg{1 + rng.below(8), 6, 6, 6, n, S};
    const ParamSet P = random_mixer(cfg, 60000 + trial);
    const auto s = draw(S, rng, -1, 1);
    std::vector<std::vector<double>> util(n);
    std::vector<std::size_t> greedy(n);
    for (std::size_t i = 0; i < n; ++i) {
      util[i] = draw(A, rng, -2, 2);
      greedy[i] = static_cast<std::size_t>(std::max_element(util[i].begin(), util[i].end()) - util[i].begin());
    }
    // Every joint action as one batch row.
    std::size_t joints = 1;
    for (std::size_t i = 0; i < n; ++i) joints *= A;
    Tensor qs(Shape{joints, n}), states(Shape{joints, S});
    for (std::size_t j = 0; j < joints; ++j) {
      for (std::size_t i = 0, r = j; i < n; ++i, r /= A) qs.at(j, i) = util[i][r % A];
      std::copy(s.begin(), s.end(), states.data.begin() + j * S);
    }
    Tape t;
    const Bound b = bind(t, P, false);
    const auto o = mixer::mix(b, cfg, t.constant(qs), t.constant(states));
    const auto& v = o.q_tot.value().data;
    const std::size_t best = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    std::vector<std::size_t> joint(n);
    for (std::size_t i = 0, r = best; i < n; ++i, r /= A) joint[i] = r % A;
    mismatches += joint != greedy;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in " + std::to_string(kIgmInstances) +
                               " brute-force instances (n<=3, |A|<=5)"};
}

// Q_tot with concept k routed only through one side (pos when side=1), all
// other concepts mixed by their predicted probability. Assembled from the
// individual mixer stages, not through the override mechanism.
double hardwired_q_tot(const ParamSet& P, const mixer::MixerConfig& cfg, const std::vector<double>& q,
                       const std::vector<double>& s, std::size_t k, bool side) {
  Tape t;
  const Bound b = bind(t, P, false);
  const Var sv = t.constant(Tensor(Shape{1, s.size()}, s));
  const auto emb = mixer::concept_embeddings(b, cfg, sv);
  const auto probs = mixer::concept_probs(b, cfg, emb);
  const auto tq = mixer::temporal_q(b, cfg, sv, t.constant(Tensor(Shape{1, q.size()}, q)));
  const Var u = mixer::attention_query(b, sv);
  const auto& lp = ad::group_rowdot(emb.pos, u).value().data;
  const auto& ln = ad::group_rowdot(emb.neg, u).value().data;
  const std::size_t K = cfg.concepts;
  Tensor logits(Shape{1, K}), q_hat(Shape{1, K});
  for (std::size_t j = 0; j < K; ++j) {
    if (j == k) {
      logits[j] = side ? lp[j] : ln[j];
      q_hat[j] = side ? tq.pos.value()[j] : tq.neg.value()[j];
    } else {
      const double p = probs.prob.value()[j];
      logits[j] = p * lp[j] + (1.0 - p) * ln[j];
      q_hat[j] = p * tq.pos.value()[j] + (1.0 - p) * tq.neg.value()[j];
    }
  }
  const Var alpha = ad::softmax(t.constant(logits));
  const Var out = ad::add(ad::rowdot(alpha, t.constant(q_hat)), mixer::state_bias(b, cfg, sv));
  return out.value()[0];
}

Outcome intervention() {
  Rng rng(31337);
  std::size_t checks = 0, value_mismatch = 0, leaked = 0;
  for (int trial = 0; trial < kInterventionMixers; ++trial) {
    const std::size_t n = 1 + rng.below(4), S = 2 + rng.below(8);
    const mixer::MixerConfig cfg{1 + rng.below(8), 3 + rng.below(6), 3 + rng.below(6), 4, n, S};
    const ParamSet P = random_mixer(cfg, 70000 + trial);
    const auto q = draw(n, rng, -3, 3), s = draw(S, rng, -2, 2);
    for (std::size_t k = 0; k < cfg.concepts; ++k)
      for (bool side : {true, false}) {
        ++checks;
        const mixer::InterventionMask iv{{k, side ? 1.0 : 0.0}};
        Tape t;
        const Bound b = bind(t, P, true);
        const auto o = mixer::mix(b, cfg, t.constant(Tensor(Shape{1, n}, q)), t.constant(Tensor(Shape{1, S}, s)), iv);
        if (o.q_tot.value()[0] != hardwired_q_tot(P, cfg, q, s, k, side)) ++value_mismatch;
        t.backward(ad::sum(o.q_tot));
        const ParamSet g = collect_grads(t, b, P);
        // The unused side's rows of concept k: embedding and hypernetwork.
        const std::string other = side ? "neg" : "pos";
        const std::size_t m = cfg.embed_dim;
        bool clean = true;
        for (std::size_t j = 0; j < m; ++j) {
          clean &= g.at(mixer::kPrefix + "emb_" + other + ".b")[k * m + j] == 0.0;
          for (std::size_t c = 0; c < S; ++c) clean &= g.at(mixer::kPrefix + "emb_" + other + ".w").at(k * m + j, c) == 0.0;
        }
        for (std::size_t i = 0; i < n; ++i) {
          clean &= g.at(mixer::kPrefix + "hyper_" + other + ".b")[k * n + i] == 0.0;
          for (std::size_t c = 0; c < S; ++c) clean &= g.at(mixer::kPrefix + "hyper_" + other + ".w").at(k * n + i, c) == 0.0;
        }
        leaked += !clean;
      }
  }
  return {value_mismatch == 0 && leaked == 0,
          std::to_string(value_mismatch) + " Q_tot mismatches vs hard-wired path, " + std::to_string(leaked) +
              " nonzero gradients into the unused path, over " + std::to_string(checks) + " forced concepts"};
}

Outcome replacement() {
  Rng rng(2718);
  const std::size_t L = 4, K = 8, rows = kReplacementDraws / L;
  std::vector<double> labels(rows * L);
  for (auto& l : labels) l = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const auto ov = training::draw_interventions(labels, rows, L, K, kReplacementProb, rng);
  std::size_t replaced = 0, wrong = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t i = r * K + k;
      if (k >= L) {
        wrong += ov.mask[i] != 0;
        continue;
      }
      if (ov.mask[i]) {
        ++replaced;
        wrong += ov.values[i] != labels[r * L + k];
      }
    }
  const double rate = static_cast<double>(replaced) / static_cast<double>(rows * L);
  return {std::fabs(rate - kReplacementProb) <= kReplacementTol && wrong == 0,
          "replacement rate " + fmt(rate, 5) + " over " + std::to_string(rows * L) + " draws (target 0.25 +- 0.01), " +
              std::to_string(wrong) + " misplaced replacements"};
}

// ---------------------------------------------------------------------------
// Training criteria

RunConfig matrix_config() {
  RunConfig c;
  c.env.kind = EnvKind::matrix;
  c.env.matrix = {2, 2, {8, 3, 3, 0}};
  c.training.batch_size = 32;
  c.training.buffer_size = 5000;
  c.training.warmup_episodes = 32;
  c.training.target_interval = 200;
  c.training.eps_decay_steps = 2000;
  c.training.eval_interval = 250;
  c.training.eval_episodes = 1;
  c.training.total_steps = kMatrixSteps;
  c.training.seeds = kSeeds;
  return c;
}

RunConfig lbf_config(mixer::MixerKind kind) {
  RunConfig c;  // 8x8, two agents, two foods, food 0 needs both, limit 50
  c.mixer.kind = kind;
  c.mixer.concepts = 16;
  c.training.concept_loss_weight = 0.1;
  c.training.intervention_prob = 0.25;
  c.training.total_steps = kLbfSteps;
  c.training.seeds = kSeeds;
  return c;
}

experiments::RunResult train(const RunConfig& cfg, std::uint64_t seed, const fs::path& dir, std::size_t ckpt_every) {
  experiments::RunOptions opt;
  opt.out = dir;
  opt.resume = true;
  opt.checkpoint_every = ckpt_every;
  opt.log = &std::cerr;
  opt.reach_threshold = kLbfThreshold;
  return experiments::run_seed(cfg, seed, opt);
}

std::vector<std::size_t> greedy_joint(const RunConfig& cfg, const ParamSet& params) {
  const auto env = cfg.env.make();
  const auto m = training::make_model(cfg, *env);
  return training::rollout(*env, params, m, {0}, {}).front().actions;
}

Outcome matrix_game(const fs::path& out) {
  const RunConfig cfg = matrix_config();
  // Exhaustive optimum of the payoff table.
  const auto& g = cfg.env.matrix;
  std::vector<std::size_t> best;
  double best_v = -INFINITY;
  for (std::size_t a = 0; a < g.n_actions; ++a)
    for (std::size_t b = 0; b < g.n_actions; ++b)
      if (const double v = env::matrix_game_payoff(g, {a, b}); v > best_v) {
        best_v = v;
        best = {a, b};
      }
  int hits = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const auto r = train(cfg, seed, out / "matrix" / ("seed_" + std::to_string(seed)), 0);
    const auto joint = greedy_joint(cfg, r.params);
    hits += joint == best;
    per_seed += " " + std::to_string(joint[0]) + std::to_string(joint[1]);
  }
  return {hits >= kMatrixSeedsNeeded, std::to_string(hits) + "/5 seeds greedy on optimal joint action (" +
                                          std::to_string(best[0]) + "," + std::to_string(best[1]) + ") after " +
                                          std::to_string(kMatrixSteps) + " steps; greedy per seed:" + per_seed};
}

struct LbfRuns {
  std::vector<experiments::RunResult> cmq, vdn;
};

LbfRuns lbf_runs(const fs::path& out) {
  LbfRuns r;
  for (auto kind : {mixer::MixerKind::cmq, mixer::MixerKind::vdn}) {
    const RunConfig cfg = lbf_config(kind);
    for (std::uint64_t seed : kSeeds) {
      auto res = train(cfg, seed, out / "lbf" / mixer::mixer_name(kind) / ("seed_" + std::to_string(seed)), 20000);
      (kind == mixer::MixerKind::cmq ? r.cmq : r.vdn).push_back(std::move(res));
    }
  }
  return r;
}

double mean_auc(const std::vector<experiments::RunResult>& runs) {
  double s = 0.0;
  for (const auto& r : runs) s += r.auc;
  return s / static_cast<double>(runs.size());
}

Outcome lbf(const LbfRuns& runs) {
  int reached = 0;
  std::string per_seed;
  for (const auto& r : runs.cmq) {
    reached += r.first_step_reaching > 0 && r.first_step_reaching <= kLbfSteps;
    per_seed += " " + fmt(r.best_return, 3) + (r.first_step_reaching ? "@" + std::to_string(r.first_step_reaching) : "");
  }
  const double a_cmq = mean_auc(runs.cmq), a_vdn = mean_auc(runs.vdn);
  return {reached >= kLbfSeedsNeeded && a_cmq >= a_vdn,
          std::to_string(reached) + "/5 CMQ seeds reach return >= 0.8 within 200k steps (best per seed:" + per_seed +
              "); mean AUC CMQ " + fmt(a_cmq) + " vs VDN " + fmt(a_vdn)};
}

Outcome concepts(const LbfRuns& runs) {
  const RunConfig cfg = lbf_config(mixer::MixerKind::cmq);
  const auto env = cfg.env.make();
  const auto m = training::make_model(cfg, *env);
  const auto states = experiments::heldout_states(*env, kHeldoutStates, kHeldoutSeed);
  double lowest = 1.0;
  std::string per_seed;
  for (const auto& r : runs.cmq) {
    const double acc = experiments::concept_accuracy(r.params, m, states);
    lowest = std::min(lowest, acc);
    per_seed += " " + fmt(acc, 4);
  }
  return {lowest >= kConceptAccuracy, "held-out accuracy on " + std::to_string(m.supervised()) +
                                          " supervised concepts, 1000 states, per seed:" + per_seed +
                                          " (every seed must reach 0.9)"};
}

Outcome sweep(const fs::path& out) {
  RunConfig base = lbf_config(mixer::MixerKind::cmq);
  base.training.total_steps = kSweepSteps;
  base.training.seeds = kSweepSeeds;
  std::map<std::size_t, std::vector<experiments::RunResult>> runs;
  std::vector<experiments::SweepPoint> points;
  for (std::size_t K : kSweepKs) {
    RunConfig cfg = base;
    cfg.mixer.concepts = K;
    for (std::uint64_t seed : kSweepSeeds)
      runs[K].push_back(train(cfg, seed, out / "sweep" / ("K" + std::to_string(K)) / ("seed_" + std::to_string(seed)), 0));
    const auto pts = experiments::aggregate(K, runs[K]);
    points.insert(points.end(), pts.begin(), pts.end());
  }
  runio::write_text(out / "sweep" / "sweep.csv", experiments::sweep_csv(points));
  // Comparable: same evaluation grid for every K and finite statistics.
  std::map<std::size_t, std::vector<std::size_t>> grid;
  bool finite = true;
  for (const auto& p : points) {
    grid[p.concepts].push_back(p.env_steps / base.training.eval_interval);
    finite &= std::isfinite(p.mean) && std::isfinite(p.lo) && std::isfinite(p.hi) && p.lo <= p.mean + 1e-12 &&
              p.mean <= p.hi + 1e-12;
  }
  bool same_grid = grid.size() == kSweepKs.size();
  for (const auto& [K, g] : grid) same_grid &= g == grid.begin()->second && !g.empty();
  std::string finals;
  for (std::size_t K : kSweepKs) {
    double s = 0.0;
    for (const auto& r : runs[K]) s += r.final_return;
    finals += " K" + std::to_string(K) + "=" + fmt(s / static_cast<double>(runs[K].size()), 3);
  }
  return {same_grid && finite, "K in {4,8,16} x 3 seeds x " + std::to_string(kSweepSteps) + " steps; " +
                                   std::to_string(points.size()) + " curve points on a shared grid: " +
                                   (same_grid ? "yes" : "no") + "; final mean return" + finals};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const fs::path& out) {
  RunConfig cfg = lbf_config(mixer::MixerKind::cmq);
  cfg.training.total_steps = 6000;
  cfg.training.warmup_episodes = 10;
  cfg.training.eval_interval = 1000;
  cfg.training.eval_episodes = 8;
  const fs::path base = out / "determinism";
  fs::remove_all(base);
  auto run = [&](const std::string& name, std::size_t steps, bool resume) {
    experiments::RunOptions opt;
    opt.out = base / name;
    opt.resume = resume;
    RunConfig c = cfg;
    c.training.total_steps = steps;
    experiments::run_seed(c, 7, opt);
  };
  run("a", 6000, false);
  run("b", 6000, false);
  run("split", 3000, false);
  run("split", 6000, true);
  const std::string ma = slurp(base / "a" / "metrics.csv");
  const bool same_log = ma == slurp(base / "b" / "metrics.csv");
  const bool same_resume = ma == slurp(base / "split" / "metrics.csv") &&
                           runio::load_checkpoint(base / "a" / "checkpoint.bin") ==
                               runio::load_checkpoint(base / "split" / "checkpoint.bin");
  return {same_log && same_resume, std::string("repeat run metrics ") + (same_log ? "identical" : "DIFFER") +
                                       "; 3k+3k resumed run vs uninterrupted 6k: " +
                                       (same_resume ? "identical metrics and checkpoint" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_runs";
  bool fresh = false;
  std::vector<std::string> only;
  const std::set<std::string> names{"gradcheck", "monotonicity", "igm",  "intervention", "replacement",
                                    "matrix",    "lbf",          "concepts", "sweep",     "determinism"};
  app.add_option("--out", out, "Directory for training runs");
  app.add_flag("--fresh", fresh, "Discard runs left by an earlier invocation");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::IsMember(names));
  CLI11_PARSE(app, argc, argv);
  tune_allocator();

  const fs::path dir(out);
  if (fresh) fs::remove_all(dir);
  fs::create_directories(dir);
  auto wanted = [&](const std::string& n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  int failed = 0;
  auto report = [&](const std::string& name, const std::function<Outcome()>& f) {
    if (!wanted(name)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(secs, 3) << " s]"
              << std::endl;
  };

  report("gradcheck", gradcheck);
  report("monotonicity", monotonicity);
  report("igm", igm);
  report("intervention", intervention);
  report("replacement", replacement);
  report("matrix", [&] { return matrix_game(dir); });
  std::optional<LbfRuns> runs;
  auto get_runs = [&]() -> const LbfRuns& {
    if (!runs) runs = lbf_runs(dir);
    return *runs;
  };
  report("lbf", [&] { return lbf(get_runs()); });
  report("concepts", [&] { return concepts(get_runs()); });
  report("sweep", [&] { return sweep(dir); });
  report("determinism", [&] { return determinism(dir); });
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
