#pragma once

#include <algorithm>
#include <map>
#include <ostream>

#include "cmq/gradcheck.hpp"
#include "cmq/runio.hpp"

namespace cmq::experiments {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Whole-pipeline gradient check

struct TinyProblem {
  training::Model model;
  training::EpisodeBatch batch;
  Tensor targets;
  mixer::ProbOverride override_;
  double concept_weight = 0.1;
  ParamSet params;
};

/// Random tiny agents + CMQ mixer + loss problem. Inputs are continuous so
/// that relu/abs kinks are hit with probability zero.
inline TinyProblem make_tiny_problem(std::uint64_t seed, std::size_t n = 3, std::size_t K = 4, std::size_t m = 8) {
  Rng rng(seed);
  TinyProblem p;
  const std::size_t O = 5, A = 4, S = 6, L = 2, B = 2, T = 3;
  p.model.agent = {O, n, A, 8};
  p.model.kind = mixer::MixerKind::cmq;
  p.model.mixer = {K, m, 8, 8, n, S};
  p.model.n_labels = L;
  p.params = training::init_model_params(p.model, seed);
  // Default init has zero biases; randomize everything so no unit sits at a kink.
  for (auto& [name, t] : p.params.entries())
    for (double& v : t.data) v = rng.uniform(-0.6, 0.6);

  auto& b = p.batch;
  b.B = B;
  b.T = T;
  b.n = n;
  b.obs_dim = O;
  b.S = S;
  b.A = A;
  b.L = L;
  for (std::size_t i = 0; i < (T + 1) * B * n * O; ++i) b.obs.push_back(rng.uniform(-1, 1));
  for (std::size_t i = 0; i < (T + 1) * B * S; ++i) b.state.push_back(rng.uniform(-1, 1));
  b.avail.assign((T + 1) * B * n * A, 1.0);
  for (std::size_t i = 0; i < T * B * n; ++i) b.actions.push_back(rng.below(A));
  for (std::size_t i = 0; i < T * B; ++i) {
    b.reward.push_back(rng.uniform(-1, 1));
    b.done.push_back(0.0);
    b.mask.push_back(1.0);
  }
  b.done[(T - 1) * B] = 1.0;
  b.mask[(T - 1) * B + 1] = 0.0;  // one padded step
  b.done[(T - 1) * B + 1] = 1.0;
  for (std::size_t i = 0; i < T * B * L; ++i) b.labels.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
  p.targets = Tensor(Shape{T * B});
  for (double& y : p.targets.data) y = rng.uniform(-2, 2);
  std::vector<double> sup(T * B * L);
  for (std::size_t i = 0; i < sup.size(); ++i) sup[i] = b.labels[i];
  p.override_ = training::draw_interventions(sup, T * B, L, K, 0.25, rng);
  return p;
}

inline ad::GradCheckResult check_tiny_problem(const TinyProblem& p, double eps = 1e-5) {
  return ad::grad_check(
      [&](ad::Tape& tape, const Bound& b) {
        return training::build_loss(tape, b, p.model, p.batch, p.targets, p.override_, p.concept_weight).total;
      },
      p.params, eps);
}

// ---------------------------------------------------------------------------
// Training runs

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<training::MetricsRow> metrics;
  ParamSet params;
  double final_return = 0.0;
  double best_return = 0.0;
  double auc = 0.0;
  std::size_t first_step_reaching = 0;  // 0 if never; see reach_threshold
};

inline RunResult summarize(std::uint64_t seed, const std::vector<training::MetricsRow>& rows, ParamSet params,
                           double reach_threshold) {
  RunResult r;
  r.seed = seed;
  r.metrics = rows;
  r.params = std::move(params);
  r.auc = training::curve_auc(rows);
  if (!rows.empty()) r.final_return = rows.back().mean_test_return;
  for (const auto& m : rows) {
    r.best_return = std::max(r.best_return, m.mean_test_return);
    if (r.first_step_reaching == 0 && m.mean_test_return >= reach_threshold) r.first_step_reaching = std::max<std::size_t>(1, m.env_steps);
  }
  return r;
}

struct RunOptions {
  fs::path out;               // empty: keep everything in memory
  std::size_t checkpoint_every = 0;  // env steps; 0 = only at the end
  bool resume = false;
  std::ostream* log = nullptr;
  double reach_threshold = 0.8;
};

/// Trains one seed. With an output directory the run writes config.ini,
/// metrics.csv (row by row) and checkpoint.bin under a lock file, and can
/// resume from an existing checkpoint.
inline RunResult run_seed(const RunConfig& cfg, std::uint64_t seed, const RunOptions& opt = {}) {
  std::unique_ptr<runio::RunLock> lock;
  std::unique_ptr<runio::MetricsWriter> metrics;
  std::unique_ptr<training::Trainer> tr;
  const fs::path ckpt = opt.out / "checkpoint.bin";
  if (!opt.out.empty()) {
    lock = std::make_unique<runio::RunLock>(opt.out);
    if (opt.resume && fs::exists(ckpt)) {
      runio::Checkpoint c = runio::load_checkpoint(ckpt);
      if (c.state.seed != seed) throw Error("resume: checkpoint seed " + std::to_string(c.state.seed) + " differs from requested seed " + std::to_string(seed));
      // The budget may be extended on resume; everything else must match.
      RunConfig stored = c.config;
      stored.training.total_steps = cfg.training.total_steps;
      if (!(stored == cfg)) throw Error("resume: config differs from the checkpointed run");
      c.config.training.total_steps = cfg.training.total_steps;
      c.state.learner.cfg.total_steps = cfg.training.total_steps;
      tr = std::make_unique<training::Trainer>(c.config, std::move(c.state));
      // Rewrite the table from the checkpoint so it matches the resumed state.
      runio::write_text(opt.out / "metrics.csv", runio::metrics_csv(tr->state().metrics, tr->model().mixer.concepts));
      metrics = std::make_unique<runio::MetricsWriter>(opt.out / "metrics.csv", tr->model().mixer.concepts, true);
    } else {
      tr = std::make_unique<training::Trainer>(cfg, seed);
      metrics = std::make_unique<runio::MetricsWriter>(opt.out / "metrics.csv", tr->model().mixer.concepts, false);
    }
    runio::save_config(opt.out / "config.ini", tr->config());
  } else {
    tr = std::make_unique<training::Trainer>(cfg, seed);
  }
  std::size_t next_ckpt = opt.checkpoint_every ? (tr->state().env_steps / opt.checkpoint_every + 1) * opt.checkpoint_every : 0;
  tr->run([&](const training::MetricsRow& row) {
    if (metrics) metrics->write(row);
    if (opt.log) {
      *opt.log << "seed " << seed << " step " << row.env_steps << " return " << row.mean_test_return << " eps "
               << row.epsilon;
      if (row.concept_accuracy >= 0) *opt.log << " concept_acc " << row.concept_accuracy;
      *opt.log << std::endl;
    }
    if (!opt.out.empty() && next_ckpt && row.env_steps >= next_ckpt) {
      runio::save_checkpoint(ckpt, runio::make_checkpoint(*tr));
      while (next_ckpt <= row.env_steps) next_ckpt += opt.checkpoint_every;
    }
  });
  if (!opt.out.empty()) runio::save_checkpoint(ckpt, runio::make_checkpoint(*tr));
  return summarize(seed, tr->state().metrics, tr->params(), opt.reach_threshold);
}

// ---------------------------------------------------------------------------
// Held-out concept accuracy

/// `count` LBF states from held-out seeds: each is a reset followed by a
/// uniformly random number of uniformly random joint actions.
inline std::vector<std::pair<Tensor, Tensor>> heldout_states(const env::Environment& proto, std::size_t count,
                                                            std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<Tensor, Tensor>> out;
  auto env = proto.clone();
  while (out.size() < count) {
    env->reset(rng.next());
    const std::size_t steps = rng.below(proto.episode_limit());
    bool done = false;
    for (std::size_t t = 0; t < steps && !done; ++t) {
      std::vector<std::size_t> a(proto.n_agents());
      for (auto& x : a) x = rng.below(proto.n_actions());
      done = env->step(a).done;
    }
    if (done) continue;
    out.emplace_back(env->state(), env->labels());
  }
  return out;
}

/// Fraction of (state, supervised concept) pairs where p > 0.5 agrees with
/// the label.
inline double concept_accuracy(const ParamSet& params, const training::Model& m,
                               const std::vector<std::pair<Tensor, Tensor>>& states) {
  const std::size_t S = m.mixer.state_dim, L = m.supervised();
  if (L == 0 || states.empty()) return -1.0;
  std::vector<double> flat;
  for (const auto& [s, l] : states) flat.insert(flat.end(), s.data.begin(), s.data.end());
  const Tensor prob = training::predict_concepts(params, m.mixer, Tensor(Shape{states.size(), S}, std::move(flat)));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < states.size(); ++i)
    for (std::size_t k = 0; k < L; ++k) hit += (prob.at(i, k) > 0.5) == (states[i].second[k] > 0.5);
  return static_cast<double>(hit) / static_cast<double>(states.size() * L);
}

// ---------------------------------------------------------------------------
// Concept-count sweep

struct SweepPoint {
  std::size_t concepts = 0;
  std::size_t env_steps = 0;
  std::size_t runs = 0;
  double mean = 0.0;
  double lo = 0.0;  // 12.5% quantile
  double hi = 0.0;  // 87.5% quantile
};

/// Linear-interpolated quantile of a non-empty sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] * (1 - frac) + v[i + 1] * frac : v[i];
}

/// Mean and central 75% band across seeds at each evaluation point.
/// Evaluation points are aligned by index (all runs of one K share the
/// same schedule up to episode-boundary jitter); the reported step is the
/// median step across runs.
inline std::vector<SweepPoint> aggregate(std::size_t K, const std::vector<RunResult>& runs) {
  std::vector<SweepPoint> out;
  if (runs.empty()) return out;
  std::size_t len = runs.front().metrics.size();
  for (const auto& r : runs) len = std::min(len, r.metrics.size());
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> vals, steps;
    for (const auto& r : runs) {
      vals.push_back(r.metrics[i].mean_test_return);
      steps.push_back(static_cast<double>(r.metrics[i].env_steps));
    }
    SweepPoint p;
    p.concepts = K;
    p.env_steps = static_cast<std::size_t>(quantile(steps, 0.5));
    p.runs = runs.size();
    for (double v : vals) p.mean += v / static_cast<double>(vals.size());
    p.lo = quantile(vals, 0.125);
    p.hi = quantile(vals, 0.875);
    out.push_back(p);
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
  std::string s = "concepts,env_steps,runs,mean_test_return,band_lo,band_hi\n";
  for (const auto& p : pts)
    s += std::to_string(p.concepts) + "," + std::to_string(p.env_steps) + "," + std::to_string(p.runs) + "," +
         runio::detail::fmt_double(p.mean) + "," + runio::detail::fmt_double(p.lo) + "," +
         runio::detail::fmt_double(p.hi) + "\n";
  return s;
}

struct SweepResult {
  std::map<std::size_t, std::vector<RunResult>> runs;
  std::vector<SweepPoint> points;
};

/// Trains every (K, seed) pair with otherwise identical settings.
inline SweepResult sweep(const RunConfig& base, const std::vector<std::size_t>& Ks,
                         const std::vector<std::uint64_t>& seeds, const fs::path& out, std::ostream* log = nullptr) {
  if (Ks.empty() || seeds.empty()) throw Error("sweep: need at least one concept count and one seed");
  SweepResult res;
  for (std::size_t K : Ks) {
    RunConfig cfg = base;
    cfg.mixer.kind = mixer::MixerKind::cmq;
    cfg.mixer.concepts = K;
    for (std::uint64_t seed : seeds) {
      RunOptions opt;
      opt.log = log;
      if (!out.empty()) opt.out = out / ("K" + std::to_string(K)) / ("seed_" + std::to_string(seed));
      res.runs[K].push_back(run_seed(cfg, seed, opt));
    }
    const auto pts = aggregate(K, res.runs[K]);
    res.points.insert(res.points.end(), pts.begin(), pts.end());
  }
  if (!out.empty()) runio::write_text(out / "sweep.csv", sweep_csv(res.points));
  return res;
}

}  // namespace cmq::experiments
