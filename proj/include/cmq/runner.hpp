#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cmq/training.hpp"

namespace cmq::training {

// ---------------------------------------------------------------------------
// Lockstep rollouts

struct RolloutOptions {
  double epsilon = 0.0;  // 0 means greedy
  Rng* rng = nullptr;    // required when epsilon > 0
};

/// Plays one episode per seed, all environments stepped together so the
/// agent network runs once per timestep on every live agent row.
inline std::vector<Episode> rollout(const env::Environment& proto, const ParamSet& params, const Model& m,
                                    const std::vector<std::uint64_t>& seeds, const RolloutOptions& opt) {
  if (opt.epsilon > 0.0 && !opt.rng) throw Error("rollout: exploration needs a random generator");
  const std::size_t B = seeds.size(), n = proto.n_agents(), O = proto.obs_dim(), A = proto.n_actions();
  const std::size_t S = proto.state_dim(), L = proto.n_labels();
  std::vector<std::unique_ptr<env::Environment>> envs;
  std::vector<Episode> eps(B);
  auto record_obs = [&](std::size_t b) {
    const Tensor o = envs[b]->observations(), s = envs[b]->state(), a = envs[b]->avail_actions();
    eps[b].obs.insert(eps[b].obs.end(), o.data.begin(), o.data.end());
    eps[b].state.insert(eps[b].state.end(), s.data.begin(), s.data.end());
    eps[b].avail.insert(eps[b].avail.end(), a.data.begin(), a.data.end());
  };
  for (std::size_t b = 0; b < B; ++b) {
    envs.push_back(proto.clone());
    envs[b]->reset(seeds[b]);
    Episode& e = eps[b];
    e.n_agents = n;
    e.obs_dim = O;
    e.state_dim = S;
    e.n_actions = A;
    e.n_labels = L;
    e.env_seed = seeds[b];
    record_obs(b);
  }

  const std::size_t R = B * n;
  Tensor h(Shape{R, m.agent.hidden}, 0.0);
  std::vector<std::size_t> last(R, agents::kNoAction);
  std::vector<bool> live(B, true);
  std::size_t n_live = B;
  while (n_live > 0) {
    Tensor obs(Shape{R, O}, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      if (live[b]) {
        const std::size_t off = eps[b].length * n * O;
        std::copy_n(eps[b].obs.begin() + static_cast<std::ptrdiff_t>(off), n * O,
                    obs.data.begin() + static_cast<std::ptrdiff_t>(b * n * O));
      }
    ad::Tape tape;
    const Bound p = bind(tape, params, false);
    const auto out = agents::agent_q(p, m.agent, tape.constant(agents::build_inputs(m.agent, obs, last)),
                                     tape.constant_view(h));
    const Tensor& q = out.q.value();
    Tensor h_next = out.h.value();
    for (std::size_t b = 0; b < B; ++b) {
      if (!live[b]) continue;
      Episode& e = eps[b];
      const Tensor labels = envs[b]->labels();
      e.labels.insert(e.labels.end(), labels.data.begin(), labels.data.end());
      std::vector<std::size_t> acts(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = b * n + i;
        std::span<const double> avail(e.avail.data() + (e.length * n + i) * A, A);
        acts[i] = opt.epsilon > 0.0 ? agents::select_action(q.row(r), opt.epsilon, *opt.rng, avail)
                                    : agents::greedy_action(q.row(r), avail);
        last[r] = acts[i];
      }
      const env::StepOutcome so = envs[b]->step(acts);
      e.actions.insert(e.actions.end(), acts.begin(), acts.end());
      e.reward.push_back(so.reward);
      e.done.push_back(so.done ? 1 : 0);
      ++e.length;
      record_obs(b);
      if (so.done) {
        live[b] = false;
        --n_live;
      }
    }
    h = std::move(h_next);
  }
  return eps;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double mean_return = 0.0;
  double std_return = 0.0;
  std::vector<double> concept_mean;  // mean predicted probability per concept
  double concept_accuracy = -1.0;    // -1 when nothing is supervised
  std::size_t states = 0;
};

/// Predicted concept probabilities [rows x K] for a batch of states.
inline Tensor predict_concepts(const ParamSet& params, const mixer::MixerConfig& cfg, const Tensor& states) {
  ad::Tape tape;
  const Bound p = bind(tape, params, false);
  const auto emb = mixer::concept_embeddings(p, cfg, tape.constant_view(states));
  return mixer::concept_probs(p, cfg, emb).prob.value();
}

/// Concept statistics over the non-terminal states of `eps`. Accuracy
/// thresholds predicted probabilities at 0.5 against binary labels.
inline void concept_stats(const ParamSet& params, const Model& m, const std::vector<Episode>& eps, EvalResult& r) {
  if (m.kind != mixer::MixerKind::cmq || eps.empty()) return;
  const std::size_t S = eps.front().state_dim, K = m.mixer.concepts, L = m.supervised();
  std::vector<double> states, labels;
  for (const Episode& e : eps) {
    states.insert(states.end(), e.state.begin(), e.state.begin() + static_cast<std::ptrdiff_t>(e.length * S));
    labels.insert(labels.end(), e.labels.begin(), e.labels.end());
  }
  const std::size_t rows = states.size() / S;
  const Tensor prob = predict_concepts(params, m.mixer, Tensor(Shape{rows, S}, std::move(states)));
  r.states = rows;
  r.concept_mean.assign(K, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < K; ++k) r.concept_mean[k] += prob.at(i, k) / static_cast<double>(rows);
  if (L == 0) return;
  const std::size_t NL = eps.front().n_labels;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < L; ++k) hit += ((prob.at(i, k) > 0.5) == (labels[i * NL + k] > 0.5)) ? 1 : 0;
  r.concept_accuracy = static_cast<double>(hit) / static_cast<double>(rows * L);
}

inline std::vector<std::uint64_t> eval_seeds(std::uint64_t run_seed, std::size_t count) {
  std::vector<std::uint64_t> s(count);
  for (std::size_t i = 0; i < count; ++i) s[i] = mix_seed(mix_seed(run_seed, 0xE7A1), i);
  return s;
}

inline EvalResult evaluate(const env::Environment& proto, const ParamSet& params, const Model& m,
                           const std::vector<std::uint64_t>& seeds) {
  const auto eps = rollout(proto, params, m, seeds, {});
  EvalResult r;
  for (const Episode& e : eps) r.mean_return += e.episode_return() / static_cast<double>(eps.size());
  for (const Episode& e : eps) {
    const double d = e.episode_return() - r.mean_return;
    r.std_return += d * d / static_cast<double>(eps.size());
  }
  r.std_return = std::sqrt(r.std_return);
  concept_stats(params, m, eps, r);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t env_steps = 0;
  std::size_t episodes = 0;
  std::size_t updates = 0;
  double mean_test_return = 0.0;
  double std_test_return = 0.0;
  double loss = 0.0;
  double td_loss = 0.0;
  double concept_loss = 0.0;
  double epsilon = 0.0;
  double concept_accuracy = -1.0;
  std::vector<double> concept_mean;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

/// Area under the test-return curve, normalized by the step span, so a run
/// that scores r throughout has AUC r.
inline double curve_auc(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) return 0.0;
  if (rows.size() == 1) return rows.front().mean_test_return;
  double area = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    area += 0.5 * (rows[i].mean_test_return + rows[i - 1].mean_test_return) *
            static_cast<double>(rows[i].env_steps - rows[i - 1].env_steps);
  const double span = static_cast<double>(rows.back().env_steps - rows.front().env_steps);
  return span > 0 ? area / span : rows.back().mean_test_return;
}

/// Everything needed to continue a run exactly where it stopped.
struct TrainerState {
  std::uint64_t seed = 0;
  Learner learner;
  ReplayBuffer buffer;
  Rng rng;
  std::size_t env_steps = 0;
  std::size_t episodes = 0;
  std::size_t next_eval = 0;
  TrainStats last;
  std::vector<MetricsRow> metrics;
};

class Trainer {
 public:
  using Callback = std::function<void(const MetricsRow&)>;

  Trainer(RunConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), env_(cfg_.env.make()) {
    Model m = make_model(cfg_, *env_);
    m.mixer.validate();
    st_.seed = seed;
    st_.learner = Learner(std::move(m), cfg_.training, seed);
    st_.buffer = ReplayBuffer(cfg_.training.buffer_size);
    st_.rng = Rng(mix_seed(seed, 3));
    if (cfg_.training.batch_size == 0) throw Error("training.batch_size must be positive");
    if (cfg_.training.eval_interval == 0) throw Error("training.eval_interval must be positive");
    if (cfg_.training.batch_size > cfg_.training.buffer_size)
      throw Error("training.batch_size exceeds training.buffer_size");
  }

  Trainer(RunConfig cfg, TrainerState st) : cfg_(std::move(cfg)), env_(cfg_.env.make()), st_(std::move(st)) {}

  const RunConfig& config() const { return cfg_; }
  const TrainerState& state() const { return st_; }
  const Model& model() const { return st_.learner.model; }
  const ParamSet& params() const { return st_.learner.params; }
  const env::Environment& environment() const { return *env_; }
  bool finished() const { return st_.env_steps >= cfg_.training.total_steps && st_.next_eval > st_.env_steps; }

  double epsilon() const {
    const auto& t = cfg_.training;
    return agents::EpsilonSchedule{t.eps_start, t.eps_end, t.eps_decay_steps}.value(static_cast<double>(st_.env_steps));
  }

  /// One episode of interaction followed by at most one update. Evaluations
  /// fall due on multiples of the evaluation interval (including step 0).
  void iterate(const Callback& on_eval = {}) {
    if (st_.env_steps == 0 && st_.next_eval == 0) run_eval(on_eval);
    const auto& t = cfg_.training;
    RolloutOptions opt{epsilon(), &st_.rng};
    auto eps = rollout(*env_, st_.learner.params, st_.learner.model, {mix_seed(st_.seed, 0x7000000 + st_.episodes)}, opt);
    st_.env_steps += eps.front().length;
    ++st_.episodes;
    st_.buffer.push(std::move(eps.front()));
    if (st_.buffer.size() >= std::max(t.warmup_episodes, t.batch_size)) {
      const EpisodeBatch b = make_batch(st_.buffer.sample(st_.rng, t.batch_size));
      st_.last = train_step(st_.learner, b, st_.rng);
    }
    if (t.target_interval > 0 && st_.episodes % t.target_interval == 0) st_.learner.sync_target();
    if (st_.env_steps >= st_.next_eval || st_.env_steps >= t.total_steps) run_eval(on_eval);
  }

  void run(const Callback& on_eval = {}, const std::function<bool()>& keep_going = {}) {
    while (!finished()) {
      if (keep_going && !keep_going()) return;
      iterate(on_eval);
    }
  }

 private:
  void run_eval(const Callback& on_eval) {
    const auto& t = cfg_.training;
    const EvalResult r = evaluate(*env_, st_.learner.params, st_.learner.model, eval_seeds(st_.seed, t.eval_episodes));
    MetricsRow row;
    row.env_steps = st_.env_steps;
    row.episodes = st_.episodes;
    row.updates = st_.learner.optim.steps;
    row.mean_test_return = r.mean_return;
    row.std_test_return = r.std_return;
    row.loss = st_.last.loss;
    row.td_loss = st_.last.td_loss;
    row.concept_loss = st_.last.concept_loss;
    row.epsilon = epsilon();
    row.concept_accuracy = r.concept_accuracy;
    row.concept_mean = r.concept_mean;
    st_.metrics.push_back(row);
    while (st_.next_eval <= st_.env_steps) st_.next_eval += t.eval_interval;
    if (on_eval) on_eval(row);
  }

  RunConfig cfg_;
  std::unique_ptr<env::Environment> env_;
  TrainerState st_;
};

}  // namespace cmq::training
