#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "cmq/agents.hpp"
#include "cmq/config.hpp"
#include "cmq/mixer.hpp"

namespace cmq::training {

using ad::Var;

// ---------------------------------------------------------------------------
// Episodes and replay

/// One recorded episode of length T. obs/state/avail hold T+1 entries (the
/// last one is the state reached after the final step); labels describe
/// s_0..s_{T-1}.
struct Episode {
  std::size_t length = 0;
  std::size_t n_agents = 0, obs_dim = 0, state_dim = 0, n_actions = 0, n_labels = 0;
  std::uint64_t env_seed = 0;
  std::vector<double> obs;     // (T+1) x n x obs_dim
  std::vector<double> state;   // (T+1) x state_dim
  std::vector<double> avail;   // (T+1) x n x n_actions
  std::vector<double> labels;  // T x n_labels
  std::vector<std::size_t> actions;  // T x n
  std::vector<double> reward;  // T
  std::vector<std::uint8_t> done;  // T

  double episode_return() const { return std::accumulate(reward.begin(), reward.end(), 0.0); }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("episode: " + m); };
    const std::size_t T = length;
    if (T == 0) fail("empty episode");
    if (obs.size() != (T + 1) * n_agents * obs_dim) fail("observation block has wrong size");
    if (state.size() != (T + 1) * state_dim) fail("state block has wrong size");
    if (avail.size() != (T + 1) * n_agents * n_actions) fail("availability block has wrong size");
    if (labels.size() != T * n_labels) fail("label block has wrong size");
    if (actions.size() != T * n_agents) fail("action block has wrong size");
    if (reward.size() != T || done.size() != T) fail("reward/done blocks have wrong size");
    for (double r : reward)
      if (!std::isfinite(r)) fail("non-finite reward");
    for (std::size_t a : actions)
      if (a >= n_actions) fail("action id out of range");
    for (std::size_t t = 0; t + 1 < T; ++t)
      if (done[t]) fail("done flag before the last step");
  }

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// FIFO ring of whole episodes.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 5000) : capacity_(capacity) {
    if (capacity == 0) throw Error("replay buffer: capacity must be positive");
  }

  void push(Episode ep) {
    ep.validate();
    if (!episodes_.empty()) {
      const Episode& f = episodes_.front();
      if (f.n_agents != ep.n_agents || f.obs_dim != ep.obs_dim || f.state_dim != ep.state_dim ||
          f.n_actions != ep.n_actions || f.n_labels != ep.n_labels)
        throw Error("replay buffer: episode dimensions differ from stored episodes");
    }
    if (episodes_.size() == capacity_) episodes_.pop_front();
    episodes_.push_back(std::move(ep));
  }

  /// B distinct episodes, uniformly without replacement.
  std::vector<const Episode*> sample(Rng& rng, std::size_t B) const {
    if (B == 0 || B > episodes_.size())
      throw Error("replay buffer: cannot sample " + std::to_string(B) + " episodes from " +
                  std::to_string(episodes_.size()));
    std::vector<std::size_t> idx(episodes_.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<const Episode*> out;
    out.reserve(B);
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
      out.push_back(&episodes_[idx[i]]);
    }
    return out;
  }

  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<Episode>& episodes() const { return episodes_; }

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
};

/// B episodes padded to the longest one. Row order inside a timestep is
/// (episode, agent); padded steps have mask 0.
struct EpisodeBatch {
  std::size_t B = 0, T = 0, n = 0, obs_dim = 0, S = 0, A = 0, L = 0;
  std::vector<double> obs;       // (T+1) x B x n x obs_dim
  std::vector<double> state;     // (T+1) x B x S
  std::vector<double> avail;     // (T+1) x B x n x A
  std::vector<std::size_t> actions;  // T x B x n
  std::vector<double> reward;    // T x B
  std::vector<double> done;      // T x B
  std::vector<double> mask;      // T x B
  std::vector<double> labels;    // T x B x L

  double valid_steps() const { return std::accumulate(mask.begin(), mask.end(), 0.0); }
};

inline EpisodeBatch make_batch(const std::vector<const Episode*>& eps) {
  if (eps.empty()) throw Error("make_batch: no episodes");
  const Episode& f = *eps.front();
  EpisodeBatch b;
  b.B = eps.size();
  b.n = f.n_agents;
  b.obs_dim = f.obs_dim;
  b.S = f.state_dim;
  b.A = f.n_actions;
  b.L = f.n_labels;
  for (const Episode* e : eps) b.T = std::max(b.T, e->length);
  const std::size_t B = b.B, T = b.T, n = b.n, O = b.obs_dim, S = b.S, A = b.A, L = b.L;
  b.obs.assign((T + 1) * B * n * O, 0.0);
  b.state.assign((T + 1) * B * S, 0.0);
  b.avail.assign((T + 1) * B * n * A, 1.0);
  b.actions.assign(T * B * n, 0);
  b.reward.assign(T * B, 0.0);
  b.done.assign(T * B, 1.0);
  b.mask.assign(T * B, 0.0);
  b.labels.assign(T * B * L, 0.0);
  for (std::size_t e = 0; e < B; ++e) {
    const Episode& ep = *eps[e];
    if (ep.n_agents != n || ep.obs_dim != O || ep.state_dim != S || ep.n_actions != A || ep.n_labels != L)
      throw Error("make_batch: episode " + std::to_string(e) + " has mismatched dimensions");
    for (std::size_t t = 0; t <= ep.length; ++t) {
      std::copy_n(ep.obs.begin() + static_cast<std::ptrdiff_t>(t * n * O), n * O,
                  b.obs.begin() + static_cast<std::ptrdiff_t>((t * B + e) * n * O));
      std::copy_n(ep.state.begin() + static_cast<std::ptrdiff_t>(t * S), S,
                  b.state.begin() + static_cast<std::ptrdiff_t>((t * B + e) * S));
      std::copy_n(ep.avail.begin() + static_cast<std::ptrdiff_t>(t * n * A), n * A,
                  b.avail.begin() + static_cast<std::ptrdiff_t>((t * B + e) * n * A));
    }
    for (std::size_t t = 0; t < ep.length; ++t) {
      for (std::size_t i = 0; i < n; ++i) b.actions[(t * B + e) * n + i] = ep.actions[t * n + i];
      b.reward[t * B + e] = ep.reward[t];
      b.done[t * B + e] = ep.done[t] ? 1.0 : 0.0;
      b.mask[t * B + e] = 1.0;
      std::copy_n(ep.labels.begin() + static_cast<std::ptrdiff_t>(t * L), L,
                  b.labels.begin() + static_cast<std::ptrdiff_t>((t * B + e) * L));
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Model: shared agent network plus mixer

struct Model {
  agents::AgentSpec agent;
  mixer::MixerKind kind = mixer::MixerKind::cmq;
  mixer::MixerConfig mixer;
  std::size_t n_labels = 0;  // supervised concepts (the first n_labels of K)

  std::size_t supervised() const { return kind == mixer::MixerKind::cmq ? std::min(n_labels, mixer.concepts) : 0; }
};

inline Model make_model(const RunConfig& cfg, const env::Environment& e) {
  Model m;
  m.agent = {e.obs_dim(), e.n_agents(), e.n_actions(), cfg.agent.hidden};
  m.kind = cfg.mixer.kind;
  m.mixer = cfg.mixer_config(e.n_agents(), e.state_dim());
  m.n_labels = e.n_labels();
  return m;
}

inline ParamSet init_model_params(const Model& m, std::uint64_t seed) {
  ParamSet ps = agents::init_agent_params(m.agent, mix_seed(seed, 1));
  if (m.kind == mixer::MixerKind::cmq) ps.merge(mixer::init_mixer_params(m.mixer, mix_seed(seed, 2)));
  ps.seed = seed;
  return ps;
}

/// Q_tot for a batch of states with either mixer.
inline Var mix_q(const Bound& p, const Model& m, Var q_vec, Var s, const mixer::ProbOverride* ov,
                 mixer::MixOutput* detail_out = nullptr) {
  if (m.kind == mixer::MixerKind::vdn) return mixer::vdn_mix(q_vec);
  mixer::MixOutput o = mixer::mix(p, m.mixer, q_vec, s, ov, false);
  if (detail_out) *detail_out = o;
  return o.q_tot;
}

/// Per-timestep agent utilities [B*n x A] for t = 0..steps-1.
inline std::vector<Var> unroll_agents(ad::Tape& tape, const Bound& p, const Model& m, const EpisodeBatch& b,
                                      std::size_t steps) {
  const std::size_t R = b.B * b.n;
  Var h = tape.constant(Tensor(Shape{R, m.agent.hidden}, 0.0));
  std::vector<std::size_t> last(R, agents::kNoAction);
  std::vector<Var> qs;
  qs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor obs(Shape{R, b.obs_dim},
               std::vector<double>(b.obs.begin() + static_cast<std::ptrdiff_t>(t * R * b.obs_dim),
                                   b.obs.begin() + static_cast<std::ptrdiff_t>((t + 1) * R * b.obs_dim)));
    const Var x = tape.constant(agents::build_inputs(m.agent, obs, last));
    auto out = agents::agent_q(p, m.agent, x, h);
    qs.push_back(out.q);
    h = out.h;
    if (t < b.T)
      for (std::size_t r = 0; r < R; ++r) last[r] = b.actions[t * R + r];
  }
  return qs;
}

/// y_t = r_t + gamma (1 - done_t) Q_tot(s_{t+1}, greedy utilities; target).
/// The joint max is taken per agent, which is exact for monotone mixers.
inline Tensor td_targets(const ParamSet& target, const Model& m, const EpisodeBatch& b, double gamma) {
  ad::Tape tape;
  const Bound p = bind(tape, target, false);
  const auto qs = unroll_agents(tape, p, m, b, b.T + 1);
  const std::size_t R = b.B * b.n;
  Tensor greedy(Shape{b.T * b.B, b.n});
  for (std::size_t t = 0; t < b.T; ++t) {
    const Tensor& q = qs[t + 1].value();
    for (std::size_t r = 0; r < R; ++r) {
      std::span<const double> avail(b.avail.data() + ((t + 1) * R + r) * b.A, b.A);
      greedy[t * R + r] = q.at(r, agents::greedy_action(q.row(r), avail));
    }
  }
  Tensor next_states(Shape{b.T * b.B, b.S},
                     std::vector<double>(b.state.begin() + static_cast<std::ptrdiff_t>(b.B * b.S), b.state.end()));
  const Var q_tot = mix_q(p, m, tape.constant(std::move(greedy)), tape.constant(std::move(next_states)), nullptr);
  Tensor y(Shape{b.T * b.B});
  // Terminal rows skip the bootstrap term outright so nothing from the
  // (meaningless) successor state can leak in, not even a NaN.
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = b.done[i] != 0.0 ? b.reward[i] : b.reward[i] + gamma * q_tot.value()[i];
  return y;
}

// ---------------------------------------------------------------------------
// Concept interventions during training

/// Independently for each row and each supervised concept k < L, with
/// probability pt the predicted probability is replaced by the label.
inline mixer::ProbOverride draw_interventions(const std::vector<double>& labels, std::size_t rows, std::size_t L,
                                              std::size_t K, double pt, Rng& rng) {
  if (!(pt >= 0.0 && pt <= 1.0)) throw Error("intervention probability must lie in [0,1]");
  if (L > K) throw Error("more supervised concepts than concepts");
  if (labels.size() != rows * L) throw Error("label block has wrong size");
  auto ov = mixer::ProbOverride::none(rows, K);
  if (pt == 0.0) return ov;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < L; ++k)
      if (rng.bernoulli(pt)) {
        ov.mask[r * K + k] = 1;
        ov.values[r * K + k] = labels[r * L + k];
      }
  return ov;
}

/// Effective probabilities for one state: supervised entries (the first
/// labels.size()) are replaced by their label with probability pt.
inline std::vector<double> intervention_mix(const std::vector<double>& p, const std::vector<double>& labels, double pt,
                                            Rng& rng) {
  const auto ov = draw_interventions(labels, 1, labels.size(), p.size(), pt, rng);
  std::vector<double> out = p;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (ov.mask[k]) out[k] = ov.values[k];
  return out;
}

// ---------------------------------------------------------------------------
// Loss

struct LossParts {
  Var total;
  Var td;
  Var concept_term;  // invalid when no concept is supervised
  Var q_tot;    // [T*B]
};

/// Masked mean squared TD error plus weight * masked mean BCE of the
/// predicted probabilities on supervised concepts. `ov` holds the training
/// interventions (rows ordered (t, b)).
inline LossParts build_loss(ad::Tape& tape, const Bound& p, const Model& m, const EpisodeBatch& b, const Tensor& y,
                            const mixer::ProbOverride& ov, double concept_weight) {
  const std::size_t rows = b.T * b.B;
  if (y.size() != rows) throw Error("build_loss: need " + std::to_string(rows) + " targets, got " + std::to_string(y.size()));
  const auto qs = unroll_agents(tape, p, m, b, b.T);
  std::vector<Var> chosen;
  chosen.reserve(b.T);
  const std::size_t R = b.B * b.n;
  for (std::size_t t = 0; t < b.T; ++t) {
    std::vector<std::size_t> act(b.actions.begin() + static_cast<std::ptrdiff_t>(t * R),
                                 b.actions.begin() + static_cast<std::ptrdiff_t>((t + 1) * R));
    chosen.push_back(ad::reshape(ad::gather_cols(qs[t], act), Shape{b.B, b.n}));
  }
  const Var q_vec = ad::concat_rows(chosen);
  const Var s = tape.constant(Tensor(Shape{rows, b.S}, std::vector<double>(b.state.begin(),
                                                                           b.state.begin() + static_cast<std::ptrdiff_t>(rows * b.S))));
  mixer::MixOutput detail;
  const Var q_tot = mix_q(p, m, q_vec, s, &ov, &detail);

  const double valid = b.valid_steps();
  if (valid <= 0) throw Error("build_loss: batch has no valid steps");
  Tensor w(Shape{rows});
  for (std::size_t i = 0; i < rows; ++i) w[i] = b.mask[i] / valid;
  const Var err = ad::sub(q_tot, tape.constant(y));
  LossParts out;
  out.q_tot = q_tot;
  out.td = ad::weighted_sum(ad::mul(err, err), w);
  out.total = out.td;
  const std::size_t L = m.supervised();
  if (L > 0 && concept_weight != 0.0) {
    const std::size_t K = m.mixer.concepts;
    const Var logits = L == K ? detail.predicted.logit : ad::slice_cols(detail.predicted.logit, 0, L);
    Tensor target(Shape{rows, L});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < L; ++k) target[i * L + k] = b.labels[i * b.L + k];
    Tensor wc(Shape{rows, L});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < L; ++k) wc[i * L + k] = b.mask[i] / (valid * static_cast<double>(L));
    out.concept_term = ad::weighted_sum(ad::bce_with_logits(logits, target), wc);
    out.total = ad::add(out.td, ad::scale(out.concept_term, concept_weight));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimState {
  ParamSet sq_avg;  // running mean of squared gradients
  double lr = 0.0005;
  double alpha = 0.99;
  double eps = 1e-5;
  double clip = 10.0;
  std::size_t steps = 0;
};

inline OptimState make_optim(const ParamSet& params, const TrainSection& cfg) {
  return {params.zeros_like(), cfg.lr, cfg.rms_alpha, cfg.rms_eps, cfg.grad_clip, 0};
}

inline double global_norm(const ParamSet& g) {
  double s = 0.0;
  for (const auto& [_, t] : g.entries())
    for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

/// Rescales gradients to norm `max_norm` if they exceed it; returns the norm
/// before clipping.
inline double clip_grad_norm(ParamSet& g, double max_norm) {
  const double norm = global_norm(g);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (auto& [_, t] : g.entries())
      for (double& v : t.data) v *= k;
  }
  return norm;
}

/// acc <- a acc + (1-a) g^2;  theta <- theta - lr g / (sqrt(acc) + eps).
inline void rmsprop_update(ParamSet& params, const ParamSet& grads, OptimState& st) {
  if (params.size() != grads.size() || params.size() != st.sq_avg.size())
    throw Error("rmsprop: parameter/gradient/state layouts differ");
  for (std::size_t e = 0; e < params.size(); ++e) {
    Tensor& th = params.entries()[e].second;
    const Tensor& g = grads.entries()[e].second;
    Tensor& acc = st.sq_avg.entries()[e].second;
    if (th.shape != g.shape || th.shape != acc.shape)
      throw Error("rmsprop: shape mismatch for '" + params.entries()[e].first + "'");
    for (std::size_t i = 0; i < th.size(); ++i) {
      acc[i] = st.alpha * acc[i] + (1.0 - st.alpha) * g[i] * g[i];
      th[i] -= st.lr * g[i] / (std::sqrt(acc[i]) + st.eps);
    }
  }
  ++st.steps;
}

// ---------------------------------------------------------------------------
// Learner

struct Learner {
  Model model;
  TrainSection cfg;
  ParamSet params;
  ParamSet target;
  OptimState optim;

  Learner() = default;
  Learner(Model m, TrainSection c, std::uint64_t seed)
      : model(std::move(m)), cfg(std::move(c)), params(init_model_params(model, seed)), target(params),
        optim(make_optim(params, cfg)) {}

  void sync_target() { target = params; }
};

struct TrainStats {
  double loss = 0.0;
  double td_loss = 0.0;
  double concept_loss = 0.0;
  double grad_norm = 0.0;
};

inline TrainStats train_step(Learner& L, const EpisodeBatch& b, Rng& rng) {
  const Tensor y = td_targets(L.target, L.model, b, L.cfg.gamma);
  const std::size_t rows = b.T * b.B;
  const std::size_t sup = L.model.supervised();
  std::vector<double> labels(rows * sup);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < sup; ++k) labels[i * sup + k] = b.labels[i * b.L + k];
  const auto ov = L.model.kind == mixer::MixerKind::cmq
                      ? draw_interventions(labels, rows, sup, L.model.mixer.concepts, L.cfg.intervention_prob, rng)
                      : mixer::ProbOverride::none(rows, 1);

  ad::Tape tape;
  const Bound p = bind(tape, L.params, true);
  const LossParts loss = build_loss(tape, p, L.model, b, y, ov, L.cfg.concept_loss_weight);
  TrainStats st;
  st.loss = loss.total.value().item();
  st.td_loss = loss.td.value().item();
  st.concept_loss = loss.concept_term.valid() ? loss.concept_term.value().item() : 0.0;
  if (!std::isfinite(st.loss)) {
    std::ostringstream os;
    os << "train_step: non-finite loss (td=" << st.td_loss << ", concept=" << st.concept_loss << ")";
    for (std::size_t i = 0; i < rows; ++i)
      if (b.mask[i] > 0 && (!std::isfinite(loss.q_tot.value()[i]) || !std::isfinite(y[i]))) {
        os << "; first offending batch index " << i % b.B << " at t=" << i / b.B << " (Q_tot=" << loss.q_tot.value()[i]
           << ", target=" << y[i] << ")";
        break;
      }
    throw Error(os.str());
  }
  tape.backward(loss.total);
  ParamSet grads = collect_grads(tape, p, L.params);
  st.grad_norm = clip_grad_norm(grads, L.optim.clip);
  rmsprop_update(L.params, grads, L.optim);
  return st;
}

}  // namespace cmq::training
