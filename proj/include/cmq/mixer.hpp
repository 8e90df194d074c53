#pragma once

// Concept-bottleneck mixing network.
//
// For every concept k the global state s yields two embeddings
//   c+_k = relu(W+_k s + b+_k),  c-_k = relu(W-_k s + b-_k)
// scored by one shared sigmoid head into p_k. Hypernetworks produce
// non-negative weights |w+-_k(s)| that turn the chosen-action utilities into
// temporal values Qt+-_k; Qh_k = p_k Qt+_k + (1-p_k) Qt-_k. Credits alpha
// come from dot-product attention between the mixed embedding
// c_k = p_k c+_k + (1-p_k) c-_k and relu(W_key s), normalized over concepts.
//   Q_tot = sum_k alpha_k Qh_k + f(s)
//
// All stage functions work on batches of R states; per-concept tensors are
// laid out [R x K] or, for embeddings, [R*K x m] (row r*K + k).

#include <map>
#include <optional>
#include <vector>

#include "cmq/nets.hpp"

namespace cmq::mixer {

using ad::Var;

enum class MixerKind { cmq, vdn };

inline const char* mixer_name(MixerKind k) { return k == MixerKind::cmq ? "cmq" : "vdn"; }

struct MixerConfig {
  std::size_t concepts = 16;     // K
  std::size_t embed_dim = 64;    // m
  std::size_t attn_dim = 64;     // width of the attention key
  std::size_t bias_hidden = 32;  // hidden units of f(s)
  std::size_t n_agents = 2;
  std::size_t state_dim = 1;

  void validate() const {
    if (concepts < 1) throw Error("mixer config: concepts must be >= 1");
    if (embed_dim < 1) throw Error("mixer config: embed_dim must be >= 1");
    if (attn_dim < 1) throw Error("mixer config: attn_dim must be >= 1");
    if (bias_hidden < 1) throw Error("mixer config: bias_hidden must be >= 1");
    if (n_agents < 1) throw Error("mixer config: n_agents must be >= 1");
    if (state_dim < 1) throw Error("mixer config: state_dim must be >= 1");
  }

  nets::NetSpec bias_net() const {
    return {{state_dim, bias_hidden, 1}, {ad::Activation::relu, ad::Activation::identity}, 0};
  }
};

inline const std::string kPrefix = "mixer.";

inline ParamSet init_mixer_params(const MixerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet ps;
  ps.seed = seed;
  const std::size_t K = cfg.concepts, m = cfg.embed_dim, S = cfg.state_dim, n = cfg.n_agents;
  nets::add_linear(ps, kPrefix + "emb_pos", K * m, S, rng);
  nets::add_linear(ps, kPrefix + "emb_neg", K * m, S, rng);
  nets::add_linear(ps, kPrefix + "score", 1, 2 * m, rng);
  nets::add_linear(ps, kPrefix + "hyper_pos", K * n, S, rng);
  nets::add_linear(ps, kPrefix + "hyper_neg", K * n, S, rng);
  nets::add_linear(ps, kPrefix + "key", cfg.attn_dim, S, rng, false);
  // query.w maps an embedding (m) into key space (attn_dim); stored
  // [attn_dim x m].
  nets::add_linear(ps, kPrefix + "query", cfg.attn_dim, m, rng, false);
  Rng bias_rng(mix_seed(seed, 0xB1A5));
  const auto spec = cfg.bias_net();
  for (std::size_t i = 0; i < spec.layers(); ++i)
    nets::add_linear(ps, kPrefix + "bias.l" + std::to_string(i), spec.sizes[i + 1], spec.sizes[i], bias_rng);
  return ps;
}

/// Forced concept probabilities keyed by concept index. Absent entries are
/// left to the predictor.
using InterventionMask = std::map<std::size_t, double>;

inline void validate_intervention(const InterventionMask& iv, std::size_t K) {
  for (const auto& [k, v] : iv) {
    if (k >= K) throw Error("intervention: concept index " + std::to_string(k) + " out of range (K=" + std::to_string(K) + ")");
    if (!(v >= 0.0 && v <= 1.0))
      throw Error("intervention: value " + std::to_string(v) + " for concept " + std::to_string(k) + " outside [0,1]");
  }
}

/// p'_k = iv_k where present, else p_k.
inline std::vector<double> apply_intervention(std::vector<double> p, const InterventionMask& iv) {
  validate_intervention(iv, p.size());
  for (const auto& [k, v] : iv) p[k] = v;
  return p;
}

/// Per-entry overrides for a batch of probabilities [R x K].
struct ProbOverride {
  std::vector<std::uint8_t> mask;
  Tensor values;

  bool empty() const {
    for (auto m : mask)
      if (m) return false;
    return true;
  }

  static ProbOverride none(std::size_t R, std::size_t K) {
    return {std::vector<std::uint8_t>(R * K, 0), Tensor(Shape{R, K}, 0.0)};
  }
  static ProbOverride from_mask(const InterventionMask& iv, std::size_t R, std::size_t K) {
    validate_intervention(iv, K);
    ProbOverride o = none(R, K);
    for (std::size_t r = 0; r < R; ++r)
      for (const auto& [k, v] : iv) {
        o.mask[r * K + k] = 1;
        o.values[r * K + k] = v;
      }
    return o;
  }
};

namespace detail {

inline Var as_batch(Var x, const char* what, std::size_t cols) {
  const Tensor& v = x.value();
  if (v.cols() != cols || (v.rank() != 1 && v.rank() != 2))
    throw Error(std::string("mixer: ") + what + " dim mismatch, expected " + std::to_string(cols) + " columns, got " +
                shape_str(v.shape));
  return v.rank() == 2 ? x : ad::reshape(x, Shape{1, cols});
}

}  // namespace detail

struct Embeddings {
  Var pos;  // [R*K x m]
  Var neg;  // [R*K x m]
};

inline Embeddings concept_embeddings(const Bound& p, const MixerConfig& cfg, Var s) {
  s = detail::as_batch(s, "state", cfg.state_dim);
  const std::size_t R = s.value().rows(), K = cfg.concepts, m = cfg.embed_dim;
  const Var pos = ad::relu(ad::linear(p[kPrefix + "emb_pos.w"], s, p[kPrefix + "emb_pos.b"]));
  const Var neg = ad::relu(ad::linear(p[kPrefix + "emb_neg.w"], s, p[kPrefix + "emb_neg.b"]));
  return {ad::reshape(pos, Shape{R * K, m}), ad::reshape(neg, Shape{R * K, m})};
}

struct ConceptProbs {
  Var logit;  // [R x K]
  Var prob;   // [R x K]
};

/// p_k = sigmoid(W_s [c+_k ; c-_k] + b_s), one head shared by all concepts.
inline ConceptProbs concept_probs(const Bound& p, const MixerConfig& cfg, const Embeddings& e) {
  const std::size_t RK = e.pos.value().rows(), K = cfg.concepts;
  if (e.pos.value().cols() != cfg.embed_dim || e.neg.value().shape != e.pos.value().shape || RK % K)
    throw Error("concept_probs: embedding shape mismatch, expected [R*" + std::to_string(K) + " x " +
                std::to_string(cfg.embed_dim) + "] got " + shape_str(e.pos.value().shape) + " and " +
                shape_str(e.neg.value().shape));
  // W_s [c+; c-] split into its two halves.
  const Var w = p[kPrefix + "score.w"];
  const std::size_t m = cfg.embed_dim;
  const Var z = ad::add(ad::linear(ad::slice_cols(w, 0, m), e.pos, p[kPrefix + "score.b"]),
                        ad::linear(ad::slice_cols(w, m, m), e.neg));
  const Var logit = ad::reshape(z, Shape{RK / K, K});
  return {logit, ad::sigmoid(logit)};
}

struct TemporalQ {
  Var pos;  // [R x K]
  Var neg;  // [R x K]
};

/// Qt+-_k = |w+-_k(s)| . q_vec with linear hypernetworks w+-_k.
inline TemporalQ temporal_q(const Bound& p, const MixerConfig& cfg, Var s, Var q_vec) {
  s = detail::as_batch(s, "state", cfg.state_dim);
  q_vec = detail::as_batch(q_vec, "utility vector", cfg.n_agents);
  const std::size_t R = s.value().rows(), K = cfg.concepts, n = cfg.n_agents;
  if (q_vec.value().rows() != R)
    throw Error("temporal_q: " + std::to_string(R) + " states but utilities of shape " + shape_str(q_vec.value().shape));
  const Var q_rep = ad::repeat_rows(q_vec, K);
  auto project = [&](const std::string& name) {
    const Var w = ad::abs(ad::linear(p[kPrefix + name + ".w"], s, p[kPrefix + name + ".b"]));
    return ad::reshape(ad::rowdot(ad::reshape(w, Shape{R * K, n}), q_rep), Shape{R, K});
  };
  return {project("hyper_pos"), project("hyper_neg")};
}

/// Qh_k = p_k Qt+_k + (1 - p_k) Qt-_k.
inline Var concept_q(Var prob, const TemporalQ& tq) { return ad::lerp(prob, tq.pos, tq.neg); }

/// c_k = p_k c+_k + (1 - p_k) c-_k, rows laid out like the embeddings.
inline Var mixed_embedding(Var prob, const Embeddings& e) {
  const Var p_flat = ad::reshape(prob, Shape{prob.value().size()});
  return ad::add(ad::row_scale(e.pos, p_flat), ad::row_scale(e.neg, ad::one_minus(p_flat)));
}

/// u = W_q^T relu(W_key s), one row per state.
inline Var attention_query(const Bound& p, Var s) {
  const Var key = ad::relu(ad::linear(p[kPrefix + "key.w"], s));
  return ad::matmul(key, p[kPrefix + "query.w"]);
}

/// alpha = softmax_k( (W_q c_k)^T relu(W_key s) ). Since c_k is a convex
/// combination of c+_k and c-_k, the score is p_k (c+_k . u) + (1 - p_k) (c-_k . u).
inline Var credits(const Bound& p, const MixerConfig& cfg, Var prob, const Embeddings& e, Var s) {
  s = detail::as_batch(s, "state", cfg.state_dim);
  const std::size_t R = s.value().rows(), K = cfg.concepts;
  if (e.pos.value().rows() != R * K || e.pos.value().cols() != cfg.embed_dim)
    throw Error("credits: embedding shape mismatch, expected " + shape_str({R * K, cfg.embed_dim}) + " got " +
                shape_str(e.pos.value().shape));
  const Var u = attention_query(p, s);
  const Var lp = ad::reshape(ad::group_rowdot(e.pos, u), Shape{R, K});
  const Var ln = ad::reshape(ad::group_rowdot(e.neg, u), Shape{R, K});
  return ad::softmax(ad::lerp(prob, lp, ln));
}

/// f(s): state-only bias, one value per row.
inline Var state_bias(const Bound& p, const MixerConfig& cfg, Var s) {
  s = detail::as_batch(s, "state", cfg.state_dim);
  const Var out = nets::mlp_forward(p, cfg.bias_net(), s, kPrefix + "bias.");
  return ad::reshape(out, Shape{s.value().rows()});
}

struct MixOutput {
  Var q_tot;  // [R]
  Embeddings emb;
  ConceptProbs predicted;
  Var prob;   // [R x K] after overrides
  TemporalQ tq;
  Var q_hat;  // [R x K]
  Var c_mix;  // [R*K x m], unset unless requested
  Var alpha;  // [R x K]
  Var bias;   // [R]
};

/// Full pipeline. `ov` replaces predicted probabilities entry-wise; the
/// replaced entries are constants. The mixed embeddings c_k are only
/// materialized when `keep_embedding` is set.
inline MixOutput mix(const Bound& p, const MixerConfig& cfg, Var q_vec, Var s, const ProbOverride* ov = nullptr,
                     bool keep_embedding = true) {
  s = detail::as_batch(s, "state", cfg.state_dim);
  MixOutput o;
  o.emb = concept_embeddings(p, cfg, s);
  o.predicted = concept_probs(p, cfg, o.emb);
  o.prob = o.predicted.prob;
  if (ov) {
    if (ov->mask.size() != o.prob.value().size())
      throw Error("mix: override covers " + std::to_string(ov->mask.size()) + " entries, probabilities have " +
                  shape_str(o.prob.value().shape));
    for (std::size_t i = 0; i < ov->mask.size(); ++i)
      if (ov->mask[i] && !(ov->values[i] >= 0.0 && ov->values[i] <= 1.0))
        throw Error("mix: intervention value " + std::to_string(ov->values[i]) + " outside [0,1]");
    if (!ov->empty()) o.prob = ad::override_entries(o.prob, ov->mask, ov->values);
  }
  if (keep_embedding) o.c_mix = mixed_embedding(o.prob, o.emb);
  o.tq = temporal_q(p, cfg, s, q_vec);
  o.q_hat = concept_q(o.prob, o.tq);
  o.alpha = credits(p, cfg, o.prob, o.emb, s);
  o.bias = state_bias(p, cfg, s);
  o.q_tot = ad::add(ad::rowdot(o.alpha, o.q_hat), o.bias);
  return o;
}

/// Convenience overload taking a per-concept mask applied to every row.
inline MixOutput mix(const Bound& p, const MixerConfig& cfg, Var q_vec, Var s, const InterventionMask& iv) {
  const std::size_t R = s.value().rank() == 2 ? s.value().rows() : 1;
  const ProbOverride ov = ProbOverride::from_mask(iv, R, cfg.concepts);
  return mix(p, cfg, q_vec, s, &ov);
}

/// Q_tot = sum_i q_i.
inline Var vdn_mix(Var q_vec) {
  const Tensor& v = q_vec.value();
  if (v.size() == 0 || v.cols() == 0) throw Error("vdn_mix: needs at least one agent");
  return ad::rowsum(v.rank() == 2 ? q_vec : ad::reshape(q_vec, Shape{1, v.size()}));
}

/// Plain-number snapshot of one state's concept pipeline.
struct ConceptState {
  std::size_t K = 0, m = 0;
  std::vector<double> p_pred;  // predicted probabilities
  std::vector<double> p;       // after interventions
  std::vector<double> q_pos, q_neg, q_hat, alpha;
  std::vector<double> c_pos, c_neg, c_mix;  // K x m, row-major
  double bias = 0.0;
  double q_tot = 0.0;
};

inline ConceptState concept_state(const MixOutput& o, std::size_t row, const MixerConfig& cfg) {
  const std::size_t K = cfg.concepts, m = cfg.embed_dim;
  auto take = [&](Var v, std::size_t width) {
    const Tensor& t = v.value();
    return std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(row * width),
                               t.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * width));
  };
  ConceptState c;
  c.K = K;
  c.m = m;
  c.p_pred = take(o.predicted.prob, K);
  c.p = take(o.prob, K);
  c.q_pos = take(o.tq.pos, K);
  c.q_neg = take(o.tq.neg, K);
  c.q_hat = take(o.q_hat, K);
  c.alpha = take(o.alpha, K);
  c.c_pos = take(o.emb.pos, K * m);
  c.c_neg = take(o.emb.neg, K * m);
  if (o.c_mix.valid()) c.c_mix = take(o.c_mix, K * m);
  c.bias = o.bias.value()[row];
  c.q_tot = o.q_tot.value()[row];
  return c;
}

/// Evaluates the mixer on one state without recording gradients.
inline ConceptState evaluate(const ParamSet& params, const MixerConfig& cfg, const std::vector<double>& q_vec,
                             const std::vector<double>& state, const InterventionMask& iv = {}) {
  ad::Tape tape;
  const Bound b = bind(tape, params, false);
  const Var q = tape.constant(Tensor(Shape{1, q_vec.size()}, q_vec));
  const Var s = tape.constant(Tensor(Shape{1, state.size()}, state));
  return concept_state(mix(b, cfg, q, s, iv), 0, cfg);
}

}  // namespace cmq::mixer
