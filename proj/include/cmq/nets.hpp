#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cmq/ops.hpp"
#include "cmq/params.hpp"

namespace cmq::nets {

using ad::Activation;
using ad::Var;

/// Feed-forward stack, optionally with a gated recurrent cell inserted after
/// the first layer (the usual recurrent Q-network layout). With a recurrent
/// cell, `recurrent_hidden` must equal sizes[1].
struct NetSpec {
  std::vector<std::size_t> sizes;
  std::vector<Activation> activations;
  std::size_t recurrent_hidden = 0;

  std::size_t layers() const { return sizes.empty() ? 0 : sizes.size() - 1; }

  void validate() const {
    if (sizes.size() < 2) throw Error("netspec: need at least an input and an output size");
    if (activations.size() != layers())
      throw Error("netspec: " + std::to_string(layers()) + " layers but " + std::to_string(activations.size()) +
                  " activations");
    for (std::size_t i = 0; i < sizes.size(); ++i)
      if (sizes[i] == 0) throw Error("netspec: layer " + std::to_string(i) + " has zero size");
    if (recurrent_hidden != 0 && recurrent_hidden != sizes[1])
      throw Error("netspec: recurrent_hidden " + std::to_string(recurrent_hidden) + " must equal sizes[1] = " +
                  std::to_string(sizes[1]));
  }
};

/// Weight [out x in] uniform in +-1/sqrt(in); zero bias.
inline void add_linear(ParamSet& ps, const std::string& name, std::size_t out, std::size_t in, Rng& rng,
                       bool with_bias = true) {
  if (out == 0 || in == 0) throw Error("init: layer '" + name + "' has a zero-sized dimension");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w(Shape{out, in});
  for (auto& v : w.data) v = rng.uniform(-bound, bound);
  ps.add(name + ".w", std::move(w));
  if (with_bias) ps.add(name + ".b", Tensor(Shape{out}, 0.0));
}

inline void add_gru(ParamSet& ps, const std::string& prefix, std::size_t input, std::size_t hidden, Rng& rng) {
  if (input == 0 || hidden == 0) throw Error("init: gru '" + prefix + "' has a zero-sized dimension");
  auto uniform = [&](Shape s, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return t;
  };
  ps.add(prefix + "gru.wx", uniform(Shape{3 * hidden, input}, input));
  ps.add(prefix + "gru.uzr", uniform(Shape{2 * hidden, hidden}, hidden));
  ps.add(prefix + "gru.uh", uniform(Shape{hidden, hidden}, hidden));
  ps.add(prefix + "gru.b", Tensor(Shape{3 * hidden}, 0.0));
}

inline ParamSet init_params(const NetSpec& spec, std::uint64_t seed, const std::string& prefix = "") {
  spec.validate();
  Rng rng(seed);
  ParamSet ps;
  ps.seed = seed;
  for (std::size_t i = 0; i < spec.layers(); ++i) {
    add_linear(ps, prefix + "l" + std::to_string(i), spec.sizes[i + 1], spec.sizes[i], rng);
    if (i == 0 && spec.recurrent_hidden) add_gru(ps, prefix, spec.recurrent_hidden, spec.recurrent_hidden, rng);
  }
  return ps;
}

inline Var layer_forward(const Bound& p, const std::string& name, Activation act, Var x) {
  return ad::activation(act, ad::linear(p[name + ".w"], x, p[name + ".b"]));
}

/// Plain feed-forward pass through every layer of `spec`.
inline Var mlp_forward(const Bound& p, const NetSpec& spec, Var x, const std::string& prefix = "") {
  if (x.value().cols() != spec.sizes[0])
    throw Error("mlp_forward: input dim mismatch, expected " + std::to_string(spec.sizes[0]) + " got " +
                shape_str(x.value().shape));
  for (std::size_t i = 0; i < spec.layers(); ++i)
    x = layer_forward(p, prefix + "l" + std::to_string(i), spec.activations[i], x);
  return x;
}

/// One gated recurrent update over a batch of rows:
///   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br)
///   cand = tanh(Wh x + Uh (r*h) + bh),  h' = (1-z)*h + z*cand
inline Var gru_step(const Bound& p, Var x, Var h, const std::string& prefix = "") {
  const Var wx = p[prefix + "gru.wx"];
  const std::size_t H = wx.value().shape[0] / 3;
  const std::size_t d = wx.value().shape[1];
  if (x.value().cols() != d)
    throw Error("gru_step: input dim mismatch, expected " + std::to_string(d) + " got " + shape_str(x.value().shape));
  if (h.value().cols() != H || h.value().rows() != x.value().rows() || h.value().rank() != x.value().rank())
    throw Error("gru_step: hidden shape mismatch, expected " + std::to_string(H) + " columns matching input rows, got " +
                shape_str(h.value().shape));
  const Var gx = ad::linear(wx, x, p[prefix + "gru.b"]);
  const Var gh = ad::linear(p[prefix + "gru.uzr"], h);
  const Var zr = ad::sigmoid(ad::add(ad::slice_cols(gx, 0, 2 * H), gh));
  const Var z = ad::slice_cols(zr, 0, H);
  const Var r = ad::slice_cols(zr, H, H);
  const Var cand = ad::tanh(ad::add(ad::slice_cols(gx, 2 * H, H), ad::linear(p[prefix + "gru.uh"], ad::mul(r, h))));
  return ad::lerp(z, cand, h);
}

/// Layer 0, then the recurrent cell, then the remaining layers. Returns
/// (output, new hidden).
inline std::pair<Var, Var> recurrent_forward(const Bound& p, const NetSpec& spec, Var x, Var h,
                                             const std::string& prefix = "") {
  if (!spec.recurrent_hidden) throw Error("recurrent_forward: spec has no recurrent cell");
  if (x.value().cols() != spec.sizes[0])
    throw Error("recurrent_forward: input dim mismatch, expected " + std::to_string(spec.sizes[0]) + " got " +
                shape_str(x.value().shape));
  Var y = layer_forward(p, prefix + "l0", spec.activations[0], x);
  const Var h_next = gru_step(p, y, h, prefix);
  y = h_next;
  for (std::size_t i = 1; i < spec.layers(); ++i)
    y = layer_forward(p, prefix + "l" + std::to_string(i), spec.activations[i], y);
  return {y, h_next};
}

}  // namespace cmq::nets
