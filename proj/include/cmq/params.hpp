#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmq/autodiff.hpp"

namespace cmq {

/// Named learnable tensors in insertion order. Copying a ParamSet yields a
/// fully independent deep copy (used for the target network).
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor t) {
    if (index_.count(name)) throw Error("params: duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name) { return entries_[lookup(name)].second; }
  const Tensor& at(const std::string& name) const { return entries_[lookup(name)].second; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Same names and shapes, zero values.
  ParamSet zeros_like() const {
    ParamSet z;
    z.seed = seed;
    for (const auto& [name, t] : entries_) z.add(name, Tensor(t.shape, 0.0));
    return z;
  }

  /// Appends all of `other`, prefixing its names.
  void merge(const ParamSet& other, const std::string& prefix = "") {
    for (const auto& [name, t] : other.entries_) add(prefix + name, t);
  }

  std::uint64_t seed = 0;

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("params: no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// ParamSet tensors placed on a tape, looked up by name.
class Bound {
 public:
  ad::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("params: no bound parameter named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, ad::Var>& vars() const { return vars_; }
  void set(const std::string& name, ad::Var v) { vars_[name] = v; }

 private:
  std::map<std::string, ad::Var> vars_;
};

/// Places every parameter on the tape, as a differentiable leaf when
/// `trainable` and as a constant otherwise. The tape refers to the
/// ParamSet's storage, which must stay alive and unmodified meanwhile.
inline Bound bind(ad::Tape& tape, const ParamSet& params, bool trainable) {
  Bound b;
  for (const auto& [name, t] : params.entries()) b.set(name, trainable ? tape.leaf_view(t) : tape.constant_view(t));
  return b;
}

/// Leaf gradients after tape.backward(), in the ParamSet's layout.
inline ParamSet collect_grads(const ad::Tape& tape, const Bound& bound, const ParamSet& like) {
  ParamSet g;
  g.seed = like.seed;
  for (const auto& [name, t] : like.entries()) g.add(name, tape.grad(bound[name]));
  return g;
}

}  // namespace cmq
