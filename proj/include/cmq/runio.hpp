#pragma once

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>

#include "cmq/runner.hpp"

namespace cmq::runio {

namespace fs = std::filesystem;
using boost::property_tree::ptree;
using ad::Var;

// ---------------------------------------------------------------------------
// Config files

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Reads one section, tracking which keys were consumed so leftovers can be
/// reported as unknown.
class Section {
 public:
  Section(const ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  template <class T>
  void get(const std::string& key, T& out, double lo = -std::numeric_limits<double>::infinity(),
           double hi = std::numeric_limits<double>::infinity()) {
    used_.insert(key);
    if (!tree_) return;
    auto it = tree_->find(key);
    if (it == tree_->not_found()) return;
    const std::string raw = trim(it->second.data());
    out = parse<T>(key, raw);
    if constexpr (std::is_arithmetic_v<T>) {
      const double v = static_cast<double>(out);
      if (!(v >= lo && v <= hi)) {
        std::ostringstream os;
        os << "config: " << where(key) << " = " << raw << " is out of range [" << lo << ", " << hi << "]";
        throw Error(os.str());
      }
    }
  }

  void reject_unknown() const {
    if (!tree_) return;
    for (const auto& [k, v] : *tree_)
      if (!used_.count(k)) throw Error("config: unknown key " + where(k));
  }

  std::string where(const std::string& key) const { return "\"" + name_ + "." + key + "\""; }

 private:
  static std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    const auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }

  template <class T>
  T parse(const std::string& key, const std::string& raw) const {
    auto bad = [&](const char* what) {
      return Error("config: " + where(key) + " expects " + what + ", got \"" + raw + "\"");
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (raw == "true" || raw == "1") return true;
      if (raw == "false" || raw == "0") return false;
      throw bad("true or false");
    } else if constexpr (std::is_same_v<T, double>) {
      double v = 0;
      auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (raw.empty() || res.ec != std::errc() || res.ptr != raw.data() + raw.size()) throw bad("a number");
      return v;
    } else if constexpr (std::is_integral_v<T>) {
      long long v = 0;
      auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (raw.empty() || res.ec != std::errc() || res.ptr != raw.data() + raw.size()) throw bad("an integer");
      if (v < 0) throw Error("config: " + where(key) + " = " + raw + " is out of range (must be non-negative)");
      if (static_cast<unsigned long long>(v) > static_cast<unsigned long long>(std::numeric_limits<T>::max()))
        throw Error("config: " + where(key) + " = " + raw + " is out of range (too large)");
      return static_cast<T>(v);
    } else if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<std::uint64_t>>) {
      T out;
      std::stringstream ss(raw);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        typename T::value_type v{};
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size())
          throw bad("a comma-separated list of numbers");
        out.push_back(v);
      }
      return out;
    } else {
      static_assert(std::is_same_v<T, std::string>);
      return raw;
    }
  }

  const ptree* tree_;
  std::string name_;
  std::set<std::string> used_;
};

}  // namespace detail

inline EnvKind parse_env_kind(const std::string& s) {
  if (s == "lbf") return EnvKind::lbf;
  if (s == "matrix") return EnvKind::matrix;
  throw Error("config: \"env.kind\" must be lbf or matrix, got \"" + s + "\"");
}

inline mixer::MixerKind parse_mixer_kind(const std::string& s, const std::string& where = "\"mixer.kind\"") {
  if (s == "cmq") return mixer::MixerKind::cmq;
  if (s == "vdn") return mixer::MixerKind::vdn;
  throw Error("config: " + where + " must be cmq or vdn, got \"" + s + "\"");
}

/// Builds a RunConfig from INI text. Absent keys keep their defaults.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  ptree root;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error("config: " + origin + " line " + std::to_string(e.line()) + ": " + e.message());
  }
  static const std::set<std::string> sections{"env", "agent", "mixer", "training"};
  for (const auto& [name, node] : root) {
    if (!sections.count(name))
      throw Error(node.empty() ? "config: key \"" + name + "\" must belong to a section"
                               : "config: unknown section [" + name + "]");
  }
  auto section = [&](const char* name) {
    auto it = root.find(name);
    return detail::Section(it == root.not_found() ? nullptr : &it->second, name);
  };

  RunConfig c;
  constexpr double inf = std::numeric_limits<double>::infinity();
  {
    auto s = section("env");
    std::string kind = c.env.kind == EnvKind::lbf ? "lbf" : "matrix";
    s.get("kind", kind);
    c.env.kind = parse_env_kind(kind);
    auto& l = c.env.lbf;
    s.get("grid_width", l.grid_w, 4, 64);
    s.get("grid_height", l.grid_h, 4, 64);
    s.get("agents", l.n_agents, 1, 16);
    s.get("foods", l.n_foods, 1, 64);
    s.get("max_agent_level", l.max_agent_level, 1, 16);
    s.get("episode_limit", l.episode_limit, 1, 100000);
    s.get("view_range", l.view_range, 0, 32);
    s.get("coop_penalty", l.coop_penalty, -1, 0);
    s.get("force_coop", l.force_coop);
    auto& g = c.env.matrix;
    s.get("matrix_agents", g.n_agents, 1, 8);
    s.get("matrix_actions", g.n_actions, 1, 32);
    s.get("payoff", g.payoff);
    s.reject_unknown();
    try {
      if (c.env.kind == EnvKind::lbf) l.validate();
      else g.validate();
    } catch (const Error& e) {
      throw Error(std::string("config: [env] ") + e.what());
    }
  }
  {
    auto s = section("agent");
    s.get("hidden", c.agent.hidden, 1, 4096);
    s.reject_unknown();
  }
  {
    auto s = section("mixer");
    std::string kind = mixer::mixer_name(c.mixer.kind);
    s.get("kind", kind);
    c.mixer.kind = parse_mixer_kind(kind);
    s.get("concepts", c.mixer.concepts, 1, 1024);
    s.get("embed_dim", c.mixer.embed_dim, 1, 4096);
    s.get("attn_dim", c.mixer.attn_dim, 1, 4096);
    s.get("bias_hidden", c.mixer.bias_hidden, 1, 4096);
    s.reject_unknown();
  }
  {
    auto s = section("training");
    auto& t = c.training;
    s.get("gamma", t.gamma, 0, 1);
    s.get("lr", t.lr, 0, 1);
    s.get("rms_alpha", t.rms_alpha, 0, 1);
    s.get("rms_eps", t.rms_eps, 0, 1);
    s.get("grad_clip", t.grad_clip, 0, inf);
    s.get("batch_size", t.batch_size, 1, 1e6);
    s.get("buffer_size", t.buffer_size, 1, 1e7);
    s.get("target_interval", t.target_interval, 1, 1e9);
    s.get("eps_start", t.eps_start, 0, 1);
    s.get("eps_end", t.eps_end, 0, 1);
    s.get("eps_decay_steps", t.eps_decay_steps, 0, inf);
    s.get("intervention_prob", t.intervention_prob, 0, 1);
    s.get("concept_loss_weight", t.concept_loss_weight, 0, inf);
    s.get("warmup_episodes", t.warmup_episodes, 0, 1e9);
    s.get("total_steps", t.total_steps, 0, 1e12);
    s.get("eval_interval", t.eval_interval, 1, 1e12);
    s.get("eval_episodes", t.eval_episodes, 1, 1e6);
    s.get("seeds", t.seeds);
    s.reject_unknown();
    if (t.batch_size > t.buffer_size)
      throw Error("config: \"training.batch_size\" (" + std::to_string(t.batch_size) +
                  ") exceeds \"training.buffer_size\" (" + std::to_string(t.buffer_size) + ")");
    if (t.seeds.empty()) throw Error("config: \"training.seeds\" must list at least one seed");
  }
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// INI text that parses back to an equal RunConfig.
inline std::string format_config(const RunConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  auto list = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ",";
      if constexpr (std::is_same_v<std::decay_t<decltype(v[i])>, double>) s += fmt_double(v[i]);
      else s += std::to_string(v[i]);
    }
    return s;
  };
  const auto& l = c.env.lbf;
  const auto& g = c.env.matrix;
  os << "[env]\n"
     << "kind = " << (c.env.kind == EnvKind::lbf ? "lbf" : "matrix") << "\n"
     << "grid_width = " << l.grid_w << "\n"
     << "grid_height = " << l.grid_h << "\n"
     << "agents = " << l.n_agents << "\n"
     << "foods = " << l.n_foods << "\n"
     << "max_agent_level = " << l.max_agent_level << "\n"
     << "episode_limit = " << l.episode_limit << "\n"
     << "view_range = " << l.view_range << "\n"
     << "coop_penalty = " << fmt_double(l.coop_penalty) << "\n"
     << "force_coop = " << (l.force_coop ? "true" : "false") << "\n"
     << "matrix_agents = " << g.n_agents << "\n"
     << "matrix_actions = " << g.n_actions << "\n"
     << "payoff = " << list(g.payoff) << "\n\n";
  os << "[agent]\nhidden = " << c.agent.hidden << "\n\n";
  os << "[mixer]\n"
     << "kind = " << mixer::mixer_name(c.mixer.kind) << "\n"
     << "concepts = " << c.mixer.concepts << "\n"
     << "embed_dim = " << c.mixer.embed_dim << "\n"
     << "attn_dim = " << c.mixer.attn_dim << "\n"
     << "bias_hidden = " << c.mixer.bias_hidden << "\n\n";
  const auto& t = c.training;
  os << "[training]\n"
     << "gamma = " << fmt_double(t.gamma) << "\n"
     << "lr = " << fmt_double(t.lr) << "\n"
     << "rms_alpha = " << fmt_double(t.rms_alpha) << "\n"
     << "rms_eps = " << fmt_double(t.rms_eps) << "\n"
     << "grad_clip = " << fmt_double(t.grad_clip) << "\n"
     << "batch_size = " << t.batch_size << "\n"
     << "buffer_size = " << t.buffer_size << "\n"
     << "target_interval = " << t.target_interval << "\n"
     << "eps_start = " << fmt_double(t.eps_start) << "\n"
     << "eps_end = " << fmt_double(t.eps_end) << "\n"
     << "eps_decay_steps = " << fmt_double(t.eps_decay_steps) << "\n"
     << "intervention_prob = " << fmt_double(t.intervention_prob) << "\n"
     << "concept_loss_weight = " << fmt_double(t.concept_loss_weight) << "\n"
     << "warmup_episodes = " << t.warmup_episodes << "\n"
     << "total_steps = " << t.total_steps << "\n"
     << "eval_interval = " << t.eval_interval << "\n"
     << "eval_episodes = " << t.eval_episodes << "\n"
     << "seeds = " << list(t.seeds) << "\n";
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw Error("write failed: " + path.string());
}

inline void save_config(const fs::path& path, const RunConfig& c) { write_text(path, format_config(c)); }

/// Parses "k=v,k=v" into an intervention mask.
inline mixer::InterventionMask parse_intervention(const std::string& text, std::size_t K) {
  mixer::InterventionMask iv;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    std::size_t k = 0;
    double v = 0;
    const bool ok = eq != std::string::npos &&
                    std::from_chars(item.data(), item.data() + eq, k).ptr == item.data() + eq &&
                    std::from_chars(item.data() + eq + 1, item.data() + item.size(), v).ptr == item.data() + item.size() &&
                    eq > 0 && eq + 1 < item.size();
    if (!ok) throw Error("intervention: expected k=v, got \"" + item + "\"");
    iv[k] = v;
  }
  mixer::validate_intervention(iv, K);
  return iv;
}

// ---------------------------------------------------------------------------
// Binary serialization

class Writer {
 public:
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  void sizes(const std::vector<std::size_t>& v) {
    u64(v.size());
    for (auto x : v) u64(x);
  }
  void bytes(const std::vector<std::uint8_t>& v) {
    u64(v.size());
    raw(v.data(), v.size());
  }
  const std::string& data() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  explicit Reader(std::string&&) = delete;  // the reader only borrows its buffer
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::string str() {
    const std::size_t n = count(1);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(count(sizeof(double)));
    std::memcpy(v.data(), buf_.data() + pos_, v.size() * sizeof(double));
    pos_ += v.size() * sizeof(double);
    return v;
  }
  std::vector<std::size_t> sizes() {
    std::vector<std::size_t> v(count(8));
    for (auto& x : v) x = u64();
    return v;
  }
  std::vector<std::uint8_t> bytes() {
    std::vector<std::uint8_t> v(count(1));
    std::memcpy(v.data(), buf_.data() + pos_, v.size());
    pos_ += v.size();
    return v;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t count(std::size_t elem) {
    const std::uint64_t n = u64();
    if (elem && n > (buf_.size() - pos_) / elem) throw Error("checkpoint corrupt: length field exceeds payload");
    return static_cast<std::size_t>(n);
  }
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw Error("checkpoint corrupt: payload truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline void write_params(Writer& w, const ParamSet& p) {
  w.u64(p.seed);
  w.u64(p.size());
  for (const auto& [name, t] : p.entries()) {
    w.str(name);
    w.sizes(t.shape);
    w.doubles(t.data);
  }
}

inline ParamSet read_params(Reader& r) {
  ParamSet p;
  p.seed = r.u64();
  const std::size_t n = r.u64();
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = r.str();
    Shape shape = r.sizes();
    std::vector<double> data = r.doubles();
    if (shape_numel(shape) != data.size()) throw Error("checkpoint corrupt: tensor '" + name + "' size mismatch");
    p.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return p;
}

/// Rebuilds an episode by replaying recorded joint actions from a reset
/// with the recorded seed. Environments are deterministic, so only the seed
/// and actions need to be stored.
inline training::Episode replay_episode(const env::Environment& proto, std::uint64_t seed,
                                        const std::vector<std::size_t>& actions) {
  const std::size_t n = proto.n_agents();
  if (actions.empty() || actions.size() % n) throw Error("episode replay: action count is not a multiple of the agents");
  auto env = proto.clone();
  env->reset(seed);
  training::Episode e;
  e.n_agents = n;
  e.obs_dim = proto.obs_dim();
  e.state_dim = proto.state_dim();
  e.n_actions = proto.n_actions();
  e.n_labels = proto.n_labels();
  e.env_seed = seed;
  auto record = [&] {
    const Tensor o = env->observations(), st = env->state(), av = env->avail_actions();
    e.obs.insert(e.obs.end(), o.data.begin(), o.data.end());
    e.state.insert(e.state.end(), st.data.begin(), st.data.end());
    e.avail.insert(e.avail.end(), av.data.begin(), av.data.end());
  };
  record();
  for (std::size_t t = 0; t * n < actions.size(); ++t) {
    if (!e.done.empty() && e.done.back()) throw Error("episode replay: actions continue past the end of the episode");
    const Tensor l = env->labels();
    e.labels.insert(e.labels.end(), l.data.begin(), l.data.end());
    const std::vector<std::size_t> joint(actions.begin() + t * n, actions.begin() + (t + 1) * n);
    const env::StepOutcome so = env->step(joint);
    e.actions.insert(e.actions.end(), joint.begin(), joint.end());
    e.reward.push_back(so.reward);
    e.done.push_back(so.done ? 1 : 0);
    ++e.length;
    record();
  }
  e.validate();
  return e;
}

inline void write_episode(Writer& w, const training::Episode& e) {
  w.u64(e.env_seed);
  w.sizes(e.actions);
  w.u64(e.length);
  w.u8(e.done.empty() ? 0 : e.done.back());
}

inline training::Episode read_episode(Reader& r, const env::Environment& proto) {
  const std::uint64_t seed = r.u64();
  const auto actions = r.sizes();
  const std::size_t length = r.u64();
  const std::uint8_t done = r.u8();
  training::Episode e = replay_episode(proto, seed, actions);
  if (e.length != length || e.done.back() != done)
    throw Error("checkpoint corrupt: buffered episode does not replay to its recorded outcome");
  return e;
}

inline void write_metrics_row(Writer& w, const training::MetricsRow& m) {
  w.u64(m.env_steps);
  w.u64(m.episodes);
  w.u64(m.updates);
  for (double v : {m.mean_test_return, m.std_test_return, m.loss, m.td_loss, m.concept_loss, m.epsilon,
                   m.concept_accuracy})
    w.f64(v);
  w.doubles(m.concept_mean);
}

inline training::MetricsRow read_metrics_row(Reader& r) {
  training::MetricsRow m;
  m.env_steps = r.u64();
  m.episodes = r.u64();
  m.updates = r.u64();
  for (double* v : {&m.mean_test_return, &m.std_test_return, &m.loss, &m.td_loss, &m.concept_loss, &m.epsilon,
                    &m.concept_accuracy})
    *v = r.f64();
  m.concept_mean = r.doubles();
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Replay-buffer episodes are stored as (seed, joint actions) and replayed
// on load. File layout: 8-byte magic, u32 version, u64 payload length (uncompressed),
// u64 compressed length, u32 CRC-32 of the uncompressed payload, then the
// zlib stream.

inline constexpr char kMagic[8] = {'C', 'M', 'Q', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  RunConfig config;
  training::TrainerState state;
};

inline bool operator==(const Checkpoint& a, const Checkpoint& b) {
  const auto& x = a.state;
  const auto& y = b.state;
  return a.version == b.version && a.config == b.config && x.seed == y.seed && x.learner.params == y.learner.params &&
         x.learner.target == y.learner.target && x.learner.optim.sq_avg == y.learner.optim.sq_avg &&
         x.learner.optim.steps == y.learner.optim.steps && x.rng == y.rng && x.env_steps == y.env_steps &&
         x.episodes == y.episodes && x.next_eval == y.next_eval && x.metrics == y.metrics &&
         x.buffer.capacity() == y.buffer.capacity() && x.buffer.episodes() == y.buffer.episodes() &&
         x.last.loss == y.last.loss && x.last.td_loss == y.last.td_loss &&
         x.last.concept_loss == y.last.concept_loss && x.last.grad_norm == y.last.grad_norm;
}

inline Checkpoint make_checkpoint(const training::Trainer& tr) { return {kCheckpointVersion, tr.config(), tr.state()}; }

inline std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  const auto& s = c.state;
  w.str(format_config(c.config));
  w.u64(s.seed);
  write_params(w, s.learner.params);
  write_params(w, s.learner.target);
  write_params(w, s.learner.optim.sq_avg);
  w.u64(s.learner.optim.steps);
  w.str(s.rng.state());
  w.u64(s.env_steps);
  w.u64(s.episodes);
  w.u64(s.next_eval);
  for (double v : {s.last.loss, s.last.td_loss, s.last.concept_loss, s.last.grad_norm}) w.f64(v);
  w.u64(s.metrics.size());
  for (const auto& m : s.metrics) write_metrics_row(w, m);
  w.u64(s.buffer.capacity());
  w.u64(s.buffer.size());
  for (const auto& e : s.buffer.episodes()) write_episode(w, e);
  const std::string& payload = w.data();

  uLongf clen = compressBound(payload.size());
  std::string comp(clen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(comp.data()), &clen, reinterpret_cast<const Bytef*>(payload.data()),
                payload.size(), Z_BEST_SPEED) != Z_OK)
    throw Error("checkpoint: compression failed");
  comp.resize(clen);
  const std::uint32_t crc =
      static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), payload.size()));

  std::string out(kMagic, sizeof kMagic);
  auto put = [&](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); };
  put(c.version);
  put(static_cast<std::uint64_t>(payload.size()));
  put(static_cast<std::uint64_t>(comp.size()));
  put(crc);
  out += comp;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  constexpr std::size_t header = sizeof kMagic + 4 + 8 + 8 + 4;
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw Error("checkpoint: not a checkpoint file (bad magic)");
  if (bytes.size() < header) throw Error("checkpoint corrupt: header truncated");
  std::uint32_t version, crc;
  std::uint64_t plen, clen;
  const char* p = bytes.data() + sizeof kMagic;
  std::memcpy(&version, p, 4);
  std::memcpy(&plen, p + 4, 8);
  std::memcpy(&clen, p + 12, 8);
  std::memcpy(&crc, p + 20, 4);
  if (version != kCheckpointVersion)
    throw Error("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() - header != clen)
    throw Error("checkpoint corrupt: expected " + std::to_string(clen) + " compressed bytes, found " +
                std::to_string(bytes.size() - header));
  if (plen > (std::uint64_t{1} << 40)) throw Error("checkpoint corrupt: implausible payload length");
  std::string payload(plen, '\0');
  uLongf out_len = plen;
  if (uncompress(reinterpret_cast<Bytef*>(payload.data()), &out_len,
                 reinterpret_cast<const Bytef*>(bytes.data() + header), clen) != Z_OK ||
      out_len != plen)
    throw Error("checkpoint corrupt: compressed stream is damaged");
  if (static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), payload.size())) != crc)
    throw Error("checkpoint corrupt: checksum mismatch");

  Reader r(payload);
  Checkpoint c;
  c.version = version;
  c.config = parse_config(r.str(), "<checkpoint>");
  auto& s = c.state;
  s.seed = r.u64();
  ParamSet params = read_params(r);
  ParamSet target = read_params(r);
  ParamSet sq = read_params(r);
  const std::uint64_t opt_steps = r.u64();
  const std::string rng_state = r.str();
  s.env_steps = r.u64();
  s.episodes = r.u64();
  s.next_eval = r.u64();
  for (double* v : {&s.last.loss, &s.last.td_loss, &s.last.concept_loss, &s.last.grad_norm}) *v = r.f64();
  const std::size_t nm = r.u64();
  for (std::size_t i = 0; i < nm; ++i) s.metrics.push_back(read_metrics_row(r));
  const auto env = c.config.env.make();
  s.buffer = training::ReplayBuffer(r.u64());
  const std::size_t ne = r.u64();
  for (std::size_t i = 0; i < ne; ++i) s.buffer.push(read_episode(r, *env));
  if (!r.at_end()) throw Error("checkpoint corrupt: trailing bytes in payload");

  // Rebuild the learner around the stored tensors.
  training::Model m = training::make_model(c.config, *env);
  const ParamSet fresh = training::init_model_params(m, s.seed);
  if (fresh.size() != params.size())
    throw Error("checkpoint: parameter layout does not match its config");
  for (std::size_t i = 0; i < fresh.size(); ++i)
    if (fresh.entries()[i].first != params.entries()[i].first ||
        fresh.entries()[i].second.shape != params.entries()[i].second.shape)
      throw Error("checkpoint: parameter '" + params.entries()[i].first + "' does not match its config");
  s.learner.model = m;
  s.learner.cfg = c.config.training;
  s.learner.params = std::move(params);
  s.learner.target = std::move(target);
  s.learner.optim = training::make_optim(s.learner.params, c.config.training);
  s.learner.optim.sq_avg = std::move(sq);
  s.learner.optim.steps = opt_steps;
  s.rng.set_state(rng_state);
  return c;
}

/// Writes to a temporary file and renames it into place, so a crash never
/// leaves a half-written checkpoint under the final name.
inline void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, encode_checkpoint(c));
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Metrics tables

inline std::string metrics_header(std::size_t K) {
  std::string h = "env_steps,episodes,updates,mean_test_return,std_test_return,loss,td_loss,concept_loss,epsilon,"
                  "concept_accuracy";
  for (std::size_t k = 0; k < K; ++k) h += ",p_mean_" + std::to_string(k);
  return h;
}

inline std::string metrics_line(const training::MetricsRow& m, std::size_t K) {
  using detail::fmt_double;
  std::ostringstream os;
  os << m.env_steps << ',' << m.episodes << ',' << m.updates << ',' << fmt_double(m.mean_test_return) << ','
     << fmt_double(m.std_test_return) << ',' << fmt_double(m.loss) << ',' << fmt_double(m.td_loss) << ','
     << fmt_double(m.concept_loss) << ',' << fmt_double(m.epsilon) << ','
     << (m.concept_accuracy < 0 ? std::string() : fmt_double(m.concept_accuracy));
  for (std::size_t k = 0; k < K; ++k) os << ',' << (k < m.concept_mean.size() ? fmt_double(m.concept_mean[k]) : "");
  return os.str();
}

/// Appends rows as they arrive and flushes each one, so an aborted run
/// leaves every finished evaluation on disk.
class MetricsWriter {
 public:
  MetricsWriter(const fs::path& path, std::size_t K, bool append) : K_(K) {
    const bool fresh = !append || !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw Error("cannot open " + path.string() + " for writing");
    if (fresh) out_ << metrics_header(K) << '\n' << std::flush;
  }
  void write(const training::MetricsRow& m) {
    out_ << metrics_line(m, K_) << '\n' << std::flush;
    if (!out_) throw Error("metrics: write failed");
  }

 private:
  std::size_t K_;
  std::ofstream out_;
};

inline std::string metrics_csv(const std::vector<training::MetricsRow>& rows, std::size_t K) {
  std::string s = metrics_header(K) + "\n";
  for (const auto& r : rows) s += metrics_line(r, K) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Traces

using nlohmann::json;

struct TraceStep {
  std::size_t t = 0;
  std::vector<double> state;
  std::vector<std::vector<double>> q;  // per agent, all actions
  std::vector<std::size_t> actions;
  double reward = 0.0;
  std::vector<double> labels;
  mixer::ConceptState concepts;  // empty for VDN
  double q_tot = 0.0;
};

struct Trace {
  std::uint64_t env_seed = 0;
  std::size_t n_agents = 0, n_actions = 0, concepts = 0, embed_dim = 0;
  std::string mixer;
  mixer::InterventionMask intervention;
  std::vector<TraceStep> steps;
  double episode_return = 0.0;
};

/// Greedy episode on `seed` with mixer introspection. The intervention
/// mask alters the reported concept state; greedy actions come from the
/// agent utilities and so are unaffected.
inline Trace trace_episode(const env::Environment& proto, const ParamSet& params, const training::Model& m,
                           std::uint64_t seed, const mixer::InterventionMask& iv = {}) {
  if (m.kind == mixer::MixerKind::cmq) mixer::validate_intervention(iv, m.mixer.concepts);
  else if (!iv.empty()) throw Error("trace: interventions need the cmq mixer");
  const auto eps = training::rollout(proto, params, m, {seed}, {});
  const training::Episode& e = eps.front();
  const auto batch = training::make_batch({&e});
  ad::Tape tape;
  const Bound p = bind(tape, params, false);
  const auto qs = training::unroll_agents(tape, p, m, batch, e.length);
  const std::size_t n = e.n_agents, A = e.n_actions, T = e.length, S = e.state_dim;
  Tensor chosen(Shape{T, n});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < n; ++i) chosen[t * n + i] = qs[t].value().at(i, e.actions[t * n + i]);
  const Var states = tape.constant(Tensor(Shape{T, S}, std::vector<double>(e.state.begin(), e.state.begin() + T * S)));
  const Var qv = tape.constant(chosen);

  Trace tr;
  tr.env_seed = seed;
  tr.n_agents = n;
  tr.n_actions = A;
  tr.mixer = mixer::mixer_name(m.kind);
  tr.intervention = iv;
  tr.episode_return = e.episode_return();
  mixer::MixOutput mo;
  Var q_tot;
  if (m.kind == mixer::MixerKind::cmq) {
    tr.concepts = m.mixer.concepts;
    tr.embed_dim = m.mixer.embed_dim;
    const auto ov = mixer::ProbOverride::from_mask(iv, T, m.mixer.concepts);
    mo = mixer::mix(p, m.mixer, qv, states, &ov, true);
    q_tot = mo.q_tot;
  } else {
    q_tot = mixer::vdn_mix(qv);
  }
  for (std::size_t t = 0; t < T; ++t) {
    TraceStep st;
    st.t = t;
    st.state.assign(e.state.begin() + t * S, e.state.begin() + (t + 1) * S);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = qs[t].value().row(i);
      st.q.emplace_back(row.begin(), row.end());
    }
    st.actions.assign(e.actions.begin() + t * n, e.actions.begin() + (t + 1) * n);
    st.reward = e.reward[t];
    st.labels.assign(e.labels.begin() + t * e.n_labels, e.labels.begin() + (t + 1) * e.n_labels);
    if (m.kind == mixer::MixerKind::cmq) st.concepts = mixer::concept_state(mo, t, m.mixer);
    st.q_tot = q_tot.value()[t];
    tr.steps.push_back(std::move(st));
  }
  return tr;
}

inline json trace_header(const Trace& tr) {
  json iv = json::object();
  for (const auto& [k, v] : tr.intervention) iv[std::to_string(k)] = v;
  return {{"type", "header"}, {"schema", "cmq-trace/1"}, {"mixer", tr.mixer},
          {"env_seed", tr.env_seed}, {"agents", tr.n_agents}, {"actions", tr.n_actions},
          {"concepts", tr.concepts}, {"embed_dim", tr.embed_dim}, {"steps", tr.steps.size()},
          {"return", tr.episode_return}, {"intervention", iv}};
}

inline json trace_record(const TraceStep& s) {
  json j = {{"type", "step"}, {"t", s.t}, {"state", s.state}, {"q", s.q}, {"actions", s.actions},
            {"reward", s.reward}, {"labels", s.labels}, {"q_tot", s.q_tot}};
  if (s.concepts.K > 0) {
    j["p_pred"] = s.concepts.p_pred;
    j["p"] = s.concepts.p;
    j["alpha"] = s.concepts.alpha;
    j["q_hat"] = s.concepts.q_hat;
    j["q_pos"] = s.concepts.q_pos;
    j["q_neg"] = s.concepts.q_neg;
    j["bias"] = s.concepts.bias;
  }
  return j;
}

/// Writes `<stem>.jsonl` (header plus one record per step) and
/// `<stem>_embeddings.csv` (mixed concept embeddings, one row per step and
/// concept).
inline void export_trace(const Trace& tr, const fs::path& jsonl, const fs::path& embeddings_csv) {
  std::ofstream out(jsonl, std::ios::trunc);
  if (!out) throw Error("trace: cannot open " + jsonl.string() + " for writing");
  out << trace_header(tr).dump() << '\n';
  for (const auto& s : tr.steps) out << trace_record(s).dump() << '\n';
  out.flush();
  if (!out) throw Error("trace: write failed on " + jsonl.string());
  if (tr.concepts == 0) return;
  std::ofstream csv(embeddings_csv, std::ios::trunc);
  if (!csv) throw Error("trace: cannot open " + embeddings_csv.string() + " for writing");
  csv << "t,concept,p,label";
  for (std::size_t d = 0; d < tr.embed_dim; ++d) csv << ",e" << d;
  csv << '\n';
  for (const auto& s : tr.steps)
    for (std::size_t k = 0; k < tr.concepts; ++k) {
      csv << s.t << ',' << k << ',' << detail::fmt_double(s.concepts.p[k]) << ','
          << (k < s.labels.size() ? detail::fmt_double(s.labels[k]) : "");
      for (std::size_t d = 0; d < tr.embed_dim; ++d) csv << ',' << detail::fmt_double(s.concepts.c_mix[k * tr.embed_dim + d]);
      csv << '\n';
    }
  csv.flush();
  if (!csv) throw Error("trace: write failed on " + embeddings_csv.string());
}

// ---------------------------------------------------------------------------
// Run directory lock

/// Exclusive ownership of a run directory through `<dir>/LOCK`, which holds
/// the owner's pid. A lock left by a process that no longer exists is taken
/// over.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / "LOCK") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
        ::close(fd);
        if (!ok) {
          fs::remove(path_);
          throw Error("run lock: cannot write " + path_.string());
        }
        return;
      }
      if (errno != EEXIST) throw Error("run lock: cannot create " + path_.string() + ": " + std::strerror(errno));
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM))
        throw Error("run directory " + dir.string() + " is locked by process " + std::to_string(owner));
      fs::remove(path_);
    }
    throw Error("run lock: could not acquire " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

}  // namespace cmq::runio
