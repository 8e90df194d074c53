#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>

#include "cmq/runio.hpp"

namespace cmq::bridge {

using nlohmann::json;

inline constexpr const char* kSchema = "cmq-bridge/1";
inline constexpr std::uint16_t kDefaultPort = 7878;

// ---------------------------------------------------------------------------
// Frames

struct GridAgent {
  int x = 0, y = 0, level = 0;
  friend bool operator==(const GridAgent&, const GridAgent&) = default;
};

struct GridFood {
  int x = 0, y = 0, level = 0;
  bool alive = true;
  friend bool operator==(const GridFood&, const GridFood&) = default;
};

struct Grid {
  int width = 0, height = 0;
  std::vector<GridAgent> agents;
  std::vector<GridFood> foods;
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Snapshot sent after `reset` and after every `step`. Decision fields
/// (q, actions, concepts) describe the choice made in the state shown by
/// `grid`; reward/return/done describe its outcome. After `reset` the
/// decision fields are empty.
struct Frame {
  std::uint64_t seed = 0;
  std::size_t t = 0;
  std::string mode = "paused";
  Grid grid;
  std::vector<double> labels;
  bool decided = false;
  std::vector<std::vector<double>> q;
  std::vector<std::size_t> actions;
  std::vector<double> p_pred;  // before interventions
  std::vector<double> p;       // after interventions
  std::vector<double> alpha;
  std::vector<double> q_hat;
  double q_tot = 0.0;
  std::map<std::size_t, double> intervention;
  double reward = 0.0;
  double episode_return = 0.0;
  bool done = false;
  friend bool operator==(const Frame&, const Frame&) = default;
};

inline json encode_frame(const Frame& f) {
  json agents = json::array(), foods = json::array(), iv = json::object();
  for (const auto& a : f.grid.agents) agents.push_back({{"x", a.x}, {"y", a.y}, {"level", a.level}});
  for (const auto& d : f.grid.foods) foods.push_back({{"x", d.x}, {"y", d.y}, {"level", d.level}, {"alive", d.alive}});
  for (const auto& [k, v] : f.intervention) iv[std::to_string(k)] = v;
  json j = {{"schema", kSchema},
            {"type", "frame"},
            {"seed", f.seed},
            {"t", f.t},
            {"mode", f.mode},
            {"grid", {{"width", f.grid.width}, {"height", f.grid.height}, {"agents", agents}, {"foods", foods}}},
            {"labels", f.labels},
            {"intervention", iv},
            {"reward", f.reward},
            {"return", f.episode_return},
            {"done", f.done}};
  if (f.decided) {
    j["decision"] = {{"q", f.q},         {"actions", f.actions}, {"p_pred", f.p_pred}, {"p", f.p},
                     {"alpha", f.alpha}, {"q_hat", f.q_hat},     {"q_tot", f.q_tot}};
  } else {
    j["decision"] = nullptr;
  }
  return j;
}

/// Inverse of encode_frame. Throws on a schema mismatch or missing field.
inline Frame decode_frame(const json& j) {
  if (!j.is_object() || j.value("schema", "") != kSchema)
    throw Error(std::string("frame: schema mismatch, expected ") + kSchema);
  try {
    Frame f;
    f.seed = j.at("seed").get<std::uint64_t>();
    f.t = j.at("t").get<std::size_t>();
    f.mode = j.at("mode").get<std::string>();
    const json& g = j.at("grid");
    f.grid.width = g.at("width").get<int>();
    f.grid.height = g.at("height").get<int>();
    for (const auto& a : g.at("agents")) f.grid.agents.push_back({a.at("x"), a.at("y"), a.at("level")});
    for (const auto& d : g.at("foods")) f.grid.foods.push_back({d.at("x"), d.at("y"), d.at("level"), d.at("alive")});
    f.labels = j.at("labels").get<std::vector<double>>();
    for (const auto& [k, v] : j.at("intervention").items()) f.intervention[std::stoul(k)] = v.get<double>();
    f.reward = j.at("reward").get<double>();
    f.episode_return = j.at("return").get<double>();
    f.done = j.at("done").get<bool>();
    const json& d = j.at("decision");
    if (!d.is_null()) {
      f.decided = true;
      f.q = d.at("q").get<std::vector<std::vector<double>>>();
      f.actions = d.at("actions").get<std::vector<std::size_t>>();
      f.p_pred = d.at("p_pred").get<std::vector<double>>();
      f.p = d.at("p").get<std::vector<double>>();
      f.alpha = d.at("alpha").get<std::vector<double>>();
      f.q_hat = d.at("q_hat").get<std::vector<double>>();
      f.q_tot = d.at("q_tot").get<double>();
    }
    return f;
  } catch (const json::exception& e) {
    throw Error(std::string("frame: malformed field: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Session

/// Error raised for a bad request; carries a machine-readable code.
struct RequestError : Error {
  std::string code;
  RequestError(std::string c, const std::string& msg) : Error(msg), code(std::move(c)) {}
};

/// One live evaluation episode driven by explicit commands. Requests never
/// leave the session half-updated: every command validates first and then
/// commits.
class Session {
 public:
  Session(RunConfig cfg, ParamSet params)
      : cfg_(std::move(cfg)), params_(std::move(params)), env_(cfg_.env.make()),
        model_(training::make_model(cfg_, *env_)) {
    if (model_.kind != mixer::MixerKind::cmq) throw Error("bridge: sessions need a cmq checkpoint");
  }

  static Session from_checkpoint(const runio::Checkpoint& c) { return Session(c.config, c.state.learner.params); }

  bool active() const { return active_; }
  const std::string& mode() const { return mode_; }
  double ms_per_step() const { return ms_per_step_; }
  const Frame& frame() const { return frame_; }
  const mixer::InterventionMask& intervention() const { return iv_; }
  const training::Model& model() const { return model_; }

  Frame reset(std::uint64_t seed) {
    env_->reset(seed);
    seed_ = seed;
    t_ = 0;
    h_ = Tensor(Shape{env_->n_agents(), model_.agent.hidden}, 0.0);
    last_.assign(env_->n_agents(), agents::kNoAction);
    return_ = 0.0;
    done_ = false;
    active_ = true;
    mode_ = "paused";
    frame_ = snapshot();
    return frame_;
  }

  /// One greedy joint action. The concept state shown is computed with the
  /// current intervention mask on the state where the decision is taken.
  Frame step() {
    require_live();
    const std::size_t n = env_->n_agents();
    ad::Tape tape;
    const Bound p = bind(tape, params_, false);
    const Tensor obs = env_->observations();
    const auto out = agents::agent_q(p, model_.agent, tape.constant(agents::build_inputs(model_.agent, obs, last_)),
                                     tape.constant_view(h_));
    const Tensor avail = env_->avail_actions();
    Frame f = snapshot();
    f.decided = true;
    Tensor chosen(Shape{1, n});
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = out.q.value().row(i);
      f.q.emplace_back(row.begin(), row.end());
      f.actions.push_back(agents::greedy_action(row, avail.row(i)));
      chosen[i] = row[f.actions[i]];
    }
    const Tensor state = env_->state();
    const auto ov = mixer::ProbOverride::from_mask(iv_, 1, model_.mixer.concepts);
    const auto mo = mixer::mix(p, model_.mixer, tape.constant(chosen),
                               tape.constant(Tensor(Shape{1, state.size()}, state.data)), &ov, false);
    const auto cs = mixer::concept_state(mo, 0, model_.mixer);
    f.p_pred = cs.p_pred;
    f.p = cs.p;
    f.alpha = cs.alpha;
    f.q_hat = cs.q_hat;
    f.q_tot = cs.q_tot;

    const env::StepOutcome so = env_->step(f.actions);
    h_ = out.h.value();
    last_ = f.actions;
    ++t_;
    return_ += so.reward;
    done_ = so.done;
    if (done_) mode_ = "paused";
    f.reward = so.reward;
    f.episode_return = return_;
    f.done = done_;
    f.mode = mode_;
    frame_ = f;
    return f;
  }

  void intervene(const mixer::InterventionMask& update) {
    mixer::InterventionMask next = iv_;
    for (const auto& [k, v] : update) next[k] = v;
    try {
      mixer::validate_intervention(next, model_.mixer.concepts);
    } catch (const Error& e) {
      throw RequestError("range_error", e.what());
    }
    iv_ = std::move(next);
    frame_.intervention = iv_;
  }

  void clear_interventions() {
    iv_.clear();
    frame_.intervention = iv_;
  }

  void start_auto(double ms) {
    require_live();
    if (!(ms >= 0.0 && ms <= 3.6e6)) throw RequestError("range_error", "auto: ms_per_step must lie in [0, 3600000]");
    mode_ = "auto";
    ms_per_step_ = ms;
    frame_.mode = mode_;
  }

  void pause() {
    mode_ = "paused";
    frame_.mode = mode_;
  }

  /// Dispatches one request object and returns the reply object.
  json handle(const json& req) {
    const json id = req.is_object() && req.contains("id") ? req["id"] : json(nullptr);
    try {
      if (!req.is_object()) throw RequestError("bad_request", "request must be a JSON object");
      if (req.value("schema", "") != kSchema)
        throw RequestError("schema_mismatch", std::string("expected schema ") + kSchema);
      if (!req.contains("cmd") || !req["cmd"].is_string()) throw RequestError("bad_request", "missing string field cmd");
      const std::string cmd = req["cmd"];
      json args = req.value("args", json::object());
      if (args.is_null()) args = json::object();
      if (!args.is_object()) throw RequestError("bad_request", "args must be an object");
      auto reply_frame = [&](const Frame& f) {
        json r = encode_frame(f);
        r["id"] = id;
        r["ok"] = true;
        return r;
      };
      auto ack = [&] {
        return json{{"schema", kSchema}, {"type", "ack"}, {"id", id}, {"ok", true}, {"cmd", cmd},
                    {"mode", mode_}, {"intervention", mask_json(iv_)}};
      };
      if (cmd == "reset") {
        std::uint64_t seed = 0;
        if (args.contains("seed")) {
          if (!args["seed"].is_number_unsigned()) throw RequestError("bad_argument", "reset: seed must be a non-negative integer");
          seed = args["seed"].get<std::uint64_t>();
        }
        return reply_frame(reset(seed));
      }
      if (cmd == "step") return reply_frame(step());
      if (cmd == "get_state") {
        if (!active_) throw RequestError("no_episode", "no active episode; send reset first");
        return reply_frame(frame_);
      }
      if (cmd == "auto") {
        if (!args.contains("ms_per_step") || !args["ms_per_step"].is_number())
          throw RequestError("bad_argument", "auto: ms_per_step must be a number");
        start_auto(args["ms_per_step"].get<double>());
        return ack();
      }
      if (cmd == "pause") {
        pause();
        return ack();
      }
      if (cmd == "intervene") {
        mixer::InterventionMask update;
        for (const auto& [k, v] : args.items()) {
          std::size_t idx = 0;
          const auto res = std::from_chars(k.data(), k.data() + k.size(), idx);
          if (k.empty() || res.ptr != k.data() + k.size())
            throw RequestError("bad_argument", "intervene: concept index \"" + k + "\" is not an integer");
          if (!v.is_number()) throw RequestError("bad_argument", "intervene: value for concept " + k + " must be a number");
          update[idx] = v.get<double>();
        }
        if (update.empty()) throw RequestError("bad_argument", "intervene: no concepts given");
        intervene(update);
        return ack();
      }
      if (cmd == "clear_interventions") {
        clear_interventions();
        return ack();
      }
      throw RequestError("unknown_command", "unknown command \"" + cmd + "\"");
    } catch (const RequestError& e) {
      return error_reply(id, e.code, e.what());
    } catch (const json::exception& e) {
      return error_reply(id, "bad_argument", e.what());
    }
  }

  static json error_reply(const json& id, const std::string& code, const std::string& msg) {
    return {{"schema", kSchema}, {"type", "error"}, {"id", id}, {"ok", false}, {"error", {{"code", code}, {"message", msg}}}};
  }

 private:
  static json mask_json(const mixer::InterventionMask& iv) {
    json j = json::object();
    for (const auto& [k, v] : iv) j[std::to_string(k)] = v;
    return j;
  }

  void require_live() const {
    if (!active_) throw RequestError("no_episode", "no active episode; send reset first");
    if (done_) throw RequestError("episode_done", "episode finished; send reset to start another");
  }

  Frame snapshot() const {
    Frame f;
    f.seed = seed_;
    f.t = t_;
    f.mode = mode_;
    f.episode_return = return_;
    f.done = done_;
    f.intervention = iv_;
    const Tensor l = env_->labels();
    f.labels = l.data;
    if (const auto* lbf = dynamic_cast<const env::LbfEnv*>(env_.get())) {
      f.grid.width = lbf->config().grid_w;
      f.grid.height = lbf->config().grid_h;
      for (const auto& a : lbf->lbf_state().agents) f.grid.agents.push_back({a.pos.x, a.pos.y, a.level});
      for (const auto& d : lbf->lbf_state().foods) f.grid.foods.push_back({d.pos.x, d.pos.y, d.level, d.alive});
    }
    return f;
  }

  RunConfig cfg_;
  ParamSet params_;
  std::unique_ptr<env::Environment> env_;
  training::Model model_;
  Tensor h_;
  std::vector<std::size_t> last_;
  mixer::InterventionMask iv_;
  std::uint64_t seed_ = 0;
  std::size_t t_ = 0;
  double return_ = 0.0;
  bool done_ = false;
  bool active_ = false;
  std::string mode_ = "paused";
  double ms_per_step_ = 0.0;
  Frame frame_;
};

// ---------------------------------------------------------------------------
// Wire format: "<decimal byte length>\n<json text>"

inline std::string encode_record(const json& j) {
  const std::string body = j.dump();
  return std::to_string(body.size()) + "\n" + body;
}

/// Incremental decoder for the record stream.
class RecordReader {
 public:
  static constexpr std::size_t kMaxRecord = 1 << 20;

  void feed(const char* data, std::size_t n) { buf_.append(data, n); }

  /// Next complete record body, if any. Throws on a malformed length line.
  std::optional<std::string> next() {
    const auto nl = buf_.find('\n');
    if (nl == std::string::npos) {
      if (buf_.size() > 20) throw Error("bridge: length prefix too long");
      return std::nullopt;
    }
    std::size_t len = 0;
    const auto res = std::from_chars(buf_.data(), buf_.data() + nl, len);
    if (nl == 0 || res.ptr != buf_.data() + nl) throw Error("bridge: malformed length prefix");
    if (len > kMaxRecord) throw Error("bridge: record of " + std::to_string(len) + " bytes exceeds limit");
    if (buf_.size() < nl + 1 + len) return std::nullopt;
    std::string body = buf_.substr(nl + 1, len);
    buf_.erase(0, nl + 1 + len);
    return body;
  }

 private:
  std::string buf_;
};

/// Parses one record body and runs it through the session.
inline json dispatch(Session& s, const std::string& body) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error& e) {
    return Session::error_reply(nullptr, "parse_error", e.what());
  }
  return s.handle(req);
}

// ---------------------------------------------------------------------------
// TCP service

inline bool send_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t k = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (k <= 0) return false;
    off += static_cast<std::size_t>(k);
  }
  return true;
}

struct ServeOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
  std::size_t max_clients = 0;  // stop after this many sessions (0 = forever)
  std::ostream* log = nullptr;
  std::function<void(std::uint16_t)> on_listen;  // receives the bound port
};

/// Serves one client at a time; every connection gets a fresh session.
/// While a session is in auto mode, steps are taken on a timer and frames
/// pushed unsolicited (id null).
inline void serve(const runio::Checkpoint& ckpt, const ServeOptions& opt) {
  const int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (lfd < 0) throw Error(std::string("bridge: socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(opt.port);
  if (::inet_pton(AF_INET, opt.host.c_str(), &addr.sin_addr) != 1) {
    ::close(lfd);
    throw Error("bridge: invalid host " + opt.host);
  }
  if (::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(lfd, 1) < 0) {
    const std::string err = std::strerror(errno);
    ::close(lfd);
    throw Error("bridge: cannot listen on " + opt.host + ":" + std::to_string(opt.port) + ": " + err);
  }
  socklen_t alen = sizeof addr;
  ::getsockname(lfd, reinterpret_cast<sockaddr*>(&addr), &alen);
  const std::uint16_t bound = ntohs(addr.sin_port);
  if (opt.log) *opt.log << "bridge listening on " << opt.host << ":" << bound << std::endl;
  if (opt.on_listen) opt.on_listen(bound);

  for (std::size_t served = 0; opt.max_clients == 0 || served < opt.max_clients; ++served) {
    const int fd = ::accept(lfd, nullptr, nullptr);
    if (fd < 0) continue;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    Session session = Session::from_checkpoint(ckpt);
    RecordReader reader;
    using clock = std::chrono::steady_clock;
    auto next_auto = clock::now();
    bool open = true;
    while (open) {
      int timeout = -1;
      if (session.mode() == "auto") {
        const auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(next_auto - clock::now()).count();
        timeout = static_cast<int>(std::max<long long>(0, wait));
      }
      pollfd p{fd, POLLIN, 0};
      const int ready = ::poll(&p, 1, timeout);
      if (ready == 0 && session.mode() == "auto") {
        json frame;
        try {
          frame = encode_frame(session.step());
          frame["id"] = nullptr;
          frame["ok"] = true;
        } catch (const RequestError& e) {
          session.pause();
          frame = Session::error_reply(nullptr, e.code, e.what());
        }
        open = send_all(fd, encode_record(frame));
        next_auto = clock::now() + std::chrono::microseconds(static_cast<long long>(session.ms_per_step() * 1000));
        continue;
      }
      if (ready < 0) break;
      char buf[4096];
      const ssize_t k = ::recv(fd, buf, sizeof buf, 0);
      if (k <= 0) break;
      reader.feed(buf, static_cast<std::size_t>(k));
      try {
        while (auto body = reader.next()) {
          const bool was_auto = session.mode() == "auto";
          const json reply = dispatch(session, *body);
          if (!send_all(fd, encode_record(reply))) {
            open = false;
            break;
          }
          if (!was_auto && session.mode() == "auto") next_auto = clock::now();
        }
      } catch (const Error& e) {
        // Framing is lost; report and drop the connection.
        send_all(fd, encode_record(Session::error_reply(nullptr, "framing_error", e.what())));
        open = false;
      }
    }
    ::close(fd);
    if (opt.log) *opt.log << "bridge client disconnected" << std::endl;
  }
  ::close(lfd);
}

}  // namespace cmq::bridge
