#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "cmq/env.hpp"
#include "cmq/mixer.hpp"

namespace cmq {

enum class EnvKind { lbf, matrix };

struct EnvSection {
  EnvKind kind = EnvKind::lbf;
  env::LbfConfig lbf;
  env::MatrixGame matrix{2, 2, {8, 3, 3, 0}};

  std::unique_ptr<env::Environment> make() const {
    if (kind == EnvKind::lbf) return std::make_unique<env::LbfEnv>(lbf);
    return std::make_unique<env::MatrixGameEnv>(matrix);
  }
  friend bool operator==(const EnvSection& a, const EnvSection& b) {
    return a.kind == b.kind && a.lbf.grid_w == b.lbf.grid_w && a.lbf.grid_h == b.lbf.grid_h &&
           a.lbf.n_agents == b.lbf.n_agents && a.lbf.n_foods == b.lbf.n_foods &&
           a.lbf.max_agent_level == b.lbf.max_agent_level && a.lbf.episode_limit == b.lbf.episode_limit &&
           a.lbf.view_range == b.lbf.view_range && a.lbf.coop_penalty == b.lbf.coop_penalty &&
           a.lbf.force_coop == b.lbf.force_coop && a.matrix.n_agents == b.matrix.n_agents &&
           a.matrix.n_actions == b.matrix.n_actions && a.matrix.payoff == b.matrix.payoff;
  }
};

struct AgentSection {
  std::size_t hidden = 64;
  friend bool operator==(const AgentSection&, const AgentSection&) = default;
};

struct MixerSection {
  mixer::MixerKind kind = mixer::MixerKind::cmq;
  std::size_t concepts = 16;
  std::size_t embed_dim = 64;
  std::size_t attn_dim = 64;
  std::size_t bias_hidden = 32;
  friend bool operator==(const MixerSection&, const MixerSection&) = default;
};

struct TrainSection {
  double gamma = 0.99;
  double lr = 0.0005;
  double rms_alpha = 0.99;
  double rms_eps = 1e-5;
  double grad_clip = 10.0;
  std::size_t batch_size = 32;
  std::size_t buffer_size = 5000;   // episodes
  std::size_t target_interval = 200;  // episodes between target syncs
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_decay_steps = 50000;
  double intervention_prob = 0.25;  // random concept interventions while training
  double concept_loss_weight = 0.1;
  std::size_t warmup_episodes = 100;
  std::size_t total_steps = 200000;
  std::size_t eval_interval = 2000;  // env steps
  std::size_t eval_episodes = 32;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  friend bool operator==(const TrainSection&, const TrainSection&) = default;
};

struct RunConfig {
  EnvSection env;
  AgentSection agent;
  MixerSection mixer;
  TrainSection training;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  mixer::MixerConfig mixer_config(std::size_t n_agents, std::size_t state_dim) const {
    return {mixer.concepts, mixer.embed_dim, mixer.attn_dim, mixer.bias_hidden, n_agents, state_dim};
  }
};

}  // namespace cmq
