// Command-line front end: train, eval, trace, gradcheck, sweep, serve.

#include <CLI11.hpp>
#include <iostream>

#include "cmq/bridge.hpp"
#include "cmq/experiments.hpp"
#include "cmq/runtime.hpp"

namespace {

using namespace cmq;
namespace fs = std::filesystem;

struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::size_t steps = 0;
  std::string mixer;
  std::size_t concepts = 0;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "INI run configuration (defaults apply to absent keys)")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seeds, "Seed(s) to run; defaults to the config's seed list");
  app->add_option("--steps", o.steps, "Override training.total_steps");
  app->add_option("--mixer", o.mixer, "Override mixer.kind")->check(CLI::IsMember({"cmq", "vdn"}));
  app->add_option("--concepts", o.concepts, "Override mixer.concepts");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : runio::load_config(o.config);
  if (!o.seeds.empty()) c.training.seeds = o.seeds;
  if (o.steps) c.training.total_steps = o.steps;
  if (!o.mixer.empty()) c.mixer.kind = runio::parse_mixer_kind(o.mixer, "--mixer");
  if (o.concepts) c.mixer.concepts = o.concepts;
  // Re-validate through the parser so overrides get the same range checks.
  return runio::parse_config(runio::format_config(c), "command line");
}

int cmd_train(const Overrides& o, const std::string& out, std::size_t ckpt_every, bool resume) {
  const RunConfig cfg = resolve(o);
  std::vector<experiments::RunResult> results;
  for (std::uint64_t seed : cfg.training.seeds) {
    experiments::RunOptions opt;
    opt.out = fs::path(out) / ("seed_" + std::to_string(seed));
    opt.checkpoint_every = ckpt_every;
    opt.resume = resume;
    opt.log = &std::cerr;
    results.push_back(experiments::run_seed(cfg, seed, opt));
  }
  std::string summary = "seed,final_return,best_return,auc,first_step_at_0.8\n";
  for (const auto& r : results)
    summary += std::to_string(r.seed) + "," + runio::detail::fmt_double(r.final_return) + "," +
               runio::detail::fmt_double(r.best_return) + "," + runio::detail::fmt_double(r.auc) + "," +
               std::to_string(r.first_step_reaching) + "\n";
  runio::write_text(fs::path(out) / "summary.csv", summary);
  std::cout << summary;
  return 0;
}

int cmd_eval(const std::string& ckpt_path, std::uint64_t seed, std::size_t episodes, const std::string& intervene) {
  const runio::Checkpoint c = runio::load_checkpoint(ckpt_path);
  const auto env = c.config.env.make();
  const training::Model& m = c.state.learner.model;
  const ParamSet& params = c.state.learner.params;
  std::vector<std::uint64_t> seeds(episodes);
  for (std::size_t i = 0; i < episodes; ++i) seeds[i] = mix_seed(seed, i);
  const auto eps = training::rollout(*env, params, m, seeds, {});
  double mean = 0;
  for (const auto& e : eps) mean += e.episode_return() / static_cast<double>(eps.size());
  std::cout << "episodes " << episodes << "\nmean_return " << mean << "\n";
  if (m.kind != mixer::MixerKind::cmq) return 0;
  training::EvalResult er;
  training::concept_stats(params, m, eps, er);
  if (er.concept_accuracy >= 0) std::cout << "concept_accuracy " << er.concept_accuracy << "\n";
  // Concept state averaged over the visited states, with the requested
  // interventions applied to every state.
  const auto iv = runio::parse_intervention(intervene, m.mixer.concepts);
  std::vector<double> p(m.mixer.concepts), alpha(m.mixer.concepts);
  double q_tot = 0;
  std::size_t count = 0;
  for (const auto& e : eps) {
    const auto tr = runio::trace_episode(*env, params, m, e.env_seed, iv);
    for (const auto& s : tr.steps) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] += s.concepts.p[k];
        alpha[k] += s.concepts.alpha[k];
      }
      q_tot += s.q_tot;
      ++count;
    }
  }
  std::cout << "mean_q_tot " << q_tot / static_cast<double>(count) << "\n";
  for (std::size_t k = 0; k < p.size(); ++k)
    std::cout << "concept " << k << " p " << p[k] / static_cast<double>(count) << " alpha "
              << alpha[k] / static_cast<double>(count) << (iv.count(k) ? " (forced)" : "") << "\n";
  return 0;
}

int cmd_trace(const std::string& ckpt_path, std::uint64_t seed, const std::string& out, const std::string& intervene) {
  const runio::Checkpoint c = runio::load_checkpoint(ckpt_path);
  const auto env = c.config.env.make();
  const auto& m = c.state.learner.model;
  const auto iv = m.kind == mixer::MixerKind::cmq ? runio::parse_intervention(intervene, m.mixer.concepts)
                                                   : mixer::InterventionMask{};
  const auto tr = runio::trace_episode(*env, c.state.learner.params, m, seed, iv);
  fs::create_directories(out);
  runio::export_trace(tr, fs::path(out) / "trace.jsonl", fs::path(out) / "trace_embeddings.csv");
  std::cout << "wrote " << tr.steps.size() << " steps (return " << tr.episode_return << ") to " << out << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t configs, std::uint64_t seed, double tol) {
  double worst = 0;
  for (std::size_t i = 0; i < configs; ++i) {
    const auto p = experiments::make_tiny_problem(mix_seed(seed, i));
    const auto r = experiments::check_tiny_problem(p);
    std::cout << "config " << i << " max_rel_error " << r.max_error << " at " << r.worst << "\n";
    worst = std::max(worst, r.max_error);
  }
  std::cout << "worst " << worst << (worst <= tol ? " ok" : " FAILED") << "\n";
  return worst <= tol ? 0 : 1;
}

int cmd_sweep(const Overrides& o, const std::string& out, const std::vector<std::size_t>& Ks) {
  const RunConfig cfg = resolve(o);
  const auto res = experiments::sweep(cfg, Ks, cfg.training.seeds, out, &std::cerr);
  std::cout << experiments::sweep_csv(res.points);
  return 0;
}

int cmd_serve(const std::string& ckpt_path, const std::string& host, std::uint16_t port, std::size_t max_clients) {
  const runio::Checkpoint c = runio::load_checkpoint(ckpt_path);
  bridge::ServeOptions opt;
  opt.host = host;
  opt.port = port;
  opt.max_clients = max_clients;
  opt.log = &std::cerr;
  bridge::serve(c, opt);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  cmq::tune_allocator();
  CLI::App app{"Concept-bottleneck value decomposition for cooperative multi-agent RL"};
  app.require_subcommand(1);

  Overrides train_o;
  std::string train_out = "runs/train";
  std::size_t ckpt_every = 20000;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train one run per seed");
  add_overrides(train, train_o);
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--checkpoint-every", ckpt_every, "Checkpoint interval in env steps (0 = end only)");
  train->add_flag("--resume", resume, "Continue from checkpoints found in the output directory");

  std::string ckpt;
  std::uint64_t eval_seed = 1000;
  std::size_t eval_eps = 32;
  std::string intervene;
  auto* eval = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--seed", eval_seed, "Base seed for evaluation episodes");
  eval->add_option("--episodes", eval_eps, "Number of episodes")->check(CLI::PositiveNumber);
  eval->add_option("--intervene", intervene, "Forced concept probabilities, e.g. \"0=1,3=0\"");

  std::string trace_out = "runs/trace";
  auto* trace = app.add_subcommand("trace", "Export one greedy episode with concept introspection");
  trace->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  trace->add_option("--seed", eval_seed, "Environment seed");
  trace->add_option("--out", trace_out, "Output directory");
  trace->add_option("--intervene", intervene, "Forced concept probabilities, e.g. \"0=1,3=0\"");

  std::size_t gc_configs = 20;
  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full training loss");
  gc->add_option("--configs", gc_configs, "Number of random tiny configurations");
  gc->add_option("--seed", gc_seed, "Seed for the configurations");
  gc->add_option("--tolerance", gc_tol, "Maximum relative error");

  Overrides sweep_o;
  std::string sweep_out = "runs/sweep";
  std::vector<std::size_t> Ks{4, 8, 16, 32};
  auto* sw = app.add_subcommand("sweep", "Concept-count ablation");
  add_overrides(sw, sweep_o);
  sw->add_option("--out", sweep_out, "Output directory");
  sw->add_option("--k", Ks, "Concept counts to compare");

  std::string host = "127.0.0.1";
  std::uint16_t port = cmq::bridge::kDefaultPort;
  std::size_t max_clients = 0;
  auto* serve = app.add_subcommand("serve", "Live intervention session over TCP");
  serve->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  serve->add_option("--host", host, "Listen address");
  serve->add_option("--port", port, "Listen port (0 picks a free port)");
  serve->add_option("--max-clients", max_clients, "Exit after this many sessions (0 = never)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_o, train_out, ckpt_every, resume);
    if (*eval) return cmd_eval(ckpt, eval_seed, eval_eps, intervene);
    if (*trace) return cmd_trace(ckpt, eval_seed, trace_out, intervene);
    if (*gc) return cmd_gradcheck(gc_configs, gc_seed, gc_tol);
    if (*sw) return cmd_sweep(sweep_o, sweep_out, Ks);
    if (*serve) return cmd_serve(ckpt, host, port, max_clients);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
