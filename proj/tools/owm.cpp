// Command-line entry point: dataset generation, training, evaluation,
// sweeps, feature analysis and gradient checks.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "owm/analysis.hpp"
#include "owm/config.hpp"
#include "owm/dataset.hpp"
#include "owm/gradsuite.hpp"
#include "owm/policy.hpp"
#include "owm/probes.hpp"
#include "owm/sweep.hpp"
#include "owm/train.hpp"

namespace fs = std::filesystem;
using namespace owm;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<envsim::TaskId> parse_tasks(const std::string& list) {
  std::vector<envsim::TaskId> out;
  for (const auto& name : config::detail::split(list, ',')) {
    try {
      out.push_back(envsim::parse_task(name).id);
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("--tasks: at least one task required");
  return out;
}

/// Config file (optional) plus `key=value` overrides, in that order.
config::RunConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  config::RunConfig c = path.empty() ? config::RunConfig{} : config::RunConfig::load(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    c.set(config::detail::trim(kv.substr(0, eq)), config::detail::trim(kv.substr(eq + 1)));
  }
  c.model();  // validate the combination up front
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path, text);
}

// ---------------------------------------------------------------- commands

struct GenData {
  std::string tasks = "push", out;
  int episodes = 200, frame_size = 32;
  std::uint64_t seed = 0;

  void run() const {
    if (episodes < 0) throw UsageError("--episodes must be >= 0");
    const auto n = dataset::generate_dataset(parse_tasks(tasks), episodes, seed, out, frame_size);
    std::cout << "wrote " << n << " episodes to " << out << "\n";
  }
};

struct Train {
  std::string data, config, out, resume;
  std::vector<std::string> set;
  bool quiet = false;

  void run() const {
    const auto cfg = build_config(config, set);
    const auto episodes = dataset::load(data);
    const int total = static_cast<int>(cfg.get_int("steps"));
    auto on_step = [&](int step, const train::LossValues& l) {
      if (!quiet && (step % 100 == 0 || step == total)) {
        std::printf("step %d loss %.5f action %.5f\n", step, l.total, l.action);
        std::fflush(stdout);
      }
    };
    std::optional<fs::path> from;
    if (!resume.empty()) from = resume;
    const auto trainer = train::train_to(cfg, episodes, out, from, on_step);
    std::cout << "checkpoint " << train::RunPaths{out}.checkpoint().string() << " at step " << trainer.current_step()
              << "\n";
  }
};

struct Eval {
  std::string ckpt, tasks, out;
  int episodes = -1, infer_ah = -1, replan_step = -1, max_steps = -1;
  std::int64_t seed = -1;
  bool expert = false, random = false;

  void run() const {
    if (expert && random) throw UsageError("--expert and --random are exclusive");
    if (ckpt.empty() && !expert && !random) throw UsageError("eval needs --ckpt, --expert or --random");
    config::RunConfig cfg;
    envsim::Policy policy;
    if (!ckpt.empty() && !expert && !random) {
      const auto snap = train::load_snapshot(io::load(ckpt));
      cfg = snap.config;
      policy = model_policy(snap.params, cfg.model(), static_cast<int>(cfg.get_int("flow_steps")),
                            static_cast<std::uint64_t>(cfg.get_int("seed")));
    }
    auto settings = cfg.eval_settings();
    if (infer_ah >= 0) settings.infer_ah = infer_ah;
    if (replan_step >= 0) settings.replan_step = replan_step;
    if (max_steps >= 0) settings.max_steps = max_steps;
    if (!policy) {
      settings.trained_horizon = std::max(settings.trained_horizon, settings.infer_ah);
      policy = expert ? envsim::expert_policy() : envsim::random_policy(static_cast<std::uint64_t>(cfg.get_int("seed")));
    }
    try {
      settings.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    const int n = episodes >= 0 ? episodes : static_cast<int>(cfg.get_int("eval_episodes"));
    const auto s = seed >= 0 ? static_cast<std::uint64_t>(seed) : static_cast<std::uint64_t>(cfg.get_int("eval_seed"));
    const auto report = envsim::evaluate(policy, tasks.empty() ? cfg.tasks() : parse_tasks(tasks), n, s, settings);
    std::printf("%-12s %8s %8s\n", "task", "episodes", "success");
    for (const auto& t : report.tasks()) {
      int count = 0;
      for (const auto& r : report.rows) count += r.task == t ? 1 : 0;
      std::printf("%-12s %8d %8.3f\n", t.c_str(), count, report.success_rate(t));
    }
    std::printf("%-12s %8s %8.3f\n", "mean", "", report.macro_average());
    if (!out.empty()) write_text(out, report.csv());
  }
};

struct Sweep {
  std::string axis, grid, config, seeds = "0", out;
  std::vector<std::string> set;

  void run() const {
    sweep::SweepSpec spec;
    spec.axis = axis;
    if (std::find(sweep::axes().begin(), sweep::axes().end(), axis) == sweep::axes().end()) {
      throw UsageError("unknown sweep axis '" + axis + "' (valid: " + sweep::axes_list() + ")");
    }
    spec.grid = config::detail::split(grid, ',');
    for (const auto& s : config::detail::split(seeds, ',')) spec.seeds.push_back(std::stoull(s));
    spec.base = build_config(config, set);
    sweep::run(
        spec, [&](const std::string& csv) { write_text(out, csv); },
        [](const std::string& line) {
          std::cout << line << "\n";
          std::cout.flush();
        });
    std::cout << "wrote " << out << "\n";
  }
};

struct Analyze {
  std::string ckpt, data, mode = "tokens", out = ".";
  double relative_time = 0.5;
  std::string ks = "1,3,6,12,256";

  void run() const {
    fs::create_directories(out);
    if (mode == "tokens") return tokens();
    if (mode != "fisher" && mode != "pca") throw UsageError("--mode must be fisher, pca or tokens");
    if (ckpt.empty() || data.empty()) throw UsageError("--mode " + mode + " needs --ckpt and --data");
    const auto snap = train::load_snapshot(io::load(ckpt));
    const auto probes = analysis::probe_features(snap.params, snap.config.model(), dataset::load(data), relative_time);
    if (mode == "fisher") {
      std::string csv = "view,regime,samples,classes,trace_between,trace_within,raw_trace_between,raw_trace_within,fisher_ratio\n";
      for (const auto& p : probes) {
        for (const auto& [regime, feats] : {std::pair{"before", &p.before}, std::pair{"after", &p.after}}) {
          const auto s = analysis::fisher_ratio(*feats);
          std::vector<int> classes = feats->labels;
          std::sort(classes.begin(), classes.end());
          classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
          csv += std::string(view_name(p.view)) + "," + regime + "," + std::to_string(feats->labels.size()) + "," +
                 std::to_string(classes.size()) + "," + train::fmt(s.trace_between) + "," +
                 train::fmt(s.trace_within) + "," + train::fmt(s.raw_trace_between) + "," +
                 train::fmt(s.raw_trace_within) + "," + train::fmt(s.fisher_ratio) + "\n";
        }
      }
      write_text(fs::path(out) / "fisher.csv", csv);
      std::cout << csv;
      return;
    }
    std::string csv = "view,regime,sample,label,pc1,pc2\n";
    for (const auto& p : probes) {
      for (const auto& [regime, feats] : {std::pair{"before", &p.before}, std::pair{"after", &p.after}}) {
        const int dims = std::min(2, feats->features.dim(1));
        const auto r = analysis::pca_project(feats->features, dims);
        if (r.degenerate_components > 0) {
          std::cerr << "warning: " << view_name(p.view) << "/" << regime << ": " << r.degenerate_components
                    << " degenerate component(s) reported as zeros\n";
        }
        Array<double> xy(Shape{r.projected.dim(0), 2}, 0.0);
        for (int i = 0; i < xy.dim(0); ++i)
          for (int j = 0; j < dims; ++j) xy[static_cast<std::size_t>(i * 2 + j)] = r.projected[static_cast<std::size_t>(i * dims + j)];
        for (int i = 0; i < xy.dim(0); ++i) {
          csv += std::string(view_name(p.view)) + "," + regime + "," + std::to_string(i) + "," +
                 std::to_string(feats->labels[static_cast<std::size_t>(i)]) + "," +
                 train::fmt(xy[static_cast<std::size_t>(i * 2)]) + "," + train::fmt(xy[static_cast<std::size_t>(i * 2 + 1)]) + "\n";
        }
        const std::string tag = std::string(regime) + "_" + std::string(view_name(p.view));
        write_text(fs::path(out) / ("pca_" + tag + ".svg"),
                   analysis::scatter_svg(xy, feats->labels, "PCA " + tag + " (colour = task)"));
      }
    }
    write_text(fs::path(out) / "pca.csv", csv);
    std::cout << "wrote " << (fs::path(out) / "pca.csv").string() << " and SVG plots\n";
  }

  void tokens() const {
    std::string csv = "tokens_per_view,views,latent_steps,action_steps,infer_tokens\n";
    for (const auto& k : config::detail::split(ks, ',')) {
      const auto b = analysis::reference_budget(std::stoi(k));
      csv += k + "," + std::to_string(b.views) + "," + std::to_string(b.latent_steps) + "," +
             std::to_string(b.action_steps) + "," + std::to_string(analysis::inference_token_count(b)) + "\n";
    }
    write_text(fs::path(out) / "tokens.csv", csv);
    std::cout << csv;
  }
};

struct GradCheck {
  std::string scope = "all", fault;
  int probes = 16;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;

  int run() const {
    gradsuite::Options opt;
    opt.probes = probes;
    opt.tolerance = tolerance;
    opt.seed = seed;
    opt.fault = fault;
    gradsuite::Scope sc;
    try {
      sc = gradsuite::parse_scope(scope);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    if (!fault.empty()) {
      bool matched = false;
      for (const auto& k : gradsuite::cases(sc, seed)) matched = matched || k.name.find(fault) != std::string::npos;
      if (!matched) throw UsageError("--inject-fault '" + fault + "' matches no case in scope " + scope);
    }
    const numerics::GradReport* worst = nullptr;
    const auto reports = gradsuite::run(sc, opt);
    int failed = 0;
    for (const auto& r : reports) {
      std::printf("%-44s %4d probes  max rel err %.3e  %s\n", r.op_name.c_str(), r.probe_count, r.max_relative_error,
                  r.passed ? "ok" : "FAIL");
      if (!worst || r.max_relative_error > worst->max_relative_error) worst = &r;
      failed += r.passed ? 0 : 1;
    }
    if (worst) {
      std::printf("worst: %s (%.3e, tolerance %.1e)\n", worst->op_name.c_str(), worst->max_relative_error, tolerance);
    }
    if (failed) {
      std::printf("%d of %zu checks failed\n", failed, reports.size());
      return 1;
    }
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-token world-model policy laboratory"};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "generate expert episodes");
  g->add_option("--tasks", gen.tasks, "comma-separated task names")->capture_default_str();
  g->add_option("--episodes", gen.episodes, "episodes per task")->capture_default_str();
  g->add_option("--seed", gen.seed, "dataset seed")->capture_default_str();
  g->add_option("--frame-size", gen.frame_size, "rendered frame side in pixels")->capture_default_str();
  g->add_option("--out", gen.out, "output container file")->required();

  Train tr;
  auto* t = app.add_subcommand("train", "train a model from a dataset");
  t->add_option("--data", tr.data, "dataset container")->required();
  t->add_option("--config", tr.config, "key=value config file");
  t->add_option("--set", tr.set, "config override key=value (repeatable)");
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--resume", tr.resume, "checkpoint to continue from");
  t->add_flag("--quiet", tr.quiet, "suppress progress lines");

  Eval ev;
  auto* e = app.add_subcommand("eval", "receding-horizon evaluation");
  e->add_option("--ckpt", ev.ckpt, "checkpoint file");
  e->add_option("--tasks", ev.tasks, "tasks (default: the checkpoint's)");
  e->add_option("--episodes", ev.episodes, "rollouts per task");
  e->add_option("--infer-ah", ev.infer_ah, "queried chunk length");
  e->add_option("--replan-step", ev.replan_step, "actions executed per query");
  e->add_option("--max-steps", ev.max_steps, "rollout step cap");
  e->add_option("--seed", ev.seed, "first reset seed");
  e->add_option("--out", ev.out, "per-rollout CSV");
  e->add_flag("--expert", ev.expert, "use the scripted expert instead of a model");
  e->add_flag("--random", ev.random, "use uniformly random actions");

  Sweep sw;
  auto* s = app.add_subcommand("sweep", "train and evaluate across one ablation axis");
  s->add_option("--axis", sw.axis, "axis: " + sweep::axes_list())->required();
  s->add_option("--grid", sw.grid, "comma-separated axis values")->required();
  s->add_option("--config", sw.config, "base config file");
  s->add_option("--set", sw.set, "base config override key=value (repeatable)");
  s->add_option("--seeds", sw.seeds, "comma-separated training seeds")->capture_default_str();
  s->add_option("--out", sw.out, "output CSV")->required();

  Analyze an;
  auto* a = app.add_subcommand("analyze", "Fisher / PCA probes and token accounting");
  a->add_option("--ckpt", an.ckpt, "checkpoint file");
  a->add_option("--data", an.data, "dataset container");
  a->add_option("--mode", an.mode, "fisher, pca or tokens")->capture_default_str();
  a->add_option("--out", an.out, "output directory")->capture_default_str();
  a->add_option("--relative-time", an.relative_time, "probe frame position within each episode")->capture_default_str();
  a->add_option("--k", an.ks, "tokens-per-view values for --mode tokens")->capture_default_str();

  GradCheck gc;
  auto* c = app.add_subcommand("gradcheck", "reverse-mode vs finite-difference gradient suite");
  c->add_option("--scope", gc.scope, "all, pooling, flow, generator, encoder or ops")->capture_default_str();
  c->add_option("--inject-fault", gc.fault, "double the gradient of cases whose name contains this text");
  c->add_option("--probes", gc.probes, "probe points per case")->capture_default_str();
  c->add_option("--tolerance", gc.tolerance, "maximum relative error")->capture_default_str();
  c->add_option("--seed", gc.seed, "probe seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 2;
  }

  try {
    if (*g) gen.run();
    if (*t) tr.run();
    if (*e) ev.run();
    if (*s) sw.run();
    if (*a) an.run();
    if (*c) return gc.run();
    return 0;
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 2;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
}
