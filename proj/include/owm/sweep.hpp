#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "owm/analysis.hpp"
#include "owm/policy.hpp"
#include "owm/train.hpp"

// Train-from-scratch experiment runs and the ablation sweep driver.
namespace owm::sweep {

struct RunResult {
  std::vector<std::pair<std::string, double>> success;  // per task
  double success_mean = 0;
  double final_loss = 0;  // mean total loss over the last min(100, steps) steps
  long long token_count = 0;
  double wall_seconds = 0;
  bool diverged = false;
  std::string message;
};

/// Tokens of one inference query under a run configuration.
inline long long run_token_count(const config::RunConfig& c) {
  const int h = static_cast<int>(c.get_int("h"));
  return analysis::inference_token_count(
      {kViewCount, static_cast<int>(c.get_int("tokens_per_view")), c.get_bool("latent_branch") ? h : 0, h});
}

/// Trains under `cfg` on `episodes`, then evaluates with the configured
/// receding-horizon protocol. Numerical divergence is reported, not thrown.
inline RunResult run_experiment(const config::RunConfig& cfg, const std::vector<envsim::Episode>& episodes,
                                const std::function<void(const std::string&)>& log = {}) {
  RunResult r;
  r.token_count = run_token_count(cfg);
  const auto start = std::chrono::steady_clock::now();
  try {
    train::Trainer trainer(cfg, episodes);
    const int steps = trainer.settings().steps;
    const int tail = std::min(100, steps);
    double acc = 0;
    while (trainer.current_step() < steps) {
      const auto l = trainer.step();
      if (trainer.current_step() > steps - tail) acc += l.total;
      if (log && trainer.current_step() % 500 == 0) {
        log("  step " + std::to_string(trainer.current_step()) + " loss " + train::fmt(l.total));
      }
    }
    r.final_loss = acc / tail;
    const auto policy = model_policy(trainer.params(), trainer.model(), static_cast<int>(cfg.get_int("flow_steps")),
                                     static_cast<std::uint64_t>(cfg.get_int("seed")));
    const auto report = envsim::evaluate(policy, cfg.tasks(), static_cast<int>(cfg.get_int("eval_episodes")),
                                         static_cast<std::uint64_t>(cfg.get_int("eval_seed")), cfg.eval_settings());
    for (const auto& t : report.tasks()) r.success.push_back({t, report.success_rate(t)});
    r.success_mean = report.macro_average();
  } catch (const NumericalError& e) {
    r.diverged = true;
    r.message = e.what();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline const std::vector<std::string>& axes() {
  static const std::vector<std::string> a{"tokens_per_view", "pooling_branch", "fusion_temperature",
                                          "loss_metric",     "latent_branch",  "latent_loss",
                                          "horizon",         "latent_target_space"};
  return a;
}

inline std::string axes_list() {
  std::string s;
  for (const auto& a : axes()) s += (s.empty() ? "" : ", ") + a;
  return s;
}

/// `base` with one axis set to `value`.
inline config::RunConfig apply_axis(config::RunConfig c, const std::string& axis, const std::string& value) {
  auto on_off = [&](const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("sweep axis '" + axis + "': expected on/off, got '" + v + "'");
  };
  if (axis == "tokens_per_view") {
    c.set("tokens_per_view", value);
  } else if (axis == "pooling_branch") {
    c.set("branches", value == "all" ? "max,sum,learn" : value);
  } else if (axis == "fusion_temperature") {
    c.set("fusion_tau", value);
    if (!(c.get_real("fusion_tau") > 0)) throw ConfigError("sweep axis 'fusion_temperature': values must be positive");
  } else if (axis == "loss_metric") {
    c.set("metric", value);
  } else if (axis == "latent_branch") {
    c.set("latent_branch", on_off(value) ? "true" : "false");
  } else if (axis == "latent_loss") {
    if (!on_off(value)) {
      c.set("lambda_latent", "0");
      for (const char* k : {"lambda_r", "lambda_w1", "lambda_w2"}) c.set(k, "auto");
    }
  } else if (axis == "horizon") {
    c.set("h", value);
    const auto h = c.get_int("h");
    if (h < 1) throw ConfigError("sweep axis 'horizon': values must be >= 1");
    if (c.get_int("infer_ah") > h) c.set("infer_ah", std::to_string(h));
    if (c.get_int("replan_step") > c.get_int("infer_ah")) c.set("replan_step", c.get("infer_ah"));
  } else if (axis == "latent_target_space") {
    c.set("latent_target_space", value);
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (valid: " + axes_list() + ")");
  }
  c.model();  // reject invalid combinations before any training starts
  return c;
}

struct SweepSpec {
  std::string axis;
  std::vector<std::string> grid;
  std::vector<std::uint64_t> seeds;
  config::RunConfig base;
};

/// One row per (grid value, seed): trains from scratch, evaluates, and
/// appends to the CSV returned. `on_row` sees the CSV after each row.
inline std::string run(const SweepSpec& spec, const std::function<void(const std::string&)>& on_row = {},
                       const std::function<void(const std::string&)>& log = {}) {
  if (spec.grid.empty()) throw ConfigError("sweep: empty grid");
  if (spec.seeds.empty()) throw ConfigError("sweep: no seeds");
  std::vector<config::RunConfig> configs;
  for (const auto& v : spec.grid) configs.push_back(apply_axis(spec.base, spec.axis, v));

  const auto tasks = spec.base.tasks();
  const auto episodes =
      envsim::generate_episodes(tasks, static_cast<int>(spec.base.get_int("episodes")),
                                static_cast<std::uint64_t>(spec.base.get_int("data_seed")), spec.base.image_size());
  std::string csv = "axis,value,seed";
  for (auto id : tasks) csv += ",success_" + envsim::task(id).name;
  csv += ",success_mean,final_loss,token_count,wall_time_s,status\n";
  for (std::size_t g = 0; g < configs.size(); ++g) {
    for (auto seed : spec.seeds) {
      auto c = configs[g];
      c.set("seed", std::to_string(seed));
      if (log) log(spec.axis + "=" + spec.grid[g] + " seed=" + std::to_string(seed));
      std::vector<envsim::Episode> local;
      const std::vector<envsim::Episode>* data = &episodes;
      if (c.image_size() != spec.base.image_size()) {
        local = envsim::generate_episodes(tasks, static_cast<int>(c.get_int("episodes")),
                                          static_cast<std::uint64_t>(c.get_int("data_seed")), c.image_size());
        data = &local;
      }
      const RunResult r = run_experiment(c, *data, log);
      csv += spec.axis + "," + spec.grid[g] + "," + std::to_string(seed);
      for (auto id : tasks) {
        double s = 0;
        for (const auto& [name, v] : r.success)
          if (name == envsim::task(id).name) s = v;
        csv += "," + train::fmt(s);
      }
      char wall[32];
      std::snprintf(wall, sizeof wall, "%.1f", r.wall_seconds);
      csv += "," + train::fmt(r.success_mean) + "," + (r.diverged ? std::string("nan") : train::fmt(r.final_loss)) +
             "," + std::to_string(r.token_count) + "," + wall + "," + (r.diverged ? "diverged" : "ok") + "\n";
      if (on_row) on_row(csv);
    }
  }
  return csv;
}

}  // namespace owm::sweep
