#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "owm/container.hpp"
#include "owm/envsim.hpp"
#include "owm/model.hpp"

// Flat `key = value` run configuration. Every key is declared in
// key_specs() with its default; unknown keys are rejected.
namespace owm::config {

enum class Kind { Int, Real, Bool, Choice, Text };

struct KeySpec {
  const char* name;
  Kind kind;
  const char* default_value;
  const char* doc;
  std::vector<std::string> choices = {};
};

inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs{
      // run
      {"seed", Kind::Int, "0", "master seed; data, init, flow-time, noise and eval streams derive from it"},
      {"tasks", Kind::Text, "push", "comma-separated task names for training data and evaluation"},
      {"episodes", Kind::Int, "200", "expert episodes per task generated by sweep runs"},
      {"data_seed", Kind::Int, "0", "seed of the expert dataset generated by sweep runs"},
      // encoder
      {"image_size", Kind::Int, "32", "rendered frame side in pixels"},
      {"patch", Kind::Int, "8", "patch side in pixels"},
      {"N_target", Kind::Int, "0", "if > 0, tokens per frame; overrides image_size with patch*sqrt(N_target)"},
      {"enc_width", Kind::Int, "64", "encoder token width D (also the latent width D_z)"},
      {"enc_heads", Kind::Int, "4", "encoder attention heads"},
      {"enc_blocks", Kind::Int, "2", "encoder transformer blocks"},
      {"enc_mlp_ratio", Kind::Int, "2", "encoder MLP expansion"},
      // pooling
      {"tau", Kind::Real, "0.1", "token-softmax temperature"},
      {"fusion_tau", Kind::Real, "0", "branch-fusion temperature; 0 uses tau"},
      {"branches", Kind::Text, "max,sum,learn", "enabled pooling branches"},
      {"tokens_per_view", Kind::Int, "1", "world tokens per view and frame (k)"},
      // flow matching
      {"lambda_a", Kind::Real, "1.0", "action loss weight"},
      {"lambda_latent", Kind::Real, "0.1", "latent loss weight applied to every view"},
      {"lambda_r", Kind::Text, "auto", "per-view override of lambda_latent (auto = inherit)"},
      {"lambda_w1", Kind::Text, "auto", "per-view override of lambda_latent (auto = inherit)"},
      {"lambda_w2", Kind::Text, "auto", "per-view override of lambda_latent (auto = inherit)"},
      {"metric", Kind::Choice, "L1L1", "action/latent regression metrics", {"L1L1", "L1L2", "L2L1", "L2L2"}},
      {"time_schedule", Kind::Choice, "low_biased", "t = 1 - Beta draw (low_biased) or the raw draw (literal)",
       {"low_biased", "literal"}},
      {"time_alpha", Kind::Real, "1.5", "Beta shape a of the flow-time sampler"},
      {"time_beta", Kind::Real, "1.0", "Beta shape b of the flow-time sampler"},
      {"flow_steps", Kind::Int, "10", "Euler steps at inference"},
      // generator
      {"h", Kind::Int, "8", "future steps per query"},
      {"gen_width", Kind::Int, "64", "generator width"},
      {"gen_layers", Kind::Int, "4", "generator transformer layers"},
      {"gen_heads", Kind::Int, "4", "generator attention heads"},
      {"gen_mlp_ratio", Kind::Int, "4", "generator MLP expansion"},
      {"latent_branch", Kind::Bool, "true", "include latent queries and targets"},
      {"attention", Kind::Choice, "full", "generator attention pattern", {"full", "block_causal"}},
      {"latent_target_space", Kind::Choice, "semantic", "latent targets from pooled tokens or raw patch projections",
       {"semantic", "pixel"}},
      // training
      {"steps", Kind::Int, "3000", "optimizer steps"},
      {"batch", Kind::Int, "16", "windows per step"},
      {"lr", Kind::Real, "0.001", "AdamW learning rate"},
      {"lr_schedule", Kind::Choice, "cosine", "learning-rate schedule over the run", {"constant", "cosine"}},
      {"weight_decay", Kind::Real, "0.0001", "decoupled weight decay on matrices"},
      {"clip", Kind::Real, "1.0", "global gradient-norm bound"},
      {"check_every", Kind::Int, "100", "steps between diagnostics rows"},
      {"ckpt_every", Kind::Int, "0", "steps between intermediate checkpoints (0 = final only)"},
      // evaluation
      {"infer_ah", Kind::Int, "8", "executed chunk horizon queried from the policy"},
      {"replan_step", Kind::Int, "4", "actions executed before re-observing"},
      {"eval_episodes", Kind::Int, "50", "evaluation rollouts per task"},
      {"eval_seed", Kind::Int, "100000", "reset seed of the first evaluation rollout"},
      {"max_steps", Kind::Int, "0", "rollout step cap (0 = task default)"},
  };
  return specs;
}

inline const KeySpec& spec(const std::string& key) {
  for (const auto& s : key_specs())
    if (key == s.name) return s;
  throw ConfigError("unknown config key '" + key + "'");
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_real(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

}  // namespace detail

/// Canonical text for `value` under `key`, or ConfigError naming the key.
inline std::string canonicalize(const std::string& key, const std::string& value) {
  const KeySpec& s = spec(key);
  const std::string v = detail::trim(value);
  auto bad = [&](const std::string& why) {
    return ConfigError("config key '" + key + "': " + why + " (got '" + value + "')");
  };
  switch (s.kind) {
    case Kind::Int: {
      long long x = 0;
      auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw bad("expected an integer");
      return std::to_string(x);
    }
    case Kind::Real: {
      double x = 0;
      auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(x)) throw bad("expected a finite number");
      return detail::format_real(x);
    }
    case Kind::Bool: {
      if (v == "true" || v == "1" || v == "on") return "true";
      if (v == "false" || v == "0" || v == "off") return "false";
      throw bad("expected true or false");
    }
    case Kind::Choice: {
      std::string u = v;
      if (key == std::string("metric")) {
        u.erase(std::remove(u.begin(), u.end(), '/'), u.end());
        std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
        if (u == "L1" || u == "L2") u += u;
      }
      if (std::find(s.choices.begin(), s.choices.end(), u) == s.choices.end()) {
        std::string opts;
        for (const auto& c : s.choices) opts += (opts.empty() ? "" : ", ") + c;
        throw bad("expected one of " + opts);
      }
      return u;
    }
    case Kind::Text: {
      if (key == std::string("lambda_r") || key == std::string("lambda_w1") || key == std::string("lambda_w2")) {
        if (v == "auto") return v;
        return canonicalize("lambda_latent", v);
      }
      if (key == std::string("branches")) {
        std::string out;
        for (const auto& b : detail::split(v, ',')) {
          if (b != "max" && b != "sum" && b != "learn") throw bad("branches must be drawn from max,sum,learn");
          if (out.find(b) == std::string::npos) out += (out.empty() ? "" : ",") + b;
        }
        if (out.empty()) throw bad("at least one branch is required");
        return out;
      }
      if (key == std::string("tasks")) {
        std::string out;
        for (const auto& t : detail::split(v, ',')) {
          try {
            envsim::parse_task(t);
          } catch (const InputError& e) {
            throw bad(e.what());
          }
          out += (out.empty() ? "" : ",") + t;
        }
        if (out.empty()) throw bad("at least one task is required");
        return out;
      }
      return v;
    }
  }
  return v;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& s : key_specs()) values_[s.name] = canonicalize(s.name, s.default_value);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = canonicalize(key, value); }

  const std::string& get(const std::string& key) const {
    spec(key);
    return values_.at(key);
  }

  long long get_int(const std::string& key) const { return std::stoll(get(key)); }
  double get_real(const std::string& key) const { return std::stod(get(key)); }
  bool get_bool(const std::string& key) const { return get(key) == "true"; }

  /// Parses `key = value` lines; '#' starts a comment.
  static RunConfig parse(const std::string& text) {
    RunConfig c;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      c.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

  /// Every key in declaration order.
  std::string serialize() const {
    std::string out;
    for (const auto& s : key_specs()) out += std::string(s.name) + " = " + values_.at(s.name) + "\n";
    return out;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  // ---- typed views ----

  std::vector<envsim::TaskId> tasks() const {
    std::vector<envsim::TaskId> out;
    for (const auto& t : detail::split(get("tasks"), ',')) out.push_back(envsim::parse_task(t).id);
    return out;
  }

  int image_size() const {
    const auto n = get_int("N_target");
    if (n <= 0) return static_cast<int>(get_int("image_size"));
    const auto side = static_cast<long long>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) throw ConfigError("config key 'N_target': " + std::to_string(n) + " is not a perfect square");
    return static_cast<int>(side * get_int("patch"));
  }

  double lambda_view(View v) const {
    const std::string& s = get("lambda_" + std::string(view_name(v)));
    return s == "auto" ? get_real("lambda_latent") : std::stod(s);
  }

  ModelConfig model() const {
    ModelConfig m;
    m.encoder.image_size = image_size();
    m.encoder.patch = static_cast<int>(get_int("patch"));
    m.encoder.width = static_cast<int>(get_int("enc_width"));
    m.encoder.heads = static_cast<int>(get_int("enc_heads"));
    m.encoder.blocks = static_cast<int>(get_int("enc_blocks"));
    m.encoder.mlp_ratio = static_cast<int>(get_int("enc_mlp_ratio"));
    m.pooling.tau = get_real("tau");
    m.pooling.fusion_tau = get_real("fusion_tau");
    m.pooling.tokens_per_view = static_cast<int>(get_int("tokens_per_view"));
    const auto br = detail::split(get("branches"), ',');
    for (std::size_t i = 0; i < 3; ++i) {
      const char* name = pooling::strategy_name(pooling::kStrategies[i]);
      m.pooling.branches[i] = std::find(br.begin(), br.end(), name) != br.end();
    }
    m.generator.width = static_cast<int>(get_int("gen_width"));
    m.generator.layers = static_cast<int>(get_int("gen_layers"));
    m.generator.heads = static_cast<int>(get_int("gen_heads"));
    m.generator.mlp_ratio = static_cast<int>(get_int("gen_mlp_ratio"));
    m.generator.horizon = static_cast<int>(get_int("h"));
    m.generator.action_dim = envsim::kActionDim;
    m.generator.state_dim = envsim::kStateDim;
    m.generator.num_tasks = 3;
    m.generator.latent_branch = get_bool("latent_branch");
    m.generator.pattern =
        get("attention") == "full" ? generator::AttentionPattern::Full : generator::AttentionPattern::BlockCausal;
    m.sync();
    m.validate();
    return m;
  }

  flow::LossWeights loss_weights() const {
    flow::LossWeights w;
    w.lambda_a = get_real("lambda_a");
    for (View v : kViews) w.lambda_z[static_cast<std::size_t>(view_index(v))] = lambda_view(v);
    const std::string& m = get("metric");
    w.action_metric = flow::parse_metric(m.substr(0, 2));
    w.latent_metric = flow::parse_metric(m.substr(2, 2));
    w.validate();
    return w;
  }

  flow::FlowTimeSampler time_sampler() const {
    flow::FlowTimeSampler s;
    s.alpha = get_real("time_alpha");
    s.beta = get_real("time_beta");
    if (!(s.alpha > 0 && s.beta > 0)) throw ConfigError("config: time_alpha and time_beta must be positive");
    s.schedule = get("time_schedule") == "literal" ? flow::TimeSchedule::Literal : flow::TimeSchedule::LowBiased;
    return s;
  }

  envsim::EvalSettings eval_settings() const {
    envsim::EvalSettings e;
    e.infer_ah = static_cast<int>(get_int("infer_ah"));
    e.replan_step = static_cast<int>(get_int("replan_step"));
    e.trained_horizon = static_cast<int>(get_int("h"));
    e.max_steps = static_cast<int>(get_int("max_steps"));
    e.frame_size = image_size();
    return e;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace owm::config
