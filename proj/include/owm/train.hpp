#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "owm/config.hpp"
#include "owm/container.hpp"
#include "owm/dataset.hpp"
#include "owm/model.hpp"

// Joint flow-matching training over expert windows with online latent
// targets, AdamW, clipping and resumable checkpoints.
namespace owm::train {

using envsim::Episode;

// ------------------------------------------------------------------ windows

/// One training example cut from an episode at step t: the observation at t,
/// the next h expert actions and the h frames they lead to. Steps past the
/// end of the episode repeat the terminal frame and hold action.
struct Window {
  std::array<std::vector<float>, kViewCount> frame;   // (H, W, 3) at t
  std::array<std::vector<float>, kViewCount> future;  // (h, H, W, 3) at t+1..t+h
  std::vector<float> state;                           // (D_s)
  std::vector<float> actions;                         // (h, D_a) at t..t+h-1
  int task = 0;
  int horizon = 0;
  int frame_size = 0;
};

inline Window make_window(const Episode& e, int t, int h) {
  if (t < 0 || t >= e.steps) throw StructuralError("make_window: step " + std::to_string(t) + " outside episode");
  Window w;
  w.task = e.task;
  w.horizon = h;
  w.frame_size = e.frame_size;
  const std::size_t fe = e.frame_elems();
  auto frame_at = [&](int v, int s) {
    const auto& src = e.frames[static_cast<std::size_t>(v)];
    const std::size_t off = static_cast<std::size_t>(std::min(s, e.steps - 1)) * fe;
    return std::span<const std::uint8_t>(src.data() + off, fe);
  };
  auto append = [](std::vector<float>& dst, std::span<const std::uint8_t> px) {
    for (auto b : px) dst.push_back(static_cast<float>(b) / 255.0f);
  };
  for (int v = 0; v < kViewCount; ++v) {
    append(w.frame[static_cast<std::size_t>(v)], frame_at(v, t));
    for (int k = 1; k <= h; ++k) append(w.future[static_cast<std::size_t>(v)], frame_at(v, t + k));
  }
  w.state.assign(e.states.begin() + static_cast<long>(t) * envsim::kStateDim,
                 e.states.begin() + static_cast<long>(t + 1) * envsim::kStateDim);
  for (int k = 0; k < h; ++k) {
    const int s = std::min(t + k, e.steps - 1);
    w.actions.insert(w.actions.end(), e.actions.begin() + static_cast<long>(s) * envsim::kActionDim,
                     e.actions.begin() + static_cast<long>(s + 1) * envsim::kActionDim);
  }
  return w;
}

/// Windows stacked along a batch axis.
struct Batch {
  std::array<Array<float>, kViewCount> context;  // (B, 1, H, W, 3)
  std::array<Array<float>, kViewCount> future;   // (B, h, H, W, 3)
  Array<float> state;                            // (B, D_s)
  Array<float> actions;                          // (B, h, D_a)
  std::vector<int> tasks;

  int size() const { return state.dim(0); }
  int horizon() const { return actions.dim(1); }
};

inline Batch stack(const std::vector<Window>& ws) {
  if (ws.empty()) throw StructuralError("stack: empty batch");
  const int b = static_cast<int>(ws.size()), h = ws[0].horizon, s = ws[0].frame_size;
  auto cat = [&](auto member, Shape shape) {
    std::vector<float> out;
    for (const auto& w : ws) {
      const auto& v = member(w);
      out.insert(out.end(), v.begin(), v.end());
    }
    return Array<float>(std::move(shape), std::move(out));
  };
  Batch batch;
  for (int v = 0; v < kViewCount; ++v) {
    const auto vi = static_cast<std::size_t>(v);
    batch.context[vi] = cat([vi](const Window& w) -> const std::vector<float>& { return w.frame[vi]; }, Shape{b, 1, s, s, 3});
    batch.future[vi] = cat([vi](const Window& w) -> const std::vector<float>& { return w.future[vi]; }, Shape{b, h, s, s, 3});
  }
  batch.state = cat([](const Window& w) -> const std::vector<float>& { return w.state; }, Shape{b, envsim::kStateDim});
  batch.actions = cat([](const Window& w) -> const std::vector<float>& { return w.actions; }, Shape{b, h, envsim::kActionDim});
  for (const auto& w : ws) batch.tasks.push_back(w.task);
  return batch;
}

/// Uniform sampler over every (episode, step) pair.
class WindowSampler {
 public:
  explicit WindowSampler(const std::vector<Episode>& episodes) : episodes_(&episodes) {
    for (std::size_t i = 0; i < episodes.size(); ++i)
      for (int t = 0; t < episodes[i].steps; ++t) index_.push_back({static_cast<int>(i), t});
    if (index_.empty()) throw InputError("training data contains no steps");
  }

  Batch draw(int batch, int h, Rng& rng) const {
    std::vector<Window> ws;
    for (int i = 0; i < batch; ++i) {
      const auto [e, t] = index_[static_cast<std::size_t>(rng.index(index_.size()))];
      ws.push_back(make_window((*episodes_)[static_cast<std::size_t>(e)], t, h));
    }
    return stack(ws);
  }

 private:
  const std::vector<Episode>* episodes_;
  std::vector<std::pair<int, int>> index_;
};

// ------------------------------------------------------------------ targets

enum class TargetSpace { Semantic, Pixel };

/// Flow-matching data for a batch: actions plus per-view latent targets
/// (B, h*k, D). Plain arrays, so no gradient can reach them.
struct Targets {
  Array<float> a;
  std::vector<Array<float>> z;
};

/// Semantic targets pool the future frames with the current parameters.
/// Pixel targets are the per-frame mean of the raw patch projections
/// (no positional embedding, no attention, no pooling).
inline Targets make_targets(const Batch& batch, const ParamSet<float>& params, const ModelConfig& cfg,
                            TargetSpace space = TargetSpace::Semantic) {
  const int b = batch.size(), h = cfg.generator.horizon;
  if (batch.horizon() < h) {
    throw StructuralError("make_targets: window has " + std::to_string(batch.horizon()) + " future steps, need " +
                          std::to_string(h));
  }
  if (batch.horizon() != h) throw StructuralError("make_targets: window horizon differs from the model horizon");
  for (const auto& f : batch.future) {
    if (f.dim(1) != h) throw StructuralError("make_targets: window has " + std::to_string(f.dim(1)) + " future frames, need " + std::to_string(h));
  }
  Targets out;
  out.a = batch.actions;
  if (!cfg.generator.latent_branch || h == 0) return out;
  Tape<float> tape;
  numerics::BoundParams<float> p(tape, params, [](const std::string&) { return false; });
  if (space == TargetSpace::Semantic) {
    for (const auto& z : world_tokens(p, cfg, batch.future)) out.z.push_back(z.value());
    return out;
  }
  if (cfg.pooling.tokens_per_view != 1) throw ConfigError("pixel latent targets require tokens_per_view = 1");
  for (const auto& f : batch.future) {
    auto proj = numerics::linear(p, "encoder.patch", tape.constant(encoder::patchify(f, cfg.encoder.patch)));
    auto mean = numerics::mean(proj, 2);  // (B, h, D)
    out.z.push_back(mean.value().reshaped(Shape{b, h, cfg.encoder.width}));
  }
  return out;
}

// ---------------------------------------------------------------- optimizer

struct AdamW {
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamSet<float> m, v;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParamSet<float>& ps) {
    AdamState s;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      s.m.add(ps.names()[i], Array<float>(ps.at(i).shape(), 0.0f));
      s.v.add(ps.names()[i], Array<float>(ps.at(i).shape(), 0.0f));
    }
    return s;
  }
};

/// Matrices decay; biases, gains, embeddings and fusion logits do not.
inline bool decays(const std::string& name, const Array<float>& a) {
  return a.rank() == 2 && name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

inline double global_norm(const ParamSet<float>& g) {
  double s = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (float x : g.at(i).vec()) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

/// Rescales g in place so its global norm is at most max_norm; returns the
/// norm before clipping.
inline double clip_global_norm(ParamSet<float>& g, double max_norm) {
  const double n = global_norm(g);
  if (max_norm > 0 && n > max_norm) {
    const auto s = static_cast<float>(max_norm / n);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (float& x : g.at(i).vec()) x *= s;
  }
  return n;
}

enum class LrSchedule { Constant, Cosine };

/// Rate for the 0-based update `step` of a `total`-step run. Cosine decays
/// from `base` to zero at the final step.
inline double scheduled_lr(double base, LrSchedule s, int step, int total) {
  if (s == LrSchedule::Constant || total <= 1) return base;
  const double progress = std::clamp(static_cast<double>(step) / (total - 1), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// One AdamW update at rate `lr` (opt.lr is ignored here so that schedules
/// can vary the rate per step).
inline void adamw_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& st, const AdamW& opt,
                       double lr) {
  ++st.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
  const auto b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    const auto& g = grads.at(i).vec();
    auto& m = st.m.at(i).vec();
    auto& v = st.v.at(i).vec();
    const bool wd = decays(params.names()[i], p);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      const double mh = m[j] / c1, vh = v[j] / c2;
      double x = p[j];
      if (wd) x -= lr * opt.weight_decay * x;
      x -= lr * mh / (std::sqrt(vh) + opt.eps);
      p[j] = static_cast<float>(x);
    }
  }
}

// ------------------------------------------------------------------ one step

struct LossValues {
  double total = 0, action = 0;
  std::array<double, kViewCount> latent{0, 0, 0};
};

struct StepOutput {
  LossValues loss;
  ParamSet<float> grads;
};

/// Loss and parameter gradients for one batch at per-row flow times t.
inline StepOutput loss_and_gradients(const ParamSet<float>& params, const ModelConfig& cfg,
                                     const flow::LossWeights& weights, const Batch& batch, const Targets& targets,
                                     const std::vector<double>& t, Rng& noise) {
  const auto& g = cfg.generator;
  Tape<float> tape;
  numerics::BoundParams<float> p(tape, params);
  const auto world = world_tokens(p, cfg, batch.context);

  const auto eps_a = flow::normal_like<float>(targets.a.shape(), noise);
  auto x_a = tape.constant(flow::interpolate_rows(targets.a, eps_a, t));
  auto u_a = tape.constant(flow::target_velocity(targets.a, eps_a));
  std::vector<Var<float>> x_z, u_z;
  for (const auto& z : targets.z) {
    const auto eps = flow::normal_like<float>(z.shape(), noise);
    x_z.push_back(tape.constant(flow::interpolate_rows(z, eps, t)));
    u_z.push_back(tape.constant(flow::target_velocity(z, eps)));
  }
  auto seq = generator::build_sequence(p, g, world, batch.tasks, tape.constant(batch.state), x_z, x_a, t);
  auto vel = generator::forward(seq, p, g);
  auto terms = flow::joint_cfm_loss(vel.v_a, vel.v_z, u_a, u_z, weights);

  StepOutput out;
  out.loss.total = terms.total.value()[0];
  out.loss.action = terms.action.value()[0];
  for (std::size_t i = 0; i < terms.latent.size(); ++i) out.loss.latent[i] = terms.latent[i].value()[0];
  if (!std::isfinite(out.loss.total)) return out;
  tape.backward(terms.total);
  out.grads = p.gradients();
  return out;
}

// ------------------------------------------------------------------ trainer

struct TrainSettings {
  int steps = 3000;
  int batch = 16;
  AdamW opt;
  LrSchedule schedule = LrSchedule::Constant;
  double clip = 1.0;
  int check_every = 100;
  int ckpt_every = 0;
  std::uint64_t seed = 0;
  flow::LossWeights weights;
  flow::FlowTimeSampler sampler;
  TargetSpace targets = TargetSpace::Semantic;
  ModelConfig model;

  static TrainSettings from(const config::RunConfig& c) {
    TrainSettings s;
    s.steps = static_cast<int>(c.get_int("steps"));
    s.batch = static_cast<int>(c.get_int("batch"));
    s.opt.lr = c.get_real("lr");
    s.schedule = c.get("lr_schedule") == "cosine" ? LrSchedule::Cosine : LrSchedule::Constant;
    s.opt.weight_decay = c.get_real("weight_decay");
    s.clip = c.get_real("clip");
    s.check_every = static_cast<int>(c.get_int("check_every"));
    s.ckpt_every = static_cast<int>(c.get_int("ckpt_every"));
    s.seed = static_cast<std::uint64_t>(c.get_int("seed"));
    s.weights = c.loss_weights();
    s.sampler = c.time_sampler();
    s.targets = c.get("latent_target_space") == "pixel" ? TargetSpace::Pixel : TargetSpace::Semantic;
    s.model = c.model();
    if (s.steps < 1) throw ConfigError("config key 'steps': must be >= 1");
    if (s.batch < 1) throw ConfigError("config key 'batch': must be >= 1");
    if (!(s.opt.lr > 0)) throw ConfigError("config key 'lr': must be positive");
    if (s.opt.weight_decay < 0) throw ConfigError("config key 'weight_decay': must be nonnegative");
    if (!(s.clip > 0)) throw ConfigError("config key 'clip': must be positive");
    return s;
  }
};

inline std::string fmt(double v) {
  char buf[40];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline const char* kMetricsHeader = "step,total_loss,action_loss,latent_loss_r,latent_loss_w1,latent_loss_w2,grad_norm\n";
inline const char* kDiagnosticsHeader =
    "step,target_var_r,target_var_w1,target_var_w2,"
    "beta_r_max,beta_r_sum,beta_r_learn,beta_w1_max,beta_w1_sum,beta_w1_learn,beta_w2_max,beta_w2_sum,beta_w2_learn\n";

/// FNV-1a over the serialized config with `steps` removed, so a run can be
/// extended on resume without changing its identity.
inline std::string config_digest(const config::RunConfig& c) {
  config::RunConfig copy = c;
  copy.set("steps", "1");
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : copy.serialize()) h = (h ^ ch) * 1099511628211ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Mean over features of the across-batch variance of a (B, ...) array.
inline double batch_variance(const Array<float>& z) {
  const std::size_t b = static_cast<std::size_t>(z.dim(0)), f = z.size() / b;
  double total = 0;
  for (std::size_t j = 0; j < f; ++j) {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < b; ++i) m += z[i * f + j];
    m /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) s += (z[i * f + j] - m) * (z[i * f + j] - m);
    total += s / static_cast<double>(b);
  }
  return total / static_cast<double>(f);
}

class Trainer {
 public:
  Trainer(config::RunConfig cfg, const std::vector<Episode>& episodes)
      : cfg_(std::move(cfg)),
        settings_(TrainSettings::from(cfg_)),
        sampler_(episodes),
        data_rng_(Rng::stream(settings_.seed, "data")),
        time_rng_(Rng::stream(settings_.seed, "flow-time")),
        noise_rng_(Rng::stream(settings_.seed, "noise")) {
    for (const auto& e : episodes) {
      if (e.frame_size != settings_.model.encoder.image_size) {
        throw ConfigError("training data frames are " + std::to_string(e.frame_size) + "px but the encoder expects " +
                          std::to_string(settings_.model.encoder.image_size) + "px");
      }
    }
    Rng init = Rng::stream(settings_.seed, "init");
    params_ = init_model<float>(settings_.model, init);
    adam_ = AdamState::zeros_like(params_);
    metrics_ = kMetricsHeader;
    diagnostics_ = kDiagnosticsHeader;
  }

  /// Restores parameters, moments, rng streams and logs from a checkpoint
  /// written by a run with the same configuration (steps may differ).
  void restore(const io::Container& ck) {
    const auto saved = config::RunConfig::parse(ck.text("meta/config"));
    if (config_digest(saved) != config_digest(cfg_)) {
      throw ConfigError("resume: checkpoint was written with a different configuration");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& name = params_.names()[i];
      params_.at(i) = array_from(ck.get("param/" + name), params_.at(i).shape());
      adam_.m.at(i) = array_from(ck.get("adam_m/" + name), params_.at(i).shape());
      adam_.v.at(i) = array_from(ck.get("adam_v/" + name), params_.at(i).shape());
    }
    step_ = static_cast<int>(ck.scalar("meta/step"));
    adam_.step = ck.scalar("meta/adam_step");
    data_rng_.load(ck.text("rng/data"));
    time_rng_.load(ck.text("rng/flow-time"));
    noise_rng_.load(ck.text("rng/noise"));
    metrics_ = ck.text("log/metrics");
    diagnostics_ = ck.text("log/diagnostics");
  }

  io::Container checkpoint() const {
    io::Container c;
    c.put_scalar("meta/step", step_);
    c.put_scalar("meta/adam_step", adam_.step);
    c.put_text("meta/config", cfg_.serialize());
    c.put_text("meta/config_digest", config_digest(cfg_));
    auto put = [&](const std::string& prefix, const ParamSet<float>& ps) {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        std::vector<std::uint32_t> ext;
        for (int e : ps.at(i).shape()) ext.push_back(static_cast<std::uint32_t>(e));
        c.put(prefix + ps.names()[i], ext, std::vector<float>(ps.at(i).vec().begin(), ps.at(i).vec().end()));
      }
    };
    put("param/", params_);
    put("adam_m/", adam_.m);
    put("adam_v/", adam_.v);
    c.put_text("rng/data", data_rng_.save());
    c.put_text("rng/flow-time", time_rng_.save());
    c.put_text("rng/noise", noise_rng_.save());
    c.put_text("log/metrics", metrics_);
    c.put_text("log/diagnostics", diagnostics_);
    return c;
  }

  /// One optimizer update. Throws NumericalError on a non-finite loss or
  /// gradient, leaving the trainer at its previous state.
  LossValues step() {
    const auto& m = settings_.model;
    const int h = m.generator.horizon;
    const Batch batch = sampler_.draw(settings_.batch, h, data_rng_);
    const Targets targets = make_targets(batch, params_, m, settings_.targets);
    std::vector<double> t;
    for (int i = 0; i < batch.size(); ++i) t.push_back(flow::sample_time(settings_.sampler, time_rng_));
    StepOutput out = loss_and_gradients(params_, m, settings_.weights, batch, targets, t, noise_rng_);
    if (!std::isfinite(out.loss.total)) {
      throw NumericalError("training: non-finite loss at step " + std::to_string(step_ + 1));
    }
    const double norm = clip_global_norm(out.grads, settings_.clip);
    if (!std::isfinite(norm)) throw NumericalError("training: non-finite gradient at step " + std::to_string(step_ + 1));
    adamw_step(params_, out.grads, adam_, settings_.opt,
               scheduled_lr(settings_.opt.lr, settings_.schedule, step_, settings_.steps));
    ++step_;
    last_grad_norm_ = norm;
    metrics_ += std::to_string(step_) + "," + fmt(out.loss.total) + "," + fmt(out.loss.action) + "," +
                fmt(out.loss.latent[0]) + "," + fmt(out.loss.latent[1]) + "," + fmt(out.loss.latent[2]) + "," +
                fmt(norm) + "\n";
    if (settings_.check_every > 0 && (step_ % settings_.check_every == 0 || step_ == settings_.steps)) {
      diagnose(targets);
    }
    return out.loss;
  }

  /// Steps until the configured total. `on_checkpoint` receives the
  /// intermediate checkpoints; a failed step leaves the trainer untouched, so
  /// on a numerical error it receives that last good state before the error
  /// propagates.
  void run(const std::function<void(const io::Container&)>& on_checkpoint = {},
           const std::function<void(int, const LossValues&)>& on_step = {}) {
    while (step_ < settings_.steps) {
      LossValues l;
      try {
        l = step();
      } catch (const NumericalError&) {
        if (on_checkpoint) on_checkpoint(checkpoint());
        throw;
      }
      if (on_step) on_step(step_, l);
      if (on_checkpoint && settings_.ckpt_every > 0 && step_ % settings_.ckpt_every == 0 && step_ < settings_.steps) {
        on_checkpoint(checkpoint());
      }
    }
  }

  const ParamSet<float>& params() const { return params_; }
  const ModelConfig& model() const { return settings_.model; }
  const TrainSettings& settings() const { return settings_; }
  const config::RunConfig& run_config() const { return cfg_; }
  int current_step() const { return step_; }
  double last_grad_norm() const { return last_grad_norm_; }
  const std::string& metrics_csv() const { return metrics_; }
  const std::string& diagnostics_csv() const { return diagnostics_; }

 private:
  static Array<float> array_from(const io::Record& r, const Shape& expect) {
    Shape s;
    for (auto e : r.extents) s.push_back(static_cast<int>(e));
    if (s != expect) throw InputError("checkpoint record '" + r.name + "' has shape " + numerics::shape_string(s));
    return Array<float>(std::move(s), r.as<float>());
  }

  void diagnose(const Targets& targets) {
    std::string row = std::to_string(step_);
    for (std::size_t v = 0; v < kViewCount; ++v) row += "," + fmt(v < targets.z.size() ? batch_variance(targets.z[v]) : 0.0);
    for (View v : kViews) {
      const auto beta = pooling::fusion_beta(params_, v, settings_.model.pooling);
      double sum = 0;
      for (std::size_t m = 0; m < 3; ++m) {
        const bool on = settings_.model.pooling.branches[m];
        if (on && !(beta[m] > 0)) throw NumericalError("training: fusion weight left the simplex interior");
        sum += beta[m];
        row += "," + fmt(beta[m]);
      }
      if (std::abs(sum - 1.0) > 1e-6) throw NumericalError("training: fusion weights no longer sum to one");
    }
    diagnostics_ += row + "\n";
  }

  config::RunConfig cfg_;
  TrainSettings settings_;
  WindowSampler sampler_;
  Rng data_rng_, time_rng_, noise_rng_;
  ParamSet<float> params_;
  AdamState adam_;
  int step_ = 0;
  double last_grad_norm_ = 0;
  std::string metrics_, diagnostics_;
};

/// Parameters stored in a checkpoint, with the model configuration they
/// were trained under.
struct Snapshot {
  config::RunConfig config;
  ParamSet<float> params;
};

inline Snapshot load_snapshot(const io::Container& ck) {
  Snapshot s;
  s.config = config::RunConfig::parse(ck.text("meta/config"));
  Rng dummy(0);
  const auto shapes = init_model<float>(s.config.model(), dummy);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& r = ck.get("param/" + shapes.names()[i]);
    Shape sh;
    for (auto e : r.extents) sh.push_back(static_cast<int>(e));
    if (sh != shapes.at(i).shape()) throw InputError("checkpoint parameter '" + r.name + "' has the wrong shape");
    s.params.add(shapes.names()[i], Array<float>(std::move(sh), r.as<float>()));
  }
  return s;
}

/// Output files of a training run.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path checkpoint() const { return dir / "checkpoint.owm"; }
  std::filesystem::path metrics() const { return dir / "metrics.csv"; }
  std::filesystem::path diagnostics() const { return dir / "diagnostics.csv"; }
  std::filesystem::path config() const { return dir / "config.txt"; }
};

/// Trains (optionally resuming) and writes checkpoint, metrics, diagnostics
/// and the effective config into `out`.
inline Trainer train_to(const config::RunConfig& cfg, const std::vector<Episode>& episodes,
                        const std::filesystem::path& out, const std::optional<std::filesystem::path>& resume = {},
                        const std::function<void(int, const LossValues&)>& on_step = {}) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out.string() + "'");
  RunPaths paths{out};
  Trainer trainer(cfg, episodes);
  if (resume) trainer.restore(io::load(*resume));
  auto write_logs = [&](const io::Container& ck) {
    io::write_file_atomic(paths.metrics(), ck.text("log/metrics"));
    io::write_file_atomic(paths.diagnostics(), ck.text("log/diagnostics"));
  };
  auto on_ckpt = [&](const io::Container& ck) {
    io::save(ck, paths.checkpoint());
    write_logs(ck);
  };
  io::write_file_atomic(paths.config(), cfg.serialize());
  trainer.run(on_ckpt, on_step);
  on_ckpt(trainer.checkpoint());
  return trainer;
}

}  // namespace owm::train
