#pragma once

#include <array>
#include <string>
#include <vector>

#include "owm/encoder.hpp"
#include "owm/flowmatch.hpp"
#include "owm/generator.hpp"
#include "owm/pooling.hpp"

// Encoder -> pooling -> joint generator, wired together.
namespace owm {

struct ModelConfig {
  encoder::EncoderConfig encoder;
  pooling::PoolingConfig pooling;
  generator::GeneratorConfig generator;

  /// Copies shared extents (width, k) from encoder/pooling into the generator.
  void sync() {
    generator.latent_dim = encoder.width;
    generator.tokens_per_view = pooling.tokens_per_view;
  }

  void validate() const {
    encoder.validate();
    pooling.validate();
    generator.validate();
    if (generator.latent_dim != encoder.width) throw ConfigError("model: latent_dim must equal encoder width");
    if (generator.tokens_per_view != pooling.tokens_per_view) throw ConfigError("model: tokens_per_view mismatch");
  }
};

template <class T>
ParamSet<T> init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet<T> ps;
  encoder::init_encoder(ps, cfg.encoder, rng);
  pooling::init_pooling(ps, cfg.encoder.width, rng);
  generator::init_generator(ps, cfg.generator, rng);
  return ps;
}

/// One observation per batch row: a single frame per view, proprioceptive
/// state and task id.
template <class T>
struct Observation {
  std::array<Array<T>, kViewCount> frames;  // (B, T, H, W, C)
  Array<T> state;                           // (B, D_s)
  std::vector<int> task_ids;

  int batch() const { return state.dim(0); }
};

/// Pooled world tokens per view, reshaped to (B, T*k, D).
template <class T>
std::vector<Var<T>> world_tokens(const BoundParams<T>& p, const ModelConfig& cfg,
                                 const std::array<Array<T>, kViewCount>& frames) {
  std::vector<Var<T>> out;
  for (View v : kViews) {
    const auto& px = frames[static_cast<std::size_t>(view_index(v))];
    auto grid = encoder::encode(encoder::FrameBatch<T>{px, v}, p, cfg.encoder);
    auto z = pooling::pool_view(grid, p, cfg.pooling).z;  // (B, T, k, D)
    out.push_back(numerics::reshape(z, Shape{z.dim(0), z.dim(1) * z.dim(2), z.dim(3)}));
  }
  return out;
}

template <class T>
struct RolloutResult {
  Array<T> actions;              // (B, h, D_a)
  std::vector<Array<T>> latents;  // per view (B, h*k, D_z), diagnostics only
};

/// Encodes the observation once, then integrates the joint velocity field
/// from Gaussian noise; only the action stream is meant for execution.
template <class T>
RolloutResult<T> rollout_policy(const ParamSet<T>& params, const ModelConfig& cfg, const Observation<T>& obs,
                                int flow_steps, Rng& rng) {
  const auto& g = cfg.generator;
  const int b = obs.batch();
  std::vector<Array<T>> context;
  {
    Tape<T> tape;
    BoundParams<T> p(tape, params, [](const std::string&) { return false; });
    for (const auto& z : world_tokens(p, cfg, obs.frames)) context.push_back(z.value());
  }
  flow::JointState<T> init;
  init.a = flow::normal_like<T>(Shape{b, g.horizon, g.action_dim}, rng);
  if (g.latent_branch) {
    for (int v = 0; v < kViewCount; ++v)
      init.z.push_back(flow::normal_like<T>(Shape{b, g.horizon * g.tokens_per_view, g.latent_dim}, rng));
  }
  flow::VelocityFn<T> field = [&](const flow::JointState<T>& s, double t) {
    Tape<T> tape;
    BoundParams<T> p(tape, params, [](const std::string&) { return false; });
    std::vector<Var<T>> world, noisy_z;
    for (const auto& c : context) world.push_back(tape.constant(c));
    for (const auto& z : s.z) noisy_z.push_back(tape.constant(z));
    auto seq = generator::build_sequence(p, g, world, obs.task_ids, tape.constant(obs.state), noisy_z,
                                         tape.constant(s.a), std::vector<double>(static_cast<std::size_t>(b), t));
    auto vel = generator::forward(seq, p, g);
    flow::JointState<T> out;
    out.a = vel.v_a.value();
    for (const auto& z : vel.v_z) out.z.push_back(z.value());
    return out;
  };
  auto final_state = flow::euler_sample(field, std::move(init), flow_steps);
  return {std::move(final_state.a), std::move(final_state.z)};
}

}  // namespace owm
