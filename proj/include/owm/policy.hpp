#pragma once

#include <memory>

#include "owm/envsim.hpp"
#include "owm/model.hpp"

namespace owm {

/// Wraps a parameter snapshot as a batched envsim policy: every queried state
/// is rendered in all views, encoded, and denoised with `flow_steps` Euler
/// steps. Only the action stream is returned.
inline envsim::Policy model_policy(ParamSet<float> params, const ModelConfig& cfg, int flow_steps, std::uint64_t seed) {
  struct Shared {
    ParamSet<float> params;
    ModelConfig cfg;
    int flow_steps;
    Rng rng;
  };
  auto shared = std::make_shared<Shared>(Shared{std::move(params), cfg, flow_steps, Rng::stream(seed, "eval")});
  return [shared](const envsim::PolicyQuery& q) {
    const auto& m = shared->cfg;
    const int b = static_cast<int>(q.states.size());
    const int size = m.encoder.image_size;
    if (q.horizon > m.generator.horizon) throw ConfigError("policy: requested horizon exceeds the trained horizon");
    Observation<float> obs;
    std::vector<float> state;
    for (View v : kViews) {
      std::vector<float> px;
      px.reserve(static_cast<std::size_t>(b) * size * size * 3);
      for (const auto* s : q.states) {
        // Quantise like the stored dataset so train and test inputs match.
        for (auto u : envsim::render_u8(*s, v, size)) px.push_back(static_cast<float>(u) / 255.0f);
      }
      obs.frames[static_cast<std::size_t>(view_index(v))] = Array<float>(Shape{b, 1, size, size, 3}, std::move(px));
    }
    for (const auto* s : q.states) {
      const auto sv = s->state_vector();
      state.insert(state.end(), sv.begin(), sv.end());
      obs.task_ids.push_back(static_cast<int>(s->task));
    }
    obs.state = Array<float>(Shape{b, envsim::kStateDim}, std::move(state));
    const auto result = rollout_policy(shared->params, m, obs, shared->flow_steps, shared->rng);
    std::vector<std::vector<envsim::Action>> out(static_cast<std::size_t>(b));
    const int h = m.generator.horizon, da = m.generator.action_dim;
    for (int i = 0; i < b; ++i) {
      for (int k = 0; k < q.horizon; ++k) {
        envsim::Action a{};
        for (int j = 0; j < envsim::kActionDim; ++j)
          a[static_cast<std::size_t>(j)] = result.actions[static_cast<std::size_t>((i * h + k) * da + j)];
        out[static_cast<std::size_t>(i)].push_back(a);
      }
    }
    return out;
  };
}

}  // namespace owm
