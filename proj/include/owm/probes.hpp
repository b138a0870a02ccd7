#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "owm/analysis.hpp"
#include "owm/envsim.hpp"
#include "owm/model.hpp"

// Feature extraction for the Fisher / PCA probes: one frame per successful
// episode at a fixed relative time, featurized before and after pooling.
namespace owm::analysis {

struct ProbeFeatures {
  View view = View::R;
  LabeledFeatures before;  // encoder token mean, (n, D)
  LabeledFeatures after;   // pooled world token(s), (n, k*D)
};

/// Index of the frame at `relative_time` in [0, 1] of an episode.
inline int probe_frame(int steps, double relative_time) {
  if (!(relative_time >= 0 && relative_time <= 1)) throw ConfigError("probe: relative time must lie in [0,1]");
  return static_cast<int>(std::lround(relative_time * (steps - 1)));
}

/// Labels are task ids. Episodes that failed are skipped.
inline std::vector<ProbeFeatures> probe_features(const ParamSet<float>& params, const ModelConfig& cfg,
                                                 const std::vector<envsim::Episode>& episodes,
                                                 double relative_time = 0.5) {
  std::vector<const envsim::Episode*> used;
  for (const auto& e : episodes)
    if (e.success && e.steps > 0) used.push_back(&e);
  if (used.empty()) throw InputError("probe: no successful episodes");
  const int n = static_cast<int>(used.size()), s = cfg.encoder.image_size;
  const std::size_t frame = static_cast<std::size_t>(s) * s * 3;
  std::vector<int> labels;
  for (const auto* e : used) labels.push_back(e->task);

  std::vector<ProbeFeatures> out;
  for (View v : kViews) {
    Array<float> px(Shape{n, 1, s, s, 3});
    for (int i = 0; i < n; ++i) {
      const auto* e = used[static_cast<std::size_t>(i)];
      if (e->frame_size != s) throw InputError("probe: episode frames do not match the model image size");
      const auto& src = e->frames[static_cast<std::size_t>(view_index(v))];
      const std::size_t off = static_cast<std::size_t>(probe_frame(e->steps, relative_time)) * frame;
      for (std::size_t j = 0; j < frame; ++j) px[static_cast<std::size_t>(i) * frame + j] = src[off + j] / 255.0f;
    }
    Tape<float> tape;
    numerics::BoundParams<float> p(tape, params, [](const std::string&) { return false; });
    const auto grid = encoder::encode(encoder::FrameBatch<float>{std::move(px), v}, p, cfg.encoder);
    const auto mean = numerics::mean(grid.tokens, 2);  // (n, 1, D)
    const auto z = pooling::pool_view(grid, p, cfg.pooling).z;  // (n, 1, k, D)
    ProbeFeatures f;
    f.view = v;
    f.before = {mean.value().reshaped(Shape{n, mean.dim(2)}).cast<double>(), labels};
    f.after = {z.value().reshaped(Shape{n, z.dim(2) * z.dim(3)}).cast<double>(), labels};
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace owm::analysis
