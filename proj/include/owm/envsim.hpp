#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "owm/errors.hpp"
#include "owm/numerics/random.hpp"
#include "owm/views.hpp"

// Kinematic 2D tabletop on the unit square with scripted experts and
// gripper-centred multi-view rendering.
namespace owm::envsim {

using numerics::Rng;

inline constexpr int kActionDim = 4;  // dx, dy, grip, aux
inline constexpr int kStateDim = 3;   // gripper x, gripper y, closed
inline constexpr int kMaxObjects = 3;

/// Table units travelled per unit action.
inline constexpr double kMoveScale = 0.05;
/// Gripper-object distance at which a push carries the object along.
inline constexpr double kContactRadius = 0.07;
/// Gripper-object distance at which closing the gripper grasps the object.
inline constexpr double kGraspRadius = 0.05;
inline constexpr double kObjectRadius = 0.045;

enum class TaskId { Push = 0, PickPlace = 1, Rearrange = 2 };
enum class HorizonClass { Short, Medium, Long };

struct Vec2 {
  double x = 0, y = 0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2, Vec2) = default;
  double norm() const { return std::hypot(x, y); }
};

inline double clamp_unit(double v) { return std::clamp(v, 0.0, 1.0); }
inline Vec2 clamp_table(Vec2 p) { return {clamp_unit(p.x), clamp_unit(p.y)}; }

/// One placement stage: object `object` must end within `tolerance` of `goal`.
struct Stage {
  int object = 0;
  Vec2 goal;
  double tolerance = 0.05;
};

struct Task {
  TaskId id = TaskId::Push;
  std::string name;
  HorizonClass horizon = HorizonClass::Short;
  int objects = 1;
  /// Push carries objects by contact; the others need a closed grasp.
  bool contact_push = true;
  std::vector<Stage> stages;
  int max_steps = 120;
};

inline const std::array<Task, 3>& task_table() {
  static const std::array<Task, 3> tasks{
      Task{TaskId::Push, "push", HorizonClass::Short, 1, true, {Stage{0, {0.75, 0.75}, 0.05}}, 120},
      Task{TaskId::PickPlace, "pick_place", HorizonClass::Medium, 2, false, {Stage{0, {0.8, 0.25}, 0.05}}, 160},
      Task{TaskId::Rearrange,
           "rearrange",
           HorizonClass::Long,
           3,
           false,
           {Stage{0, {0.2, 0.8}, 0.05}, Stage{1, {0.5, 0.85}, 0.05}, Stage{2, {0.8, 0.8}, 0.05}},
           300},
  };
  return tasks;
}

inline const Task& task(TaskId id) {
  const int i = static_cast<int>(id);
  if (i < 0 || i >= 3) throw InputError("unknown task id " + std::to_string(i));
  return task_table()[static_cast<std::size_t>(i)];
}

inline const Task& task(int id) {
  if (id < 0 || id >= 3) throw InputError("unknown task id " + std::to_string(id));
  return task(static_cast<TaskId>(id));
}

inline const Task& parse_task(const std::string& name) {
  for (const auto& t : task_table())
    if (t.name == name) return t;
  throw InputError("unknown task '" + name + "' (expected push, pick_place or rearrange)");
}

struct WorldState {
  Vec2 gripper;
  bool closed = false;
  std::array<Vec2, kMaxObjects> objects{};
  int object_count = 0;
  int held = -1;  // index of the grasped object, -1 if none
  TaskId task = TaskId::Push;
  int steps = 0;
  /// Count of action components that had to be clamped into [-1, 1].
  int clamped_components = 0;

  friend bool operator==(const WorldState&, const WorldState&) = default;

  std::array<float, kStateDim> state_vector() const {
    return {static_cast<float>(gripper.x), static_cast<float>(gripper.y), closed ? 1.0f : 0.0f};
  }
};

using Action = std::array<double, kActionDim>;

/// Random placements: objects in the lower-left region away from every goal,
/// the gripper anywhere on the table at least 0.15 from each object.
inline WorldState reset(const Task& t, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "reset/" + t.name);
  WorldState s;
  s.task = t.id;
  s.object_count = t.objects;
  for (int i = 0; i < t.objects; ++i) {
    for (;;) {
      Vec2 p{rng.uniform(0.2, 0.55), rng.uniform(0.2, 0.55)};
      bool ok = true;
      for (int j = 0; j < i; ++j) ok = ok && (p - s.objects[static_cast<std::size_t>(j)]).norm() > 3 * kObjectRadius;
      for (const auto& st : t.stages) ok = ok && (p - st.goal).norm() > 0.15;
      if (ok) {
        s.objects[static_cast<std::size_t>(i)] = p;
        break;
      }
    }
  }
  for (;;) {
    Vec2 g{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
    bool ok = true;
    for (int j = 0; j < t.objects; ++j) ok = ok && (g - s.objects[static_cast<std::size_t>(j)]).norm() > 0.15;
    if (ok) {
      s.gripper = g;
      break;
    }
  }
  return s;
}

inline WorldState reset(TaskId id, std::uint64_t seed) { return reset(task(id), seed); }

/// Pure transition. The gripper moves by kMoveScale * (dx, dy), clamped to
/// the table; the object it carries moves by the realised displacement.
inline WorldState step(const WorldState& in, const Action& raw) {
  const Task& t = task(in.task);
  WorldState s = in;
  Action a{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = std::isfinite(raw[i]) ? raw[i] : 0.0;
    a[i] = std::clamp(v, -1.0, 1.0);
    if (a[i] != raw[i]) ++s.clamped_components;
  }
  const Vec2 before = s.gripper;
  s.gripper = clamp_table(before + kMoveScale * Vec2{a[0], a[1]});
  const Vec2 delta = s.gripper - before;

  if (t.contact_push) {
    for (int i = 0; i < s.object_count; ++i) {
      auto& o = s.objects[static_cast<std::size_t>(i)];
      if ((o - before).norm() <= kContactRadius) o = clamp_table(o + delta);
    }
  } else {
    if (s.held >= 0) {
      auto& o = s.objects[static_cast<std::size_t>(s.held)];
      o = clamp_table(o + delta);
    }
    const bool close = a[2] > 0;
    if (close && !s.closed) {
      int best = -1;
      double best_d = kGraspRadius;
      for (int i = 0; i < s.object_count; ++i) {
        const double d = (s.objects[static_cast<std::size_t>(i)] - s.gripper).norm();
        if (d <= best_d) {
          best = i;
          best_d = d;
        }
      }
      s.held = best;
    } else if (!close) {
      s.held = -1;
    }
  }
  s.closed = a[2] > 0;
  ++s.steps;
  return s;
}

inline bool stage_done(const WorldState& s, const Stage& st) {
  return s.held != st.object && (s.objects[static_cast<std::size_t>(st.object)] - st.goal).norm() <= st.tolerance;
}

/// Index of the first unsatisfied stage, or stage count when all are done.
inline int current_stage(const WorldState& s, const Task& t) {
  for (std::size_t i = 0; i < t.stages.size(); ++i)
    if (!stage_done(s, t.stages[i])) return static_cast<int>(i);
  return static_cast<int>(t.stages.size());
}

inline bool success(const WorldState& s) {
  const Task& t = task(s.task);
  return current_stage(s, t) == static_cast<int>(t.stages.size());
}

namespace detail {

inline double toward(double delta) { return std::clamp(delta / kMoveScale, -1.0, 1.0); }

inline Action move_to(Vec2 from, Vec2 to, double grip) { return {toward(to.x - from.x), toward(to.y - from.y), grip, 0.0}; }

}  // namespace detail

/// Proportional controller toward the current stage target.
inline Action expert_action(const WorldState& s) {
  const Task& t = task(s.task);
  const int stage = current_stage(s, t);
  if (stage == static_cast<int>(t.stages.size())) return {0.0, 0.0, -1.0, 0.0};
  const Stage& st = t.stages[static_cast<std::size_t>(stage)];
  const Vec2 obj = s.objects[static_cast<std::size_t>(st.object)];

  if (t.contact_push) {
    // Approach until contact, then drive the object onto the goal; the
    // carried object keeps its offset, so aim the gripper at goal + offset.
    const Vec2 offset = s.gripper - obj;
    if (offset.norm() > kContactRadius) return detail::move_to(s.gripper, obj, -1.0);
    return detail::move_to(s.gripper, st.goal + offset, -1.0);
  }
  if (s.held == st.object) {
    const Vec2 offset = s.gripper - obj;
    if ((obj - st.goal).norm() <= 0.5 * st.tolerance) return {0.0, 0.0, -1.0, 0.0};
    return detail::move_to(s.gripper, st.goal + offset, 1.0);
  }
  if (s.held >= 0 || s.closed) return {0.0, 0.0, -1.0, 0.0};  // wrong object or empty grasp: open first
  if ((obj - s.gripper).norm() <= 0.5 * kGraspRadius) return {0.0, 0.0, 1.0, 0.0};
  return detail::move_to(s.gripper, obj, -1.0);
}

// ------------------------------------------------------------------ rendering

/// World-space square window shown by a view.
struct Viewport {
  Vec2 center;
  double extent = 1.0;
};

inline Viewport viewport(const WorldState& s, View v) {
  switch (v) {
    case View::R: return {{0.5, 0.5}, 1.0};
    case View::W1: return {s.gripper, 0.5};
    case View::W2: return {s.gripper, 0.25};
  }
  return {{0.5, 0.5}, 1.0};
}

using Color = std::array<float, 3>;

inline constexpr Color kBackground{0.85f, 0.85f, 0.8f};
inline constexpr Color kOffTable{0.0f, 0.0f, 0.0f};
inline constexpr std::array<Color, kMaxObjects> kObjectColors{Color{0.9f, 0.15f, 0.1f}, Color{0.1f, 0.3f, 0.9f},
                                                              Color{0.1f, 0.7f, 0.2f}};
inline constexpr Color kGripperOpen{1.0f, 1.0f, 1.0f};
inline constexpr Color kGripperClosed{0.1f, 0.1f, 0.1f};

/// Row-major (size, size, 3) frame with values in [0, 1]. Row 0 is the top
/// edge of the viewport (largest y).
inline std::vector<float> render(const WorldState& s, View v, int size = 32) {
  if (size < 1) throw ConfigError("render: frame size must be positive");
  const Task& t = task(s.task);
  const Viewport vp = viewport(s, v);
  std::vector<float> px(static_cast<std::size_t>(size) * size * 3);
  const double cell = vp.extent / size;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const Vec2 p{vp.center.x - 0.5 * vp.extent + (c + 0.5) * cell, vp.center.y + 0.5 * vp.extent - (r + 0.5) * cell};
      Color col = kBackground;
      if (p.x < 0 || p.x > 1 || p.y < 0 || p.y > 1) {
        col = kOffTable;
      } else {
        // Goal zones: tinted rings in the colour of their object.
        for (const auto& st : t.stages) {
          const double d = (p - st.goal).norm();
          if (d <= st.tolerance + 0.015 && d >= st.tolerance - 0.005) {
            const Color& oc = kObjectColors[static_cast<std::size_t>(st.object)];
            for (int k = 0; k < 3; ++k) col[static_cast<std::size_t>(k)] = 0.5f * (oc[static_cast<std::size_t>(k)] + kBackground[static_cast<std::size_t>(k)]);
          }
        }
        for (int i = 0; i < s.object_count; ++i) {
          if ((p - s.objects[static_cast<std::size_t>(i)]).norm() <= kObjectRadius) col = kObjectColors[static_cast<std::size_t>(i)];
        }
        // Gripper glyph: a plus sign of arm length 0.04.
        const Vec2 d = p - s.gripper;
        const double arm = 0.04, half = 0.008;
        if ((std::abs(d.x) <= arm && std::abs(d.y) <= half) || (std::abs(d.y) <= arm && std::abs(d.x) <= half)) {
          col = s.closed ? kGripperClosed : kGripperOpen;
        }
      }
      std::copy(col.begin(), col.end(), px.begin() + (static_cast<std::ptrdiff_t>(r) * size + c) * 3);
    }
  }
  return px;
}

/// Quantised frame as stored in datasets.
inline std::vector<std::uint8_t> render_u8(const WorldState& s, View v, int size = 32) {
  const auto f = render(s, v, size);
  std::vector<std::uint8_t> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = static_cast<std::uint8_t>(std::lround(f[i] * 255.0f));
  return out;
}

// ------------------------------------------------------------------- episodes

struct Episode {
  int task = 0;
  std::uint64_t seed = 0;
  bool success = false;
  int frame_size = 32;
  int steps = 0;
  std::array<std::vector<std::uint8_t>, kViewCount> frames;  // (steps, size, size, 3) each
  std::vector<float> states;                                  // (steps, kStateDim)
  std::vector<float> actions;                                 // (steps, kActionDim)

  std::size_t frame_elems() const { return static_cast<std::size_t>(frame_size) * frame_size * 3; }
};

/// Rolls the scripted expert from reset(task, seed). Each recorded step
/// holds the observation and the action taken from it; the final goal-state
/// observation is appended with a zero action.
inline Episode record_expert(const Task& t, std::uint64_t seed, int frame_size = 32) {
  Episode ep;
  ep.task = static_cast<int>(t.id);
  ep.seed = seed;
  ep.frame_size = frame_size;
  WorldState s = reset(t, seed);
  auto push_obs = [&](const WorldState& st, const Action& a) {
    for (View v : kViews) {
      auto f = render_u8(st, v, frame_size);
      auto& dst = ep.frames[static_cast<std::size_t>(view_index(v))];
      dst.insert(dst.end(), f.begin(), f.end());
    }
    const auto sv = st.state_vector();
    ep.states.insert(ep.states.end(), sv.begin(), sv.end());
    for (double x : a) ep.actions.push_back(static_cast<float>(x));
    ++ep.steps;
  };
  while (!success(s) && s.steps < t.max_steps) {
    const Action a = expert_action(s);
    push_obs(s, a);
    s = step(s, a);
  }
  ep.success = success(s);
  push_obs(s, Action{0.0, 0.0, s.closed ? 1.0 : -1.0, 0.0});
  return ep;
}

/// Expert episodes for every task in order; failed expert runs are
/// replaced by the next seed in the task's stream.
inline std::vector<Episode> generate_episodes(const std::vector<TaskId>& tasks, int per_task, std::uint64_t seed,
                                              int frame_size = 32) {
  if (per_task < 0) throw ConfigError("generate_dataset: episodes must be >= 0");
  std::vector<Episode> out;
  for (TaskId id : tasks) {
    const Task& t = task(id);
    Rng rng = Rng::stream(seed, "data/" + t.name);
    int made = 0, attempts = 0;
    while (made < per_task) {
      if (++attempts > 100 * (per_task + 1)) throw NumericalError("generate_dataset: expert keeps failing on " + t.name);
      Episode ep = record_expert(t, rng.next_u64(), frame_size);
      if (!ep.success) continue;
      out.push_back(std::move(ep));
      ++made;
    }
  }
  return out;
}

// ----------------------------------------------------------------- evaluation

/// Batched observation handed to a policy: one entry per active rollout.
struct PolicyQuery {
  std::vector<const WorldState*> states;
  int frame_size = 32;
  int horizon = 8;
};

/// Returns one action chunk per queried state, each of length horizon.
using Policy = std::function<std::vector<std::vector<Action>>(const PolicyQuery&)>;

inline Policy expert_policy() {
  return [](const PolicyQuery& q) {
    std::vector<std::vector<Action>> out;
    for (const WorldState* s : q.states) {
      // Simulate forward so the chunk stays consistent when executed open loop.
      WorldState sim = *s;
      std::vector<Action> chunk;
      for (int k = 0; k < q.horizon; ++k) {
        chunk.push_back(expert_action(sim));
        sim = step(sim, chunk.back());
      }
      out.push_back(std::move(chunk));
    }
    return out;
  };
}

inline Policy random_policy(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(Rng::stream(seed, "eval/random"));
  return [rng](const PolicyQuery& q) {
    std::vector<std::vector<Action>> out;
    for (std::size_t i = 0; i < q.states.size(); ++i) {
      std::vector<Action> chunk;
      for (int k = 0; k < q.horizon; ++k) chunk.push_back({rng->uniform(-1, 1), rng->uniform(-1, 1), rng->uniform(-1, 1), 0});
      out.push_back(std::move(chunk));
    }
    return out;
  };
}

struct EvalSettings {
  int infer_ah = 8;
  int replan_step = 4;
  int trained_horizon = 8;
  int max_steps = 0;  // 0: the task's nominal limit
  int frame_size = 32;

  void validate() const {
    if (!(1 <= replan_step && replan_step <= infer_ah && infer_ah <= trained_horizon)) {
      throw ConfigError("evaluate: need 1 <= replan_step (" + std::to_string(replan_step) + ") <= infer_ah (" +
                        std::to_string(infer_ah) + ") <= trained horizon (" + std::to_string(trained_horizon) + ")");
    }
  }
};

struct EvalRow {
  std::string task;
  std::uint64_t seed = 0;
  bool success = false;
  int steps = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  double success_rate(const std::string& task_name) const {
    int n = 0, k = 0;
    for (const auto& r : rows) {
      if (r.task != task_name) continue;
      ++n;
      k += r.success ? 1 : 0;
    }
    return n ? static_cast<double>(k) / n : 0.0;
  }

  std::vector<std::string> tasks() const {
    std::vector<std::string> names;
    for (const auto& r : rows)
      if (std::find(names.begin(), names.end(), r.task) == names.end()) names.push_back(r.task);
    return names;
  }

  /// Unweighted mean of per-task success rates.
  double macro_average() const {
    const auto names = tasks();
    if (names.empty()) return 0.0;
    double s = 0;
    for (const auto& n : names) s += success_rate(n);
    return s / static_cast<double>(names.size());
  }

  std::string csv() const {
    std::string out = "task,seed,success,steps\n";
    for (const auto& r : rows)
      out += r.task + "," + std::to_string(r.seed) + "," + (r.success ? "1" : "0") + "," + std::to_string(r.steps) + "\n";
    return out;
  }
};

/// Receding-horizon evaluation. All rollouts of a task advance in lock step
/// so the policy sees them as one batch. Rollout i of a task starts from
/// reset(task, seed + i).
inline EvalReport evaluate(const Policy& policy, const std::vector<TaskId>& tasks, int episodes, std::uint64_t seed,
                           const EvalSettings& cfg) {
  cfg.validate();
  if (episodes < 0) throw ConfigError("evaluate: episodes must be >= 0");
  EvalReport report;
  for (TaskId id : tasks) {
    const Task& t = task(id);
    const int limit = cfg.max_steps > 0 ? cfg.max_steps : t.max_steps;
    std::vector<WorldState> envs;
    std::vector<EvalRow> rows;
    for (int i = 0; i < episodes; ++i) {
      const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
      envs.push_back(reset(t, s));
      rows.push_back({t.name, s, success(envs.back()), 0});
    }
    for (;;) {
      PolicyQuery q{{}, cfg.frame_size, cfg.infer_ah};
      std::vector<std::size_t> active;
      for (std::size_t i = 0; i < envs.size(); ++i) {
        if (!rows[i].success && envs[i].steps < limit) {
          active.push_back(i);
          q.states.push_back(&envs[i]);
        }
      }
      if (active.empty()) break;
      const auto chunks = policy(q);
      if (chunks.size() != active.size()) throw StructuralError("evaluate: policy returned wrong batch size");
      for (std::size_t j = 0; j < active.size(); ++j) {
        const std::size_t i = active[j];
        if (static_cast<int>(chunks[j].size()) < cfg.replan_step) throw StructuralError("evaluate: action chunk too short");
        for (int k = 0; k < cfg.replan_step && !rows[i].success && envs[i].steps < limit; ++k) {
          envs[i] = step(envs[i], chunks[j][static_cast<std::size_t>(k)]);
          rows[i].success = success(envs[i]);
        }
        rows[i].steps = envs[i].steps;
      }
    }
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

}  // namespace owm::envsim
