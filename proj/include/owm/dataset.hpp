#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "owm/container.hpp"
#include "owm/envsim.hpp"

// Expert episodes <-> OWM1 container records.
namespace owm::dataset {

using envsim::Episode;

inline std::string episode_prefix(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "episode/%05zu/", i);
  return buf;
}

inline io::Container to_container(const std::vector<Episode>& episodes) {
  io::Container c;
  c.put_scalar("meta/episodes", static_cast<std::int64_t>(episodes.size()));
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Episode& e = episodes[i];
    const std::string p = episode_prefix(i);
    const auto steps = static_cast<std::uint32_t>(e.steps);
    const auto size = static_cast<std::uint32_t>(e.frame_size);
    c.put_scalar(p + "task", e.task);
    c.put_scalar(p + "seed", static_cast<std::int64_t>(e.seed));
    c.put(p + "success", {1}, std::vector<std::uint8_t>{static_cast<std::uint8_t>(e.success ? 1 : 0)});
    for (View v : kViews) {
      c.put(p + "frames_" + std::string(view_name(v)), {steps, size, size, 3}, e.frames[static_cast<std::size_t>(view_index(v))]);
    }
    c.put(p + "state", {steps, static_cast<std::uint32_t>(envsim::kStateDim)}, e.states);
    c.put(p + "action", {steps, static_cast<std::uint32_t>(envsim::kActionDim)}, e.actions);
  }
  return c;
}

inline std::vector<Episode> from_container(const io::Container& c) {
  const auto n = c.scalar("meta/episodes");
  if (n < 0) throw InputError("dataset: negative episode count");
  std::vector<Episode> out;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::string p = episode_prefix(static_cast<std::size_t>(i));
    Episode e;
    e.task = static_cast<int>(c.scalar(p + "task"));
    envsim::task(e.task);  // validates the id
    e.seed = static_cast<std::uint64_t>(c.scalar(p + "seed"));
    e.success = c.get(p + "success").as<std::uint8_t>().at(0) != 0;
    const auto& r = c.get(p + "frames_r");
    if (r.extents.size() != 4 || r.extents[1] != r.extents[2] || r.extents[3] != 3) {
      throw InputError("dataset: " + p + "frames_r must be (steps, size, size, 3)");
    }
    e.steps = static_cast<int>(r.extents[0]);
    e.frame_size = static_cast<int>(r.extents[1]);
    for (View v : kViews) {
      const auto& rec = c.get(p + "frames_" + std::string(view_name(v)));
      if (rec.extents != r.extents) throw InputError("dataset: " + p + " views disagree in shape");
      e.frames[static_cast<std::size_t>(view_index(v))] = rec.as<std::uint8_t>();
    }
    e.states = c.get(p + "state").as<float>();
    e.actions = c.get(p + "action").as<float>();
    if (e.states.size() != static_cast<std::size_t>(e.steps) * envsim::kStateDim ||
        e.actions.size() != static_cast<std::size_t>(e.steps) * envsim::kActionDim) {
      throw InputError("dataset: " + p + " arrays do not share the step count");
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline void save(const std::vector<Episode>& episodes, const std::filesystem::path& path) {
  io::save(to_container(episodes), path);
}

inline std::vector<Episode> load(const std::filesystem::path& path) { return from_container(io::load(path)); }

/// generate_episodes followed by an atomic write.
inline std::size_t generate_dataset(const std::vector<envsim::TaskId>& tasks, int per_task, std::uint64_t seed,
                                    const std::filesystem::path& out, int frame_size = 32) {
  auto eps = envsim::generate_episodes(tasks, per_task, seed, frame_size);
  save(eps, out);
  return eps.size();
}

}  // namespace owm::dataset
