#include <gtest/gtest.h>

#include <filesystem>

#include "owm/dataset.hpp"
#include "owm/envsim.hpp"

using namespace owm;
using namespace owm::envsim;

namespace {

bool expert_solves(const Task& t, std::uint64_t seed, std::vector<int>* stage_trace = nullptr) {
  WorldState s = reset(t, seed);
  while (!success(s) && s.steps < t.max_steps) {
    s = step(s, expert_action(s));
    if (stage_trace) stage_trace->push_back(current_stage(s, t));
  }
  return success(s);
}

}  // namespace

TEST(Reset, DeterministicAndInBounds) {
  for (const auto& t : task_table()) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto a = reset(t, seed);
      EXPECT_EQ(a, reset(t, seed));
      EXPECT_EQ(a.object_count, t.objects);
      EXPECT_EQ(a.steps, 0);
      EXPECT_FALSE(success(a));
      auto inside = [](Vec2 p) { return p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1; };
      EXPECT_TRUE(inside(a.gripper));
      for (int i = 0; i < a.object_count; ++i) EXPECT_TRUE(inside(a.objects[static_cast<std::size_t>(i)]));
    }
    EXPECT_NE(reset(t, 1), reset(t, 2));
  }
}

TEST(Step, ZeroActionOnlyAdvancesTime) {
  const auto s = reset(TaskId::PickPlace, 3);
  const auto n = step(s, {0, 0, -1, 0});
  EXPECT_EQ(n.gripper, s.gripper);
  EXPECT_EQ(n.objects, s.objects);
  EXPECT_EQ(n.steps, 1);
}

TEST(Step, ClampsToTheWallAndCountsClampedComponents) {
  auto s = reset(TaskId::Push, 4);
  s.gripper = {0.98, 0.5};
  s.objects[0] = {0.2, 0.2};
  const auto n = step(s, {3.0, 0.0, -1, 0});
  EXPECT_DOUBLE_EQ(n.gripper.x, 1.0);
  EXPECT_DOUBLE_EQ(n.gripper.y, 0.5);
  EXPECT_EQ(n.clamped_components, 1);
  const auto nan = step(s, {std::nan(""), 0.0, -1, 0});
  EXPECT_EQ(nan.gripper, s.gripper);
}

TEST(Step, GraspedObjectFollowsTheGripper) {
  auto s = reset(TaskId::PickPlace, 5);
  s.gripper = s.objects[0];
  s = step(s, {0, 0, 1, 0});
  ASSERT_EQ(s.held, 0);
  const Vec2 before = s.objects[0];
  s = step(s, {1, 0.5, 1, 0});
  EXPECT_NEAR(s.objects[0].x - before.x, kMoveScale, 1e-12);
  EXPECT_NEAR(s.objects[0].y - before.y, 0.5 * kMoveScale, 1e-12);
  s = step(s, {0, 0, -1, 0});
  EXPECT_EQ(s.held, -1);
}

TEST(Step, PushMovesObjectsInContact) {
  auto s = reset(TaskId::Push, 6);
  s.objects[0] = {0.5, 0.5};
  s.gripper = {0.45, 0.5};
  const auto n = step(s, {1, 0, -1, 0});
  EXPECT_NEAR(n.objects[0].x, 0.5 + kMoveScale, 1e-12);
}

TEST(Expert, SolvesEveryTaskOnNearlyAllSeeds) {
  for (const auto& t : task_table()) {
    int solved = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) solved += expert_solves(t, seed);
    EXPECT_GE(solved, 990) << t.name;
  }
}

TEST(Expert, CompletesRearrangeStagesInOrder) {
  const Task& t = task(TaskId::Rearrange);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<int> trace;
    ASSERT_TRUE(expert_solves(t, seed, &trace));
    int highest = 0;
    for (int st : trace) {
      EXPECT_GE(st, highest);  // never regresses to an earlier stage
      highest = std::max(highest, st);
    }
    EXPECT_EQ(highest, 3);
  }
}

TEST(Render, DeterministicRangeAndEmptyTable) {
  const auto s = reset(TaskId::Rearrange, 9);
  for (View v : kViews) {
    const auto a = render(s, v, 32);
    EXPECT_EQ(a, render(s, v, 32));
    EXPECT_EQ(a.size(), 32u * 32u * 3u);
    for (float x : a) {
      EXPECT_GE(x, 0.0f);
      EXPECT_LE(x, 1.0f);
    }
  }
  // A scene with no objects and the gripper parked off-frame renders as
  // background plus goal rings only.
  WorldState empty;
  empty.task = TaskId::Push;
  empty.gripper = {0.02, 0.02};
  const auto f = render(empty, View::R, 16);
  int background = 0;
  for (std::size_t i = 0; i < f.size(); i += 3)
    background += f[i] == kBackground[0] && f[i + 1] == kBackground[1] && f[i + 2] == kBackground[2];
  EXPECT_GT(background, 16 * 16 * 9 / 10);
  EXPECT_THROW(render(empty, View::R, 0), ConfigError);
}

TEST(Render, WristViewIsCenteredOnTheGripper) {
  auto s = reset(TaskId::Push, 10);
  s.gripper = {0.5, 0.5};
  const auto f = render(s, View::W1, 32);
  const std::size_t center = (16u * 32u + 16u) * 3u;
  const Color expected = s.closed ? kGripperClosed : kGripperOpen;
  EXPECT_EQ(f[center], expected[0]);
  EXPECT_EQ(f[center + 1], expected[1]);
}

TEST(Dataset, GeneratesSuccessfulEpisodesByteIdentically) {
  const std::vector<TaskId> tasks{TaskId::Push, TaskId::PickPlace};
  const auto a = generate_episodes(tasks, 3, 42, 16);
  ASSERT_EQ(a.size(), 6u);
  for (const auto& ep : a) {
    EXPECT_TRUE(ep.success);
    EXPECT_EQ(ep.frames[0].size(), static_cast<std::size_t>(ep.steps) * ep.frame_elems());
    EXPECT_EQ(ep.actions.size(), static_cast<std::size_t>(ep.steps) * kActionDim);
  }
  EXPECT_EQ(a[0].task, 0);
  EXPECT_EQ(a[5].task, 1);
  const auto dir = std::filesystem::temp_directory_path() / "owm_test_dataset";
  std::filesystem::create_directories(dir);
  dataset::save(a, dir / "a.owm");
  dataset::save(generate_episodes(tasks, 3, 42, 16), dir / "b.owm");
  EXPECT_EQ(io::read_file(dir / "a.owm"), io::read_file(dir / "b.owm"));
  const auto back = dataset::load(dir / "a.owm");
  ASSERT_EQ(back.size(), a.size());
  EXPECT_EQ(back[3].frames, a[3].frames);
  EXPECT_EQ(back[3].actions, a[3].actions);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, NegativeCountRaises) { EXPECT_THROW(generate_episodes({TaskId::Push}, -1, 0), ConfigError); }

TEST(Evaluate, ExpertSucceedsEverywhere) {
  const auto r = evaluate(expert_policy(), {TaskId::Push, TaskId::PickPlace, TaskId::Rearrange}, 20, 100000, {});
  EXPECT_EQ(r.rows.size(), 60u);
  EXPECT_DOUBLE_EQ(r.success_rate("push"), 1.0);
  EXPECT_DOUBLE_EQ(r.success_rate("pick_place"), 1.0);
  EXPECT_DOUBLE_EQ(r.success_rate("rearrange"), 1.0);
  EXPECT_DOUBLE_EQ(r.macro_average(), 1.0);
}

TEST(Evaluate, RandomPolicyFailsLongHorizonTask) {
  const auto r = evaluate(random_policy(1), {TaskId::Rearrange}, 20, 100000, {});
  EXPECT_LE(r.success_rate("rearrange"), 0.05);
}

TEST(Evaluate, RolloutSeedsAreConsecutive) {
  const auto r = evaluate(expert_policy(), {TaskId::Push}, 3, 500, {});
  EXPECT_EQ(r.rows[0].seed, 500u);
  EXPECT_EQ(r.rows[2].seed, 502u);
}

TEST(Evaluate, RejectsInvalidHorizonsAndAcceptsZeroEpisodes) {
  EvalSettings bad;
  bad.replan_step = 5;
  bad.infer_ah = 4;
  EXPECT_THROW(evaluate(expert_policy(), {TaskId::Push}, 1, 0, bad), ConfigError);
  bad = {};
  bad.infer_ah = 9;
  EXPECT_THROW(evaluate(expert_policy(), {TaskId::Push}, 1, 0, bad), ConfigError);
  const auto r = evaluate(expert_policy(), {TaskId::Push}, 0, 0, {});
  EXPECT_TRUE(r.rows.empty());
  EXPECT_EQ(r.macro_average(), 0.0);
}

TEST(Evaluate, PolicySeesActiveRolloutsAsOneBatch) {
  std::size_t largest = 0;
  Policy spy = [&](const PolicyQuery& q) {
    largest = std::max(largest, q.states.size());
    return expert_policy()(q);
  };
  evaluate(spy, {TaskId::Push}, 7, 0, {});
  EXPECT_EQ(largest, 7u);
}
