#include <gtest/gtest.h>

#include <filesystem>

#include "owm/train.hpp"

using namespace owm;
using namespace owm::train;

namespace {

config::RunConfig tiny_config() {
  config::RunConfig c;
  c.set("image_size", "16");
  c.set("patch", "8");
  c.set("enc_width", "16");
  c.set("enc_heads", "2");
  c.set("enc_blocks", "1");
  c.set("gen_width", "16");
  c.set("gen_layers", "1");
  c.set("gen_heads", "2");
  c.set("gen_mlp_ratio", "2");
  c.set("h", "2");
  c.set("infer_ah", "2");
  c.set("replan_step", "2");
  c.set("batch", "4");
  c.set("steps", "20");
  c.set("check_every", "5");
  c.set("lr", "0.001");
  return c;
}

const std::vector<envsim::Episode>& push_episodes() {
  static const auto eps = envsim::generate_episodes({envsim::TaskId::Push}, 16, 3, 16);
  return eps;
}

}  // namespace

TEST(Windows, PadsPastTheEndAndStacks) {
  const auto& ep = push_episodes()[0];
  const auto w = make_window(ep, ep.steps - 1, 3);
  EXPECT_EQ(w.actions.size(), 3u * envsim::kActionDim);
  EXPECT_EQ(w.future[0].size(), 3u * ep.frame_elems());
  // Past the end the terminal frame repeats.
  EXPECT_TRUE(std::equal(w.future[0].begin(), w.future[0].begin() + static_cast<long>(ep.frame_elems()),
                         w.future[0].begin() + static_cast<long>(2 * ep.frame_elems())));
  EXPECT_THROW(make_window(ep, ep.steps, 2), StructuralError);
  WindowSampler sampler(push_episodes());
  Rng rng(1);
  const auto b = sampler.draw(5, 2, rng);
  EXPECT_EQ(b.size(), 5);
  EXPECT_EQ(b.context[1].shape(), (Shape{5, 1, 16, 16, 3}));
  EXPECT_EQ(b.future[2].shape(), (Shape{5, 2, 16, 16, 3}));
  for (float v : b.context[0].vec()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Windows, EmptyDataRaises) {
  const std::vector<envsim::Episode> none;
  EXPECT_THROW(WindowSampler{none}, InputError);
}

TEST(Targets, ShortWindowRaises) {
  const auto cfg = tiny_config();
  Rng rng(2);
  const auto m = cfg.model();
  const auto ps = init_model<float>(m, rng);
  WindowSampler sampler(push_episodes());
  const auto b = sampler.draw(2, 1, rng);
  EXPECT_THROW(make_targets(b, ps, m), StructuralError);
}

TEST(Targets, StaticSceneTargetEqualsCurrentWorldToken) {
  auto cfg = tiny_config();
  cfg.set("h", "1");
  cfg.set("infer_ah", "1");
  cfg.set("replan_step", "1");
  const auto m = cfg.model();
  Rng rng(3);
  const auto ps = init_model<float>(m, rng);
  WindowSampler sampler(push_episodes());
  auto b = sampler.draw(3, 1, rng);
  b.future = b.context;  // nothing moves
  const auto t = make_targets(b, ps, m);
  Tape<float> tape;
  BoundParams<float> p(tape, ps);
  const auto now = world_tokens(p, m, b.context);
  ASSERT_EQ(t.z.size(), 3u);
  for (int v = 0; v < 3; ++v) EXPECT_EQ(t.z[static_cast<std::size_t>(v)], now[static_cast<std::size_t>(v)].value());
}

TEST(Targets, PixelTargetsAreMeanPatchProjections) {
  auto cfg = tiny_config();
  cfg.set("latent_target_space", "pixel");
  const auto m = cfg.model();
  Rng rng(4);
  const auto ps = init_model<float>(m, rng);
  WindowSampler sampler(push_episodes());
  const auto b = sampler.draw(2, 2, rng);
  const auto t = make_targets(b, ps, m, TargetSpace::Pixel);
  EXPECT_EQ(t.z[0].shape(), (Shape{2, 2, 16}));
  EXPECT_NE(t.z[0], make_targets(b, ps, m).z[0]);
}

TEST(Optimizer, ClipBoundsGlobalNorm) {
  ParamSet<float> g;
  g.add("a.weight", Array<float>(Shape{2, 2}, 3.0f));
  g.add("b", Array<float>(Shape{1}, 4.0f));
  const double before = clip_global_norm(g, 1.0);
  EXPECT_NEAR(before, std::sqrt(4 * 9.0 + 16.0), 1e-5);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-6);
  EXPECT_NEAR(clip_global_norm(g, 5.0), 1.0, 1e-6);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-6);
}

TEST(Optimizer, DecayOnlyOnWeightMatrices) {
  EXPECT_TRUE(decays("gen.fc1.weight", Array<float>(Shape{2, 2}, 1.0f)));
  EXPECT_FALSE(decays("gen.fc1.bias", Array<float>(Shape{2}, 1.0f)));
  EXPECT_FALSE(decays("pool.r.alpha", Array<float>(Shape{3}, 1.0f)));
  EXPECT_FALSE(decays("gen.lang", Array<float>(Shape{3, 2}, 1.0f)));
}

TEST(Optimizer, FirstAdamStepMovesByLearningRate) {
  ParamSet<float> p, g;
  p.add("x", Array<float>(Shape{2}, std::vector<float>{1.0f, -1.0f}));
  g.add("x", Array<float>(Shape{2}, std::vector<float>{0.5f, -2.0f}));
  auto st = AdamState::zeros_like(p);
  adamw_step(p, g, st, AdamW{}, 0.01);
  EXPECT_NEAR(p.get("x")[0], 0.99, 1e-6);
  EXPECT_NEAR(p.get("x")[1], -0.99, 1e-6);
}

TEST(Optimizer, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(scheduled_lr(1e-3, LrSchedule::Cosine, 0, 100), 1e-3);
  EXPECT_NEAR(scheduled_lr(1e-3, LrSchedule::Cosine, 99, 100), 0.0, 1e-18);
  EXPECT_NEAR(scheduled_lr(1e-3, LrSchedule::Cosine, 33, 67), 0.5e-3, 1e-12);
  EXPECT_DOUBLE_EQ(scheduled_lr(1e-3, LrSchedule::Constant, 50, 100), 1e-3);
}

TEST(Gradients, ZeroLatentWeightsStillTrainPooling) {
  auto cfg = tiny_config();
  cfg.set("lambda_latent", "0");
  const auto m = cfg.model();
  Rng rng(5);
  auto ps = init_model<float>(m, rng);
  WindowSampler sampler(push_episodes());
  const auto b = sampler.draw(4, 2, rng);
  const auto targets = make_targets(b, ps, m);
  Rng noise(6);
  const auto out = loss_and_gradients(ps, m, cfg.loss_weights(), b, targets, {0.2, 0.4, 0.6, 0.8}, noise);
  double pool = 0;
  for (float v : out.grads.get("pool.w1.alpha").vec()) pool += std::abs(v);
  for (float v : out.grads.get("pool.r.scorer.fc1.weight").vec()) pool += std::abs(v);
  EXPECT_GT(pool, 0.0);
}

TEST(Gradients, TargetsCarryNoGradient) {
  // Targets are plain arrays: perturbing the parameters used to build them
  // changes the loss only through the prediction path.
  const auto cfg = tiny_config();
  const auto m = cfg.model();
  Rng rng(7);
  const auto ps = init_model<float>(m, rng);
  WindowSampler sampler(push_episodes());
  const auto b = sampler.draw(2, 2, rng);
  const auto targets = make_targets(b, ps, m);
  auto other = ps;
  for (auto& v : other.get("encoder.patch.weight").vec()) v += 0.05f;
  const auto t2 = make_targets(b, other, m);
  EXPECT_NE(targets.z[0], t2.z[0]);
  Rng n1(8), n2(8);
  const auto a = loss_and_gradients(ps, m, cfg.loss_weights(), b, targets, {0.3, 0.6}, n1);
  const auto c = loss_and_gradients(ps, m, cfg.loss_weights(), b, targets, {0.3, 0.6}, n2);
  EXPECT_EQ(a.loss.total, c.loss.total);
  EXPECT_EQ(a.grads, c.grads);
}

TEST(Trainer, LossDecreasesOverTwoHundredSteps) {
  auto cfg = tiny_config();
  cfg.set("steps", "200");
  cfg.set("check_every", "50");
  Trainer tr(cfg, push_episodes());
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    const double l = tr.step().total;
    if (i < 20) first += l;
    if (i >= 180) last += l;
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(tr.current_step(), 200);
}

TEST(Trainer, FusionWeightsStayOnSimplex) {
  auto cfg = tiny_config();
  Trainer tr(cfg, push_episodes());
  for (int i = 0; i < 20; ++i) {
    tr.step();
    for (View v : kViews) {
      const auto beta = pooling::fusion_beta(tr.params(), v, tr.model().pooling);
      EXPECT_NEAR(beta[0] + beta[1] + beta[2], 1.0, 1e-6);
      for (double x : beta) EXPECT_GT(x, 0.0);
    }
  }
  // Header plus one row per check_every steps.
  EXPECT_EQ(std::count(tr.diagnostics_csv().begin(), tr.diagnostics_csv().end(), '\n'), 1 + 4);
  EXPECT_EQ(std::count(tr.metrics_csv().begin(), tr.metrics_csv().end(), '\n'), 1 + 20);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  auto cfg = tiny_config();
  Trainer full(cfg, push_episodes());
  full.run();
  Trainer first(cfg, push_episodes());
  for (int i = 0; i < 8; ++i) first.step();
  const auto ck = io::Container::parse(first.checkpoint().serialize());
  Trainer resumed(cfg, push_episodes());
  resumed.restore(ck);
  resumed.run();
  EXPECT_EQ(resumed.params(), full.params());
  EXPECT_EQ(resumed.metrics_csv(), full.metrics_csv());
  EXPECT_EQ(resumed.checkpoint().serialize(), full.checkpoint().serialize());
}

TEST(Trainer, ResumeRejectsDifferentConfig) {
  auto cfg = tiny_config();
  Trainer a(cfg, push_episodes());
  a.step();
  cfg.set("lr", "0.01");
  Trainer b(cfg, push_episodes());
  EXPECT_THROW(b.restore(a.checkpoint()), ConfigError);
}

TEST(Trainer, RejectsMismatchedFrameSize) {
  auto cfg = tiny_config();
  cfg.set("image_size", "32");
  EXPECT_THROW(Trainer(cfg, push_episodes()), ConfigError);
}

TEST(Trainer, SnapshotReloadsParameters) {
  const auto cfg = tiny_config();
  Trainer tr(cfg, push_episodes());
  tr.step();
  const auto snap = load_snapshot(io::Container::parse(tr.checkpoint().serialize()));
  EXPECT_EQ(snap.params, tr.params());
  EXPECT_EQ(snap.config, cfg);
}

TEST(Trainer, TrainToWritesArtifacts) {
  const auto dir = std::filesystem::temp_directory_path() / "owm_test_train";
  std::filesystem::remove_all(dir);
  auto cfg = tiny_config();
  cfg.set("steps", "4");
  train_to(cfg, push_episodes(), dir);
  RunPaths paths{dir};
  EXPECT_TRUE(std::filesystem::exists(paths.checkpoint()));
  EXPECT_EQ(io::read_file(paths.config()), cfg.serialize());
  EXPECT_EQ(io::read_file(paths.metrics()).rfind(kMetricsHeader, 0), 0u);
  std::filesystem::remove_all(dir);
}
