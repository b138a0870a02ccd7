#include <gtest/gtest.h>

#include <numeric>

#include "owm/encoder.hpp"

using namespace owm;
using namespace owm::encoder;

namespace {

Array<float> iota_pixels(Shape s) {
  Array<float> a(s, 0.0f);
  std::iota(a.vec().begin(), a.vec().end(), 0.0f);
  return a;
}

Array<float> random_frames(int b, int t, int size, std::uint64_t seed) {
  Rng rng(seed);
  Array<float> a(Shape{b, t, size, size, 3}, 0.0f);
  for (auto& v : a.vec()) v = static_cast<float>(rng.uniform());
  return a;
}

Array<float> run_encoder(const ParamSet<float>& ps, const EncoderConfig& cfg, const Array<float>& pixels,
                         View view = View::R) {
  Tape<float> tape;
  BoundParams<float> p(tape, ps);
  return encode(FrameBatch<float>{pixels, view}, p, cfg).tokens.value();
}

ParamSet<float> make_params(const EncoderConfig& cfg, std::uint64_t seed = 0) {
  ParamSet<float> ps;
  Rng rng(seed);
  init_encoder(ps, cfg, rng);
  return ps;
}

}  // namespace

TEST(Patchify, TwoByTwoWithUnitPatches) {
  const auto p = patchify(iota_pixels({1, 1, 2, 2, 1}), 1);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 4, 1}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], static_cast<float>(i));
}

TEST(Patchify, FourByFourWithPatchTwo) {
  const auto p = patchify(iota_pixels({1, 1, 4, 4, 1}), 2);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 4, 4}));
  const std::vector<float> expected{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(std::vector<float>(p.vec().begin(), p.vec().end()), expected);
}

TEST(Patchify, RoundTripsThroughUnpatchify) {
  for (auto [size, patch] : {std::pair{32, 8}, std::pair{64, 4}}) {
    const auto px = random_frames(2, 3, size, 5);
    const auto p = patchify(px, patch);
    EXPECT_EQ(p.dim(2), (size / patch) * (size / patch));
    EXPECT_EQ(unpatchify(p, patch, 3), px);
  }
}

TEST(Patchify, IndivisibleSizeRaises) {
  EXPECT_THROW(patchify(Array<float>(Shape{1, 1, 6, 6, 3}, 0.0f), 4), StructuralError);
  EncoderConfig cfg;
  cfg.image_size = 30;
  EXPECT_THROW(cfg.validate(), StructuralError);
}

TEST(Encoder, OutputShapeForSixteenAndTwoFiftySixTokens) {
  for (auto [size, patch, n] : {std::tuple{32, 8, 16}, std::tuple{64, 4, 256}}) {
    EncoderConfig cfg;
    cfg.image_size = size;
    cfg.patch = patch;
    cfg.width = 16;
    const auto y = run_encoder(make_params(cfg), cfg, random_frames(2, 1, size, 1));
    EXPECT_EQ(y.shape(), (Shape{2, 1, n, 16}));
  }
}

TEST(Encoder, IdenticalFramesGiveIdenticalTokens) {
  EncoderConfig cfg;
  cfg.width = 16;
  const auto one = random_frames(1, 1, 32, 9);
  Array<float> two(Shape{1, 2, 32, 32, 3}, 0.0f);
  std::copy(one.vec().begin(), one.vec().end(), two.vec().begin());
  std::copy(one.vec().begin(), one.vec().end(), two.vec().begin() + static_cast<long>(one.size()));
  const auto y = run_encoder(make_params(cfg), cfg, two);
  const std::size_t half = y.size() / 2;
  for (std::size_t i = 0; i < half; ++i) ASSERT_EQ(y[i], y[i + half]);
}

TEST(Encoder, EquivariantToBatchPermutation) {
  EncoderConfig cfg;
  cfg.width = 16;
  const auto ps = make_params(cfg);
  const auto px = random_frames(3, 1, 32, 4);
  const std::size_t frame = px.size() / 3;
  Array<float> swapped = px;
  std::copy(px.vec().begin(), px.vec().begin() + static_cast<long>(frame), swapped.vec().begin() + static_cast<long>(2 * frame));
  std::copy(px.vec().begin() + static_cast<long>(2 * frame), px.vec().end(), swapped.vec().begin());
  const auto a = run_encoder(ps, cfg, px), b = run_encoder(ps, cfg, swapped);
  const std::size_t rows = a.size() / 3;
  for (std::size_t i = 0; i < rows; ++i) {
    ASSERT_EQ(a[i], b[i + 2 * rows]);
    ASSERT_EQ(a[i + rows], b[i + rows]);
  }
}

TEST(Encoder, SpatialPermutationEquivarianceWithoutPositionOrAttention) {
  EncoderConfig cfg;
  cfg.width = 16;
  cfg.positional = false;
  cfg.attention = false;
  const auto ps = make_params(cfg);
  const auto px = random_frames(1, 1, 32, 8);
  // Swap patch (0,0) with patch (3,3) in pixel space.
  Array<float> swapped = px;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) {
        const auto a = static_cast<std::size_t>((y * 32 + x) * 3 + c);
        const auto b = static_cast<std::size_t>(((y + 24) * 32 + x + 24) * 3 + c);
        std::swap(swapped[a], swapped[b]);
      }
  const auto ya = run_encoder(ps, cfg, px), yb = run_encoder(ps, cfg, swapped);
  for (int d = 0; d < 16; ++d) {
    EXPECT_EQ(ya[static_cast<std::size_t>(d)], yb[static_cast<std::size_t>(15 * 16 + d)]);
    EXPECT_EQ(ya[static_cast<std::size_t>(5 * 16 + d)], yb[static_cast<std::size_t>(5 * 16 + d)]);
  }
}

TEST(Encoder, ViewsDifferOnlyThroughPositionalTable) {
  EncoderConfig cfg;
  cfg.width = 16;
  const auto ps = make_params(cfg);
  const auto px = random_frames(1, 1, 32, 2);
  EXPECT_NE(run_encoder(ps, cfg, px, View::R), run_encoder(ps, cfg, px, View::W1));
  cfg.positional = false;
  EXPECT_EQ(run_encoder(ps, cfg, px, View::R), run_encoder(ps, cfg, px, View::W1));
}

TEST(Encoder, RejectsOutOfRangePixelsAndWrongSize) {
  EncoderConfig cfg;
  cfg.width = 16;
  const auto ps = make_params(cfg);
  auto px = random_frames(1, 1, 32, 3);
  px[7] = 1.5f;
  EXPECT_THROW(run_encoder(ps, cfg, px), InputError);
  EXPECT_THROW(run_encoder(ps, cfg, random_frames(1, 1, 16, 3)), StructuralError);
}

TEST(Encoder, Deterministic) {
  EncoderConfig cfg;
  cfg.width = 16;
  const auto px = random_frames(2, 2, 32, 6);
  EXPECT_EQ(run_encoder(make_params(cfg, 4), cfg, px), run_encoder(make_params(cfg, 4), cfg, px));
}
