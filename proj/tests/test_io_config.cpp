#include <gtest/gtest.h>

#include <filesystem>

#include "owm/config.hpp"
#include "owm/container.hpp"

using namespace owm;

namespace {

io::Container sample() {
  io::Container c;
  c.put("weights", {2, 3}, std::vector<float>{1.5f, -2, 0, 3, 4, 5});
  c.put("pixels", {4}, std::vector<std::uint8_t>{0, 128, 255, 7});
  c.put_scalar("step", 1234567890123LL);
  c.put_text("config", "lr = 0.001\n");
  return c;
}

}  // namespace

TEST(Container, RoundTripsAllDtypes) {
  const auto c = sample();
  const auto back = io::Container::parse(c.serialize());
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.scalar("step"), 1234567890123LL);
  EXPECT_EQ(back.text("config"), "lr = 0.001\n");
  EXPECT_EQ(back.get("weights").extents, (std::vector<std::uint32_t>{2, 3}));
  EXPECT_EQ(back.records()[1].name, "pixels");
}

TEST(Container, HeaderLayout) {
  const auto bytes = sample().serialize();
  EXPECT_EQ(bytes.substr(0, 4), "OWM1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 4);  // record count
}

TEST(Container, RejectsTruncationAndCorruption) {
  const auto bytes = sample().serialize();
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(io::Container::parse(bytes.substr(0, cut)), InputError) << cut;
  }
  EXPECT_THROW(io::Container::parse(bytes + "x"), InputError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(io::Container::parse(bad), InputError);
}

TEST(Container, RejectsDuplicateNamesAndBadExtents) {
  io::Container c;
  c.put_scalar("a", 1);
  EXPECT_THROW(c.put_scalar("a", 2), StructuralError);
  EXPECT_THROW(c.put("b", {3}, std::vector<float>{1, 2}), StructuralError);
  EXPECT_THROW(c.get("missing"), InputError);
  EXPECT_THROW(c.text("a"), InputError);
}

TEST(Container, FileWriteIsAtomicAndFailsCleanly) {
  const auto dir = std::filesystem::temp_directory_path() / "owm_test_io";
  std::filesystem::create_directories(dir);
  io::save(sample(), dir / "c.owm");
  EXPECT_EQ(io::load(dir / "c.owm"), sample());
  for (const auto& e : std::filesystem::directory_iterator(dir)) EXPECT_EQ(e.path().filename(), "c.owm");
  EXPECT_THROW(io::save(sample(), dir / "no_such_dir" / "c.owm"), IoError);
  EXPECT_FALSE(std::filesystem::exists(dir / "no_such_dir"));
  EXPECT_THROW(io::load(dir / "absent.owm"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Config, DefaultsSerializeAndParseBack) {
  const config::RunConfig c;
  EXPECT_EQ(config::RunConfig::parse(c.serialize()), c);
  EXPECT_EQ(c.get_int("h"), 8);
  EXPECT_EQ(c.get("metric"), "L1L1");
}

TEST(Config, RoundTripOfOverrides) {
  auto c = config::RunConfig::parse("# comment\n  tau = 0.5 \nmetric=L2L2\nlatent_branch = off\ntasks = push,rearrange\n");
  EXPECT_EQ(c.get_real("tau"), 0.5);
  EXPECT_FALSE(c.get_bool("latent_branch"));
  EXPECT_EQ(c.tasks().size(), 2u);
  const auto again = config::RunConfig::parse(c.serialize());
  EXPECT_EQ(again, c);
  EXPECT_EQ(again.serialize(), c.serialize());
}

TEST(Config, UnknownKeyNamesTheKey) {
  try {
    config::RunConfig::parse("learning_rate = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, RejectsMalformedValues) {
  EXPECT_THROW(config::RunConfig::parse("h = eight\n"), ConfigError);
  EXPECT_THROW(config::RunConfig::parse("metric = L3L1\n"), ConfigError);
  EXPECT_THROW(config::RunConfig::parse("no equals sign\n"), ConfigError);
  config::RunConfig c;
  c.set("tau", "0");
  EXPECT_THROW(c.model(), ConfigError);
}

TEST(Config, TypedViewsFollowKeys) {
  config::RunConfig c;
  c.set("metric", "L1L2");
  c.set("lambda_latent", "0.2");
  c.set("lambda_w1", "0.5");
  const auto w = c.loss_weights();
  EXPECT_EQ(w.action_metric, flow::Metric::L1);
  EXPECT_EQ(w.latent_metric, flow::Metric::L2);
  EXPECT_DOUBLE_EQ(w.lambda_z[0], 0.2);
  EXPECT_DOUBLE_EQ(w.lambda_z[1], 0.5);
  c.set("N_target", "256");
  EXPECT_EQ(c.image_size(), 128);
  EXPECT_EQ(c.model().encoder.tokens(), 256);
}
