#include "mflow/config.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

using namespace mflow;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected ConfigError for:\n" << text;
  return {};
}

}  // namespace

TEST(Config, DefaultsAreDeskScale) {
  const RunConfig c = default_config();
  EXPECT_EQ(c.dataset.side, 28);
  EXPECT_EQ(c.model.image_channels, 1);
  EXPECT_EQ(c.diffusion.T, 200);
  EXPECT_EQ(c.optimizer.batch_size, 32);
  EXPECT_EQ(c.optimizer.iterations, 2000);
  EXPECT_DOUBLE_EQ(c.optimizer.lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.optimizer.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.optimizer.beta2, 0.99);
  EXPECT_DOUBLE_EQ(c.optimizer.ema_decay, 0.995);
  EXPECT_EQ(c.optimizer.ema_interval, 10);
  EXPECT_EQ(c.model.block, BlockType::cde);
  c.validate();
  EXPECT_TRUE(parse_config("") == c);
}

TEST(Config, ParsesSectionsAndValues) {
  const RunConfig c = parse_config(R"(
# comment line
seed = 42
[dataset]
source = "gaussian_toy"
count = 64
side = 8
[model]
block = "resnet"
channel_mult = [1, 2, 2]
stages = 2
base_channels = 16
attention = false
k = 1.5
[diffusion]
T = 50
beta_end = 0.05
[optimizer]
lr = 2e-4
ema_warmup = false
[output]
dir = "runs/x"
)");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.dataset.source, "gaussian_toy");
  EXPECT_EQ(c.dataset.count, 64);
  EXPECT_EQ(c.model.block, BlockType::resnet);
  EXPECT_EQ(c.model.channel_mult, (std::vector<int>{1, 2, 2}));
  EXPECT_EQ(c.model.base_channels, 16);
  EXPECT_FALSE(c.model.middle_attention);
  EXPECT_DOUBLE_EQ(c.model.k, 1.5);
  EXPECT_EQ(c.diffusion.T, 50);
  EXPECT_DOUBLE_EQ(c.diffusion.beta_end, 0.05);
  EXPECT_DOUBLE_EQ(c.optimizer.lr, 2e-4);
  EXPECT_FALSE(c.optimizer.ema_warmup);
  EXPECT_EQ(c.output.dir, "runs/x");
  // untouched keys keep their defaults
  EXPECT_EQ(c.optimizer.batch_size, 32);
}

TEST(ConfigProperty, TextRoundTripIsIdentity) {
  RunConfig c = default_config();
  c.seed = 123456789;
  c.model.k = 1.0 / 3.0 + 1.0;
  c.optimizer.lr = 0.1 + 0.2;  // not exactly representable in short decimal
  c.diffusion.beta_start = 1.2345678901234567e-5;
  c.model.block = BlockType::resnet;
  c.model.distance_mode = DistanceMode::hyperbolic_embedded;
  c.model.padding = ad::Padding::periodic;
  c.output.dir = "runs/with space";
  const std::string text = to_text(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(back.model.k, c.model.k);
  EXPECT_EQ(back.optimizer.lr, c.optimizer.lr);
  EXPECT_EQ(back.diffusion.beta_start, c.diffusion.beta_start);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.model.distance_mode, c.model.distance_mode);
  EXPECT_EQ(back.model.padding, c.model.padding);
  EXPECT_EQ(back.output.dir, c.output.dir);
  EXPECT_TRUE(back == c);
  EXPECT_EQ(to_text(back), text);
}

TEST(Config, ErrorsNameTheKey) {
  EXPECT_NE(config_error("[model]\nwidth = 3\n").find("model.width"), std::string::npos);
  EXPECT_NE(config_error("[models]\n").find("models"), std::string::npos);
  EXPECT_NE(config_error("[diffusion]\nT = many\n").find("diffusion.T"), std::string::npos);
  EXPECT_NE(config_error("[diffusion]\nT = 0\n").find("diffusion.T"), std::string::npos);
  EXPECT_NE(config_error("[diffusion]\nbeta_start = 0\n").find("diffusion.beta_start"), std::string::npos);
  EXPECT_NE(config_error("[model]\nblock = \"dense\"\n").find("cde, resnet"), std::string::npos);
  EXPECT_NE(config_error("[model]\nk = 1\n").find("model.k"), std::string::npos);
  EXPECT_NE(config_error("[optimizer]\nbeta2 = 1.0\n").find("optimizer.beta2"), std::string::npos);
  EXPECT_NE(config_error("[optimizer]\nlr = -1\n").find("optimizer.lr"), std::string::npos);
  EXPECT_NE(config_error("[dataset]\nsource = \"cifar\"\n").find("dataset.source"), std::string::npos);
  EXPECT_NE(config_error("[dataset]\nsource = \"idx_file\"\n").find("dataset.path"), std::string::npos);
  EXPECT_NE(config_error("[dataset]\nside = 30\n").find("dataset.side"), std::string::npos);
  EXPECT_NE(config_error("[model]\nattention = maybe\n").find("attention"), std::string::npos);
  EXPECT_NE(config_error("[model]\nchannel_mult = 1, 2\n").find("channel_mult"), std::string::npos);
  EXPECT_NE(config_error("seed = -1\n").find("seed"), std::string::npos);
  EXPECT_NE(config_error("seed = 1\nseed = 2\n").find("duplicate"), std::string::npos);
  EXPECT_NE(config_error("[model\n").find("line 1"), std::string::npos);
  EXPECT_NE(config_error("just words\n").find("line 1"), std::string::npos);
}

TEST(Config, LoadFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "mflow_test_config";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "run.toml").string();
  std::ofstream(path) << "seed = 9\n[optimizer]\niterations = 5\n";
  const RunConfig c = load_config(path);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.optimizer.iterations, 5);
  const std::string missing = (dir / "missing.toml").string();
  try {
    load_config(missing);
    ADD_FAILURE();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(missing), std::string::npos);
  }
}
