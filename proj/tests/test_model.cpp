#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

#include "kdstage/error.hpp"
#include "kdstage/model.hpp"
#include "kdstage/rng.hpp"

namespace fs = std::filesystem;
using namespace kdstage;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("kdstage_test_" + name);
  fs::remove_all(dir);
  return dir;
}

Tensor random_image(const ConvNetConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(shape_size(cfg.input_shape()));
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor(cfg.input_shape(), v);
}

}  // namespace

TEST(Model, HeScale) {
  EXPECT_DOUBLE_EQ(he_scale(72), std::sqrt(2.0 / 72));
  ConvClassifier<float> model(ConvNetConfig{});
  const auto& w = model.parameter("block1.weight");
  ASSERT_EQ(w.shape(), (Shape{16, 8, 3, 3}));
  double ss = 0, mean = 0;
  for (float v : w.values()) mean += v;
  mean /= w.size();
  for (float v : w.values()) ss += (v - mean) * (v - mean);
  double sd = std::sqrt(ss / (w.size() - 1));
  EXPECT_NEAR(sd / std::sqrt(2.0 / 72), 1.0, 0.1);
  for (float b : model.parameter("block1.bias").values()) EXPECT_EQ(b, 0.f);
}

TEST(Model, ActivationAndLogitShapes) {
  ConvNetConfig cfg;
  cfg.blocks = {{8, 3, true}, {8, 3, true}, {16, 3, false}};
  EXPECT_EQ(cfg.activation_shape(), (Shape{16, 16, 16}));
  ConvClassifier<float> model(cfg);
  Tape tape;
  auto out = model.forward(tape, random_image(cfg, 1));
  EXPECT_EQ(out.activations.shape(), (Shape{16, 16, 16}));
  EXPECT_EQ(out.logits.shape(), (Shape{5}));
  EXPECT_EQ(ConvNetConfig{}.activation_shape(), (Shape{32, 16, 16}));
}

TEST(Model, ZeroImageWithZeroBiasesGivesUniformSoftmax) {
  ConvClassifier<float> model(ConvNetConfig{});
  auto logits = model.logits(Tensor::zeros({1, 64, 64}));
  for (float z : logits.values()) EXPECT_EQ(z, 0.f);
}

TEST(Model, SameSeedSameOutputs) {
  ConvNetConfig cfg;
  cfg.init_seed = 17;
  ConvClassifier<float> a(cfg), b(cfg);
  auto img = random_image(cfg, 2);
  auto la = a.logits(img), lb = b.logits(img);
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i], lb[i]);
  cfg.init_seed = 18;
  ConvClassifier<float> c(cfg);
  EXPECT_NE(c.logits(img)[0], la[0]);
}

TEST(Model, WrongInputShapeIsShapeError) {
  ConvClassifier<float> model(ConvNetConfig{});
  EXPECT_THROW(model.logits(Tensor::zeros({1, 32, 32})), ShapeError);
}

TEST(Model, InvalidConfigs) {
  ConvNetConfig cfg;
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.attention_layer = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.blocks[0].kernel_size = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto dir = temp_dir("ckpt");
  ConvNetConfig cfg;
  cfg.init_seed = 5;
  ConvClassifier<float> model(cfg);
  save_checkpoint(model, dir, {{"mode", "teacher"}});
  auto loaded = load_checkpoint(dir);
  EXPECT_EQ(loaded.config(), model.config());
  ASSERT_EQ(loaded.parameters().size(), model.parameters().size());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    auto a = model.parameters()[i].tensor.values(), b = loaded.parameters()[i].tensor.values();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t j = 0; j < a.size(); ++j) ASSERT_EQ(a[j], b[j]);
  }
  auto img = random_image(cfg, 3);
  EXPECT_EQ(model.logits(img).values()[2], loaded.logits(img).values()[2]);
  EXPECT_EQ(read_checkpoint_manifest(dir).at("provenance").at("mode"), "teacher");
}

TEST(Checkpoint, ManifestListsEachParameterOnce) {
  auto dir = temp_dir("ckpt_manifest");
  ConvClassifier<float> model(ConvNetConfig{});
  save_checkpoint(model, dir);
  auto manifest = read_checkpoint_manifest(dir);
  std::set<std::string> names;
  for (const auto& p : manifest.at("parameters")) {
    EXPECT_TRUE(names.insert(p.at("name").get<std::string>()).second);
    EXPECT_TRUE(fs::exists(dir / p.at("file").get<std::string>()));
  }
  EXPECT_EQ(names.size(), model.parameters().size());
}

TEST(Checkpoint, ClassCountMismatchIsConfigError) {
  auto dir = temp_dir("ckpt_classes");
  save_checkpoint(ConvClassifier<float>(ConvNetConfig{}), dir);
  ConvNetConfig expected;
  expected.num_classes = 4;
  EXPECT_THROW(load_checkpoint(dir, expected), ConfigError);
  expected.num_classes = 5;
  expected.init_seed = 99;
  EXPECT_NO_THROW(load_checkpoint(dir, expected));
}

TEST(Checkpoint, CorruptParameterFileIsCorruptDataError) {
  auto dir = temp_dir("ckpt_corrupt");
  save_checkpoint(ConvClassifier<float>(ConvNetConfig{}), dir);
  auto manifest = read_checkpoint_manifest(dir);
  auto file = dir / manifest.at("parameters").at(0).at("file").get<std::string>();
  {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(load_checkpoint(dir), CorruptDataError);
}

TEST(Checkpoint, MissingDirectoryIsIoError) {
  EXPECT_THROW(load_checkpoint(temp_dir("ckpt_missing")), IoError);
}
