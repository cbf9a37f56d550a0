#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "kdstage/error.hpp"
#include "kdstage/synthdata.hpp"

namespace fs = std::filesystem;
using namespace kdstage;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("kdstage_test_" + name);
  fs::remove_all(dir);
  return dir;
}

StageStyle flat_style() {
  StageStyle s;
  s.jitter = 0;
  return s;
}

SynthConfig small_config() {
  SynthConfig c;
  c.samples_per_class = 5;
  return c;
}

}  // namespace

TEST(StageRender, OpenGapSpansFullWidth) {
  Rng rng(0);
  auto p = render_stage(1, 12, 24, rng, flat_style());
  auto g = stage_geometry(1, 12, 24);
  EXPECT_EQ(g.band_height, 4u);
  for (std::size_t r = 0; r < 12; ++r) {
    bool band = r >= g.band_row && r < g.band_row + g.band_height;
    for (std::size_t c = 0; c < 24; ++c) EXPECT_EQ(p[r * 24 + c], band ? 0.25f : 0.6f);
  }
}

TEST(StageRender, PartialFusionClosesLeftColumns) {
  auto g2 = stage_geometry(2, 12, 24), g3 = stage_geometry(3, 12, 24);
  EXPECT_EQ(g2.filled_cols, 6u);
  EXPECT_EQ(g3.filled_cols, 12u);
  Rng rng(0);
  auto p = render_stage(3, 12, 24, rng, flat_style());
  std::size_t row = g3.band_row;
  for (std::size_t c = 0; c < 24; ++c) EXPECT_EQ(p[row * 24 + c], c < 12 ? 0.6f : 0.25f);
}

TEST(StageRender, ScarIsTheOnlyDifferenceBetweenLateStages) {
  Rng a(42), b(42);
  auto s4 = render_stage(4, 12, 24, a);
  auto s5 = render_stage(5, 12, 24, b);
  auto g = stage_geometry(4, 12, 24);
  std::size_t differing = 0;
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t c = 0; c < 24; ++c) {
      if (s4[r * 24 + c] != s5[r * 24 + c]) {
        ++differing;
        EXPECT_EQ(r, g.scar_row);
      }
    }
  }
  EXPECT_EQ(differing, 24u);
}

TEST(SynthPlan, StratifiedFoldsHoldEqualShares) {
  SynthConfig c;
  auto manifest = plan_manifest(c);
  ASSERT_EQ(manifest.size(), 500u);
  std::map<std::pair<int, int>, int> counts;
  for (const auto& e : manifest) ++counts[{e.stage, e.fold}];
  ASSERT_EQ(counts.size(), 25u);
  for (const auto& [key, n] : counts) EXPECT_EQ(n, 20);
}

TEST(SynthPlan, ClassSmallerThanFoldCountIsConfigError) {
  SynthConfig c;
  c.samples_per_class = 3;
  c.folds = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(plan_manifest(c), ConfigError);
}

TEST(SynthPlan, ImbalancedProportionsSumToTotal) {
  SynthConfig c;
  c.paper_proportions = true;
  auto counts = c.class_counts();
  std::size_t total = 0;
  for (auto n : counts) total += n;
  EXPECT_EQ(total, 500u);
  EXPECT_EQ(counts.size(), kNumStages);
}

TEST(SynthSample, RoiPlacementIsCentredOnAverage) {
  SynthConfig c;
  c.distractor_count = 0;
  double row = 0, col = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    auto s = generate_sample(c, {.id = "x", .stage = 1 + int(i % 5), .bbox = {}, .seed = sample_seed(7, i)});
    row += s.bbox.row + s.bbox.height / 2.0;
    col += s.bbox.col + s.bbox.width / 2.0;
  }
  EXPECT_NEAR(row / 500, 32.0, 3.0);
  EXPECT_NEAR(col / 500, 32.0, 3.0);
}

TEST(SynthSample, DeterministicInSeedAndStage) {
  SynthConfig c;
  ManifestEntry e{.id = "a", .stage = 3, .bbox = {}, .seed = 99};
  auto s1 = generate_sample(c, e), s2 = generate_sample(c, e);
  EXPECT_EQ(s1.bbox, s2.bbox);
  for (std::size_t i = 0; i < s1.full.size(); ++i) ASSERT_EQ(s1.full[i], s2.full[i]);
  e.seed = 100;
  auto s3 = generate_sample(c, e);
  bool differs = false;
  for (std::size_t i = 0; i < s1.full.size(); ++i) differs |= s1.full[i] != s3.full[i];
  EXPECT_TRUE(differs);
}

TEST(SynthSample, ValuesInUnitRangeAndMaskMatchesBox) {
  SynthConfig c;
  auto s = generate_sample(c, {.id = "b", .stage = 4, .bbox = {}, .seed = 5});
  for (float v : s.full.values()) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
  }
  EXPECT_EQ(s.mask.bbox, s.bbox);
  EXPECT_NO_THROW(validate_roi_mask(s.mask));
}

TEST(SynthSample, CropIsResampledRoi) {
  SynthConfig c;
  c.noise_sigma = 0;
  c.texture_jitter = 0;
  auto s = generate_sample(c, {.id = "c", .stage = 2, .bbox = {}, .seed = 11});
  const auto& b = s.bbox;
  auto roi_at = [&](std::size_t r, std::size_t col) { return s.full[(b.row + r) * 64 + b.col + col]; };
  // Align-corners resampling keeps the four corners exactly.
  EXPECT_EQ(s.crop[0], roi_at(0, 0));
  EXPECT_EQ(s.crop[63], roi_at(0, 23));
  EXPECT_EQ(s.crop[63 * 64], roi_at(11, 0));
  EXPECT_EQ(s.crop[64 * 64 - 1], roi_at(11, 23));
  // Resampling the crop back onto the ROI grid recovers the ROI up to
  // interpolation blur at structure edges.
  auto back = crop_resize(s.crop, {0, 0, 64, 64}, 12, 24);
  double err = 0;
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t col = 0; col < 24; ++col) err += std::abs(back[r * 24 + col] - roi_at(r, col));
  EXPECT_LT(err / (12 * 24), 0.02);
}

TEST(SynthDataset, GenerateThenLoadIsBitExact) {
  auto dir = temp_dir("synth_roundtrip");
  auto made = generate(small_config(), dir);
  auto loaded = load_dataset(dir);
  EXPECT_EQ(loaded.config, made.config);
  ASSERT_EQ(loaded.manifest, made.manifest);
  for (std::size_t i = 0; i < made.samples.size(); ++i) {
    const auto &a = made.samples[i], &b = loaded.samples[i];
    for (std::size_t j = 0; j < a.full.size(); ++j) ASSERT_EQ(a.full[j], b.full[j]);
    for (std::size_t j = 0; j < a.crop.size(); ++j) ASSERT_EQ(a.crop[j], b.crop[j]);
    for (std::size_t j = 0; j < a.mask.values.size(); ++j) ASSERT_EQ(a.mask.values[j], b.mask.values[j]);
  }
}

TEST(SynthDataset, InMemoryMatchesOnDisk) {
  auto dir = temp_dir("synth_memory");
  auto disk = generate(small_config(), dir);
  auto mem = generate_dataset(small_config());
  ASSERT_EQ(mem.manifest, disk.manifest);
  for (std::size_t j = 0; j < mem.samples[7].full.size(); ++j) ASSERT_EQ(mem.samples[7].full[j], disk.samples[7].full[j]);
}

TEST(SynthDataset, TruncatedSampleIsCorruptData) {
  auto dir = temp_dir("synth_truncated");
  auto d = generate(small_config(), dir);
  auto victim = dir / "samples" / (d.manifest[3].id + ".full.dtk");
  ASSERT_TRUE(fs::exists(victim));
  fs::resize_file(victim, fs::file_size(victim) - 10);
  EXPECT_THROW(load_dataset(dir), CorruptDataError);
}

TEST(SynthDataset, MissingSampleErrorNamesId) {
  auto dir = temp_dir("synth_missing");
  auto d = generate(small_config(), dir);
  const auto id = d.manifest[4].id;
  fs::remove(dir / "samples" / (id + ".mask.dtk"));
  try {
    load_dataset(dir);
    FAIL() << "expected CorruptDataError";
  } catch (const CorruptDataError& e) {
    EXPECT_NE(std::string(e.what()).find(id), std::string::npos) << e.what();
  }
}

TEST(SynthDataset, MissingManifestIsIoError) {
  EXPECT_THROW(load_dataset(temp_dir("synth_none")), IoError);
}
