#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kdstage/gradcam.hpp"
#include "kdstage/rng.hpp"
#include "kdstage/tensor.hpp"

namespace kdstage {

inline constexpr std::size_t kNumStages = 5;

// Synthetic fusion-staging benchmark.
//
// Each image is a dim noisy background holding one bright ROI crossed by a
// dark horizontal gap band. The stage is encoded only in the ROI: the gap is
// open (1), closed on its left quarter (2) or half (3), closed with a
// one-pixel bright scar line (4), or closed and uniform (5). Distractors are
// open-gap look-alikes placed outside the ROI and never depend on the label.
struct SynthConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t roi_h = 12;
  std::size_t roi_w = 24;
  std::size_t samples_per_class = 100;
  double noise_sigma = 0.05;
  std::size_t distractor_count = 3;
  std::uint64_t master_seed = 0;
  bool paper_proportions = false;
  std::size_t folds = 5;
  double texture_jitter = 0.03;

  bool operator==(const SynthConfig&) const = default;
  void validate() const;
  // Per-class sample counts, stage 1 first.
  std::vector<std::size_t> class_counts() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

// Intensities of the rendered structures.
struct StageStyle {
  float background = 0.2f;
  float bone = 0.6f;
  float gap = 0.25f;
  float scar = 1.0f;
  float jitter = 0.03f;
};

struct StageGeometry {
  std::size_t band_row = 0;     // first row of the gap band
  std::size_t band_height = 0;  // rows in the gap band
  std::size_t scar_row = 0;
  std::size_t filled_cols = 0;  // band columns closed from the left edge
};

StageGeometry stage_geometry(int stage, std::size_t roi_h, std::size_t roi_w);

// (roi_h, roi_w) patch. The jitter field is drawn before anything
// stage-specific, so equal rng states give patches that differ only where
// the stage structure differs.
Tensor render_stage(int stage, std::size_t roi_h, std::size_t roi_w, Rng& rng, const StageStyle& style = {});

struct SynthSample {
  std::string id;
  int stage = 1;  // 1..5
  Tensor full;    // (1,H,W) in [0,1]
  Tensor crop;    // (1,H,W): ROI of `full` resampled to the input grid
  RoiMask mask;   // (H,W)
  RoiBox bbox;
  std::uint64_t seed = 0;
  int fold = -1;

  std::size_t class_index() const { return static_cast<std::size_t>(stage - 1); }
};

struct ManifestEntry {
  std::string id;
  int stage = 1;
  RoiBox bbox;
  std::uint64_t seed = 0;
  int fold = -1;

  bool operator==(const ManifestEntry&) const = default;
};

struct Dataset {
  SynthConfig config;
  std::vector<ManifestEntry> manifest;
  std::vector<SynthSample> samples;  // same order as manifest
};

std::uint64_t sample_seed(std::uint64_t master_seed, std::size_t index);

// Align-corners bilinear resampling of the bbox interior of a (1,H,W) image
// onto (1,out_h,out_w).
Tensor crop_resize(const Tensor& image, const RoiBox& box, std::size_t out_h, std::size_t out_w);

// Deterministic in (config, entry.seed, entry.stage).
SynthSample generate_sample(const SynthConfig& config, const ManifestEntry& entry);

// Manifest with ids, stages, per-sample seeds and stratified folds; bboxes
// are filled in by generate_sample.
std::vector<ManifestEntry> plan_manifest(const SynthConfig& config);

// In-memory generation of the whole dataset.
Dataset generate_dataset(const SynthConfig& config);

// Writes `manifest` plus samples/<id>.{full,crop,mask}.dtk under `dir`.
Dataset generate(const SynthConfig& config, const std::filesystem::path& dir);
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

// Validates containers, shapes, masks against bboxes and fold labels.
Dataset load_dataset(const std::filesystem::path& dir);

// Stratified k-fold labels: within each class the ids are shuffled and dealt
// round-robin, starting where the previous class stopped.
std::vector<ManifestEntry> assign_folds(std::vector<ManifestEntry> manifest, std::size_t k, std::uint64_t seed);

}  // namespace kdstage
