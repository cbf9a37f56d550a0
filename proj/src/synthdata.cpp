#include "kdstage/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "kdstage/container.hpp"
#include "kdstage/error.hpp"

namespace kdstage {

namespace {

constexpr std::size_t kRoiMargin = 2;
constexpr std::size_t kDistractorAttempts = 200;
constexpr std::size_t kDistractorRestarts = 50;
// Stage distribution of the reference CBCT cohort, stage 1 first.
constexpr std::array<std::size_t, kNumStages> kPaperStageCounts{159, 92, 92, 125, 255};
constexpr const char* kDatasetFormat = "kdstage-dataset";

}  // namespace

void SynthConfig::validate() const {
  if (image_h == 0 || image_w == 0) throw ConfigError("synth: empty image size");
  if (roi_h == 0 || roi_w != 2 * roi_h) throw ConfigError("synth: roi must have a 2:1 width:height aspect");
  if (roi_h + 2 * kRoiMargin > image_h || roi_w + 2 * kRoiMargin > image_w) {
    throw ConfigError("synth: roi does not fit inside the image with a 2-pixel margin");
  }
  if (samples_per_class == 0) throw ConfigError("synth: samples_per_class must be positive");
  if (!(noise_sigma >= 0) || !(texture_jitter >= 0)) throw ConfigError("synth: noise levels must be >= 0");
  if (folds < 2) throw ConfigError("synth: folds must be >= 2");
  for (std::size_t count : class_counts()) {
    if (count < folds) {
      throw ConfigError("synth: class with " + std::to_string(count) + " samples is smaller than k=" +
                        std::to_string(folds) + " folds");
    }
  }
}

std::vector<std::size_t> SynthConfig::class_counts() const {
  if (!paper_proportions) return std::vector<std::size_t>(kNumStages, samples_per_class);
  // Largest-remainder rescaling of the cohort distribution to the same total
  // budget as equal-count mode.
  const std::size_t total = samples_per_class * kNumStages;
  const std::size_t cohort = std::accumulate(kPaperStageCounts.begin(), kPaperStageCounts.end(), std::size_t{0});
  std::vector<std::size_t> counts(kNumStages);
  std::vector<std::pair<std::size_t, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    counts[c] = total * kPaperStageCounts[c] / cohort;
    remainders.emplace_back(total * kPaperStageCounts[c] % cohort, c);
    assigned += counts[c];
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[remainders[i].second];
  return counts;
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"image_size", {c.image_h, c.image_w}},
       {"roi_size", {c.roi_h, c.roi_w}},
       {"samples_per_class", c.samples_per_class},
       {"noise_sigma", c.noise_sigma},
       {"distractor_count", c.distractor_count},
       {"master_seed", c.master_seed},
       {"paper_proportions", c.paper_proportions},
       {"folds", c.folds},
       {"texture_jitter", c.texture_jitter}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.image_h = j.at("image_size").at(0).get<std::size_t>();
  c.image_w = j.at("image_size").at(1).get<std::size_t>();
  c.roi_h = j.at("roi_size").at(0).get<std::size_t>();
  c.roi_w = j.at("roi_size").at(1).get<std::size_t>();
  c.samples_per_class = j.at("samples_per_class").get<std::size_t>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.distractor_count = j.at("distractor_count").get<std::size_t>();
  c.master_seed = j.at("master_seed").get<std::uint64_t>();
  c.paper_proportions = j.at("paper_proportions").get<bool>();
  c.folds = j.at("folds").get<std::size_t>();
  c.texture_jitter = j.at("texture_jitter").get<double>();
}

StageGeometry stage_geometry(int stage, std::size_t roi_h, std::size_t roi_w) {
  if (stage < 1 || stage > static_cast<int>(kNumStages)) {
    throw ConfigError("synth: invalid stage " + std::to_string(stage));
  }
  StageGeometry g;
  g.band_height = std::max<std::size_t>(1, roi_h / 3);
  g.band_row = (roi_h - g.band_height) / 2;
  g.scar_row = g.band_row + g.band_height / 2;
  static constexpr std::array<double, kNumStages> kFill{0.0, 0.25, 0.5, 1.0, 1.0};
  g.filled_cols = static_cast<std::size_t>(std::lround(kFill[static_cast<std::size_t>(stage - 1)] *
                                                       static_cast<double>(roi_w)));
  return g;
}

Tensor render_stage(int stage, std::size_t roi_h, std::size_t roi_w, Rng& rng, const StageStyle& style) {
  const auto geo = stage_geometry(stage, roi_h, roi_w);
  std::vector<float> jitter(roi_h * roi_w);
  for (auto& j : jitter) j = static_cast<float>(rng.uniform(-style.jitter, style.jitter));
  std::vector<float> patch(roi_h * roi_w);
  for (std::size_t r = 0; r < roi_h; ++r) {
    const bool in_band = r >= geo.band_row && r < geo.band_row + geo.band_height;
    for (std::size_t c = 0; c < roi_w; ++c) {
      float v = style.bone;
      if (in_band && c >= geo.filled_cols) v = style.gap;
      if (stage == 4 && r == geo.scar_row) v = style.scar;
      patch[r * roi_w + c] = std::clamp(v + jitter[r * roi_w + c], 0.0f, 1.0f);
    }
  }
  return Tensor({roi_h, roi_w}, std::move(patch));
}

std::uint64_t sample_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_seed(master_seed, "sample", index);
}

Tensor crop_resize(const Tensor& image, const RoiBox& box, std::size_t out_h, std::size_t out_w) {
  if (image.ndim() != 3 || image.dim(0) != 1) throw ShapeError("crop_resize: expected (1,H,W) image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (box.height == 0 || box.width == 0 || box.row + box.height > h || box.col + box.width > w) {
    throw ShapeError("crop_resize: box outside the image");
  }
  auto src = image.values();
  auto coord = [](std::size_t o, std::size_t out, std::size_t in) {
    return (in == 1 || out == 1) ? 0.0 : static_cast<double>(o * (in - 1)) / static_cast<double>(out - 1);
  };
  std::vector<float> out(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double sy = coord(oy, out_h, box.height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, box.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double sx = coord(ox, out_w, box.width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, box.width - 1);
      const double fx = sx - static_cast<double>(x0);
      auto at = [&](std::size_t y, std::size_t x) {
        return static_cast<double>(src[(box.row + y) * w + box.col + x]);
      };
      const double top = (1 - fx) * at(y0, x0) + fx * at(y0, x1);
      const double bottom = (1 - fx) * at(y1, x0) + fx * at(y1, x1);
      out[oy * out_w + ox] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return Tensor({1, out_h, out_w}, std::move(out));
}

namespace {

bool boxes_touch(const RoiBox& a, const RoiBox& b, std::size_t gap) {
  return a.row < b.row + b.height + gap && b.row < a.row + a.height + gap && a.col < b.col + b.width + gap &&
         b.col < a.col + a.width + gap;
}

void paste(std::vector<float>& image, std::size_t width, const Tensor& patch, const RoiBox& at) {
  auto p = patch.values();
  for (std::size_t r = 0; r < at.height; ++r) {
    for (std::size_t c = 0; c < at.width; ++c) image[(at.row + r) * width + at.col + c] = p[r * at.width + c];
  }
}

}  // namespace

SynthSample generate_sample(const SynthConfig& config, const ManifestEntry& entry) {
  const std::size_t H = config.image_h, W = config.image_w;
  Rng rng(entry.seed);
  StageStyle style;
  style.jitter = static_cast<float>(config.texture_jitter);

  RoiBox roi{static_cast<std::size_t>(rng.uniform_int(kRoiMargin, static_cast<std::int64_t>(H - kRoiMargin - config.roi_h))),
             static_cast<std::size_t>(rng.uniform_int(kRoiMargin, static_cast<std::int64_t>(W - kRoiMargin - config.roi_w))),
             config.roi_h, config.roi_w};

  std::vector<float> image(H * W, style.background);
  paste(image, W, render_stage(entry.stage, config.roi_h, config.roi_w, rng, style), roi);

  // Random placement can paint itself into a corner; restart the whole set
  // of distractors when one does not fit.
  std::vector<RoiBox> boxes;
  for (std::size_t restart = 0; restart < kDistractorRestarts && boxes.size() < config.distractor_count; ++restart) {
    boxes.clear();
    for (std::size_t attempt = 0; attempt < kDistractorAttempts && boxes.size() < config.distractor_count;
         ++attempt) {
      RoiBox box{static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(H - 1 - config.roi_h))),
                 static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(W - 1 - config.roi_w))),
                 config.roi_h, config.roi_w};
      const bool free = !boxes_touch(box, roi, 1) &&
                        std::none_of(boxes.begin(), boxes.end(), [&](const RoiBox& t) { return boxes_touch(box, t, 1); });
      if (free) boxes.push_back(box);
    }
  }
  if (boxes.size() < config.distractor_count) {
    throw ConfigError("synth: cannot place " + std::to_string(config.distractor_count) +
                      " distractors without overlap");
  }
  for (const auto& box : boxes) paste(image, W, render_stage(1, config.roi_h, config.roi_w, rng, style), box);

  if (config.noise_sigma > 0) {
    for (auto& v : image) v = static_cast<float>(v + rng.normal(0.0, config.noise_sigma));
  }
  for (auto& v : image) v = std::clamp(v, 0.0f, 1.0f);

  SynthSample sample;
  sample.id = entry.id;
  sample.stage = entry.stage;
  sample.full = Tensor({1, H, W}, std::move(image));
  sample.crop = crop_resize(sample.full, roi, H, W);
  sample.mask = make_roi_mask(H, W, roi);
  sample.bbox = roi;
  sample.seed = entry.seed;
  sample.fold = entry.fold;
  return sample;
}

std::vector<ManifestEntry> assign_folds(std::vector<ManifestEntry> manifest, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("assign_folds: k must be >= 2");
  std::array<std::vector<std::size_t>, kNumStages> by_class;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const int s = manifest[i].stage;
    if (s < 1 || s > static_cast<int>(kNumStages)) throw ConfigError("assign_folds: invalid stage");
    by_class[static_cast<std::size_t>(s - 1)].push_back(i);
  }
  Rng rng(seed);
  std::size_t next = 0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    auto& ids = by_class[c];
    if (ids.empty()) continue;
    if (ids.size() < k) {
      throw ConfigError("assign_folds: stage " + std::to_string(c + 1) + " has " + std::to_string(ids.size()) +
                        " samples, fewer than k=" + std::to_string(k));
    }
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    for (std::size_t idx : ids) {
      manifest[idx].fold = static_cast<int>(next % k);
      ++next;
    }
  }
  return manifest;
}

std::vector<ManifestEntry> plan_manifest(const SynthConfig& config) {
  config.validate();
  std::vector<ManifestEntry> manifest;
  const auto counts = config.class_counts();
  for (std::size_t c = 0; c < kNumStages; ++c) {
    for (std::size_t n = 0; n < counts[c]; ++n) {
      const std::size_t index = manifest.size();
      std::ostringstream id;
      id << 's' << std::setw(5) << std::setfill('0') << index;
      manifest.push_back({id.str(), static_cast<int>(c + 1), {}, sample_seed(config.master_seed, index), -1});
    }
  }
  return assign_folds(std::move(manifest), config.folds, derive_seed(config.master_seed, "folds"));
}

Dataset generate_dataset(const SynthConfig& config) {
  Dataset dataset;
  dataset.config = config;
  dataset.manifest = plan_manifest(config);
  dataset.samples.reserve(dataset.manifest.size());
  for (auto& entry : dataset.manifest) {
    dataset.samples.push_back(generate_sample(config, entry));
    entry.bbox = dataset.samples.back().bbox;
  }
  return dataset;
}

namespace {

std::filesystem::path sample_path(const std::filesystem::path& dir, const std::string& id, const char* kind) {
  return dir / "samples" / (id + "." + kind + ".dtk");
}

nlohmann::json entry_json(const ManifestEntry& e) {
  return {{"id", e.id},
          {"label", e.stage},
          {"bbox", {e.bbox.row, e.bbox.col, e.bbox.height, e.bbox.width}},
          {"seed", e.seed},
          {"fold", e.fold}};
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "samples", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest", std::ios::trunc);
  if (!manifest) throw IoError("cannot write " + (dir / "manifest").string());
  manifest << nlohmann::json{{"format", kDatasetFormat}, {"version", 1}, {"config", dataset.config}}.dump() << '\n';
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    manifest << entry_json(dataset.manifest[i]).dump() << '\n';
    save_tensor(sample_path(dir, s.id, "full"), s.full);
    save_tensor(sample_path(dir, s.id, "crop"), s.crop);
    save_tensor(sample_path(dir, s.id, "mask"), s.mask.values);
  }
  if (!manifest) throw IoError("write failed: " + (dir / "manifest").string());
}

Dataset generate(const SynthConfig& config, const std::filesystem::path& dir) {
  auto dataset = generate_dataset(config);
  write_dataset(dataset, dir);
  return dataset;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open dataset manifest " + manifest_path.string());
  Dataset dataset;
  std::string line;
  std::size_t line_no = 0;
  try {
    if (!std::getline(in, line)) throw CorruptDataError(manifest_path.string() + ": empty manifest");
    ++line_no;
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != kDatasetFormat) {
      throw CorruptDataError(manifest_path.string() + ": not a dataset manifest");
    }
    dataset.config = header.at("config").get<SynthConfig>();
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.stage = j.at("label").get<int>();
      const auto& b = j.at("bbox");
      e.bbox = {b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>(),
                b.at(3).get<std::size_t>()};
      e.seed = j.at("seed").get<std::uint64_t>();
      e.fold = j.at("fold").get<int>();
      dataset.manifest.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError(manifest_path.string() + " line " + std::to_string(line_no) + ": " + e.what());
  }

  const auto& cfg = dataset.config;
  const Shape image_shape{1, cfg.image_h, cfg.image_w};
  for (const auto& e : dataset.manifest) {
    if (e.stage < 1 || e.stage > static_cast<int>(kNumStages)) {
      throw CorruptDataError("sample " + e.id + ": invalid label " + std::to_string(e.stage));
    }
    if (e.fold < 0 || e.fold >= static_cast<int>(cfg.folds)) {
      throw CorruptDataError("sample " + e.id + ": fold label outside [0, k)");
    }
    SynthSample s;
    s.id = e.id;
    s.stage = e.stage;
    s.bbox = e.bbox;
    s.seed = e.seed;
    s.fold = e.fold;
    for (const char* kind : {"full", "crop", "mask"}) {
      const auto path = sample_path(dir, e.id, kind);
      if (!std::filesystem::exists(path)) {
        throw CorruptDataError("sample " + e.id + ": missing file " + path.filename().string());
      }
    }
    s.full = load_tensor<float>(sample_path(dir, e.id, "full"));
    s.crop = load_tensor<float>(sample_path(dir, e.id, "crop"));
    s.mask = {load_tensor<float>(sample_path(dir, e.id, "mask")), e.bbox};
    if (s.full.shape() != image_shape || s.crop.shape() != image_shape ||
        s.mask.values.shape() != Shape{cfg.image_h, cfg.image_w}) {
      throw CorruptDataError("sample " + e.id + ": tensor shape does not match the dataset config");
    }
    if (e.bbox.height != cfg.roi_h || e.bbox.width != cfg.roi_w) {
      throw CorruptDataError("sample " + e.id + ": bbox size does not match the roi size");
    }
    try {
      validate_roi_mask(s.mask);
    } catch (const CorruptDataError& err) {
      throw CorruptDataError("sample " + e.id + ": " + err.what());
    }
    dataset.samples.push_back(std::move(s));
  }
  return dataset;
}

}  // namespace kdstage
