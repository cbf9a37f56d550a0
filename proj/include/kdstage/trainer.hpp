#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kdstage/losses.hpp"
#include "kdstage/metrics.hpp"
#include "kdstage/model.hpp"
#include "kdstage/optimizer.hpp"
#include "kdstage/synthdata.hpp"

namespace kdstage {

enum class TrainMode { Teacher, StudentBaseline, StudentDistilled };

std::string to_string(TrainMode mode);
TrainMode parse_mode(const std::string& name);

struct TrainConfig {
  LossWeights weights;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::StudentBaseline;
  std::size_t folds = 5;
  // Architecture; init_seed is replaced by a sub-stream of `seed`.
  ConvNetConfig model;

  void validate() const;
  // Teacher mode always trains on cross entropy alone: (0, 0, 1).
  LossWeights effective_weights() const;
  // Both student modes share one init stream so that they start from the
  // same parameters.
  ConvNetConfig resolved_model() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

struct EpochLog {
  std::size_t epoch = 0;
  double total = 0;
  double attn = 0;
  double dist = 0;
  double cls = 0;
  double train_acc = 0;
};

struct TrainResult {
  ConvClassifier<float> model;
  std::vector<EpochLog> log;
};

using SampleRefs = std::vector<const SynthSample*>;

// Teacher sees the ROI crop, students the full image.
const Tensor& model_input(const SynthSample& sample, TrainMode mode);

// Frozen-teacher logits on the sample's crop, detached.
Tensor distill_inputs(const ConvClassifier<float>& teacher, const SynthSample& sample);

// Seeded mini-batch training. Distilled mode requires `teacher`; the losses
// of a batch are averaged over its samples.
TrainResult train(const SampleRefs& samples, const TrainConfig& config,
                  const ConvClassifier<float>* teacher = nullptr);

std::size_t predict(const ConvClassifier<float>& model, const Tensor& input);
Metrics evaluate(const ConvClassifier<float>& model, const SampleRefs& samples, TrainMode mode);
// Mean overlap_score of the model's Grad-CAM heatmaps (true-label cross
// entropy) with the ROI masks.
double mean_overlap(const ConvClassifier<float>& model, const SampleRefs& samples);

// CSV: epoch,L_total,L_attn,L_dist,L_cls,train_acc
void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace kdstage
