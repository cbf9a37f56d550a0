#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kdstage/metrics.hpp"
#include "kdstage/synthdata.hpp"
#include "kdstage/trainer.hpp"

namespace kdstage {

struct FoldResult {
  std::size_t fold = 0;
  Metrics metrics;
  std::optional<double> overlap;  // students only
  std::vector<std::string> eval_ids;
};

struct KFoldReport {
  TrainMode mode = TrainMode::StudentBaseline;
  std::vector<FoldResult> folds;  // ordered by fold index

  double mean_accuracy() const;
  double sd_accuracy() const;
  double mean_precision() const;
  double mean_recall() const;
  double mean_f1() const;
  std::optional<double> mean_overlap() const;
};

// Training/evaluation split of fold f; throws ContractError if an id lands
// on both sides.
struct FoldSplit {
  SampleRefs train;
  SampleRefs eval;
};
FoldSplit split_fold(const Dataset& dataset, std::size_t fold);

// Optional per-run callback, e.g. for progress reporting.
using ProgressFn = std::function<void(const std::string&)>;

// Train on folds != f, evaluate on f, for every fold. In distilled mode each
// fold gets its own teacher trained on the same training folds. Folds run on
// up to `jobs` threads; results are ordered by fold regardless.
KFoldReport kfold_run(const Dataset& dataset, const TrainConfig& config, std::size_t jobs = 1,
                      const ProgressFn& progress = {});

struct ExperimentConfig {
  SynthConfig data;
  TrainConfig train;  // mode is ignored; weights apply to the distilled student
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t jobs = 1;
};

struct SeedReport {
  std::uint64_t seed = 0;
  KFoldReport teacher;
  KFoldReport baseline;
  KFoldReport distilled;
};

struct ExperimentReport {
  std::vector<SeedReport> seeds;

  double teacher_accuracy() const;
  double baseline_accuracy() const;
  double distilled_accuracy() const;
  double baseline_overlap() const;
  double distilled_overlap() const;
  // teacher > distilled > baseline on mean accuracy
  bool ordering_holds() const;
};

// Per master seed: generate the dataset, then per fold train a teacher on
// crops, a baseline student and a distilled student (sharing the fold's
// teacher) on full images, and evaluate all three on the held-out fold.
ExperimentReport run_experiment(const ExperimentConfig& config, const ProgressFn& progress = {});

// metrics CSV: model,fold,acc,prec,rec,f1,overlap with a trailing mean row.
void write_kfold_csv(const std::filesystem::path& path, const std::vector<KFoldReport>& reports);

}  // namespace kdstage
