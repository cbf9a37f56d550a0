#include "kdstage/experiment.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "kdstage/error.hpp"
#include "kdstage/rng.hpp"

namespace kdstage {

namespace {

template <typename Fn>
double fold_mean(const std::vector<FoldResult>& folds, Fn fn) {
  if (folds.empty()) return 0.0;
  double acc = 0;
  for (const auto& f : folds) acc += fn(f);
  return acc / static_cast<double>(folds.size());
}

// Runs body(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < jobs; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) { return derive_seed(seed, "fold", fold); }

FoldResult evaluate_fold(const ConvClassifier<float>& model, const FoldSplit& split, std::size_t fold,
                         TrainMode mode) {
  FoldResult r;
  r.fold = fold;
  r.metrics = evaluate(model, split.eval, mode);
  if (mode != TrainMode::Teacher) r.overlap = mean_overlap(model, split.eval);
  for (const auto* s : split.eval) r.eval_ids.push_back(s->id);
  return r;
}

}  // namespace

double KFoldReport::mean_accuracy() const {
  return fold_mean(folds, [](const FoldResult& f) { return f.metrics.accuracy; });
}

double KFoldReport::sd_accuracy() const {
  if (folds.size() < 2) return 0.0;
  const double mean = mean_accuracy();
  double ss = 0;
  for (const auto& f : folds) ss += (f.metrics.accuracy - mean) * (f.metrics.accuracy - mean);
  return std::sqrt(ss / static_cast<double>(folds.size() - 1));
}

double KFoldReport::mean_precision() const {
  return fold_mean(folds, [](const FoldResult& f) { return f.metrics.precision; });
}

double KFoldReport::mean_recall() const {
  return fold_mean(folds, [](const FoldResult& f) { return f.metrics.recall; });
}

double KFoldReport::mean_f1() const {
  return fold_mean(folds, [](const FoldResult& f) { return f.metrics.f1; });
}

std::optional<double> KFoldReport::mean_overlap() const {
  if (folds.empty() || !folds.front().overlap) return std::nullopt;
  return fold_mean(folds, [](const FoldResult& f) { return f.overlap.value_or(0.0); });
}

FoldSplit split_fold(const Dataset& dataset, std::size_t fold) {
  FoldSplit split;
  for (const auto& s : dataset.samples) {
    if (s.fold < 0) throw ConfigError("kfold: sample " + s.id + " has no fold label");
    (static_cast<std::size_t>(s.fold) == fold ? split.eval : split.train).push_back(&s);
  }
  if (split.eval.empty() || split.train.empty()) {
    throw ConfigError("kfold: fold " + std::to_string(fold) + " leaves an empty split");
  }
  std::set<std::string> train_ids;
  for (const auto* s : split.train) train_ids.insert(s->id);
  for (const auto* s : split.eval) {
    if (train_ids.count(s->id)) throw ContractError("kfold: sample " + s->id + " is in both train and eval");
  }
  return split;
}

KFoldReport kfold_run(const Dataset& dataset, const TrainConfig& config, std::size_t jobs,
                      const ProgressFn& progress) {
  config.validate();
  const std::size_t k = dataset.config.folds;
  KFoldReport report;
  report.mode = config.mode;
  report.folds.resize(k);
  std::mutex progress_mutex;
  parallel_for(k, jobs, [&](std::size_t fold) {
    const auto split = split_fold(dataset, fold);
    auto fold_config = config;
    fold_config.seed = fold_seed(config.seed, fold);
    std::optional<TrainResult> teacher;
    if (config.mode == TrainMode::StudentDistilled) {
      auto teacher_config = fold_config;
      teacher_config.mode = TrainMode::Teacher;
      teacher = train(split.train, teacher_config);
    }
    const auto trained = train(split.train, fold_config, teacher ? &teacher->model : nullptr);
    report.folds[fold] = evaluate_fold(trained.model, split, fold, config.mode);
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(to_string(config.mode) + " fold " + std::to_string(fold) + " acc " +
               std::to_string(report.folds[fold].metrics.accuracy));
    }
  });
  return report;
}

double ExperimentReport::teacher_accuracy() const {
  double acc = 0;
  for (const auto& s : seeds) acc += s.teacher.mean_accuracy();
  return seeds.empty() ? 0.0 : acc / static_cast<double>(seeds.size());
}

double ExperimentReport::baseline_accuracy() const {
  double acc = 0;
  for (const auto& s : seeds) acc += s.baseline.mean_accuracy();
  return seeds.empty() ? 0.0 : acc / static_cast<double>(seeds.size());
}

double ExperimentReport::distilled_accuracy() const {
  double acc = 0;
  for (const auto& s : seeds) acc += s.distilled.mean_accuracy();
  return seeds.empty() ? 0.0 : acc / static_cast<double>(seeds.size());
}

double ExperimentReport::baseline_overlap() const {
  double acc = 0;
  for (const auto& s : seeds) acc += s.baseline.mean_overlap().value_or(0.0);
  return seeds.empty() ? 0.0 : acc / static_cast<double>(seeds.size());
}

double ExperimentReport::distilled_overlap() const {
  double acc = 0;
  for (const auto& s : seeds) acc += s.distilled.mean_overlap().value_or(0.0);
  return seeds.empty() ? 0.0 : acc / static_cast<double>(seeds.size());
}

bool ExperimentReport::ordering_holds() const {
  return teacher_accuracy() > distilled_accuracy() && distilled_accuracy() > baseline_accuracy();
}

ExperimentReport run_experiment(const ExperimentConfig& config, const ProgressFn& progress) {
  config.train.validate();
  ExperimentReport report;
  std::mutex progress_mutex;
  auto say = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(progress_mutex);
    progress(msg);
  };
  for (std::uint64_t seed : config.seeds) {
    auto data_config = config.data;
    data_config.master_seed = seed;
    const auto dataset = generate_dataset(data_config);
    const std::size_t k = data_config.folds;

    SeedReport seed_report;
    seed_report.seed = seed;
    for (auto* r : {&seed_report.teacher, &seed_report.baseline, &seed_report.distilled}) r->folds.resize(k);
    seed_report.teacher.mode = TrainMode::Teacher;
    seed_report.baseline.mode = TrainMode::StudentBaseline;
    seed_report.distilled.mode = TrainMode::StudentDistilled;

    parallel_for(k, config.jobs, [&](std::size_t fold) {
      const auto split = split_fold(dataset, fold);
      auto base = config.train;
      base.folds = k;
      base.seed = fold_seed(derive_seed(seed, "train"), fold);

      auto teacher_config = base;
      teacher_config.mode = TrainMode::Teacher;
      const auto teacher = train(split.train, teacher_config);
      seed_report.teacher.folds[fold] = evaluate_fold(teacher.model, split, fold, TrainMode::Teacher);

      auto baseline_config = base;
      baseline_config.mode = TrainMode::StudentBaseline;
      const auto baseline = train(split.train, baseline_config);
      seed_report.baseline.folds[fold] = evaluate_fold(baseline.model, split, fold, TrainMode::StudentBaseline);

      auto distilled_config = base;
      distilled_config.mode = TrainMode::StudentDistilled;
      const auto distilled = train(split.train, distilled_config, &teacher.model);
      seed_report.distilled.folds[fold] = evaluate_fold(distilled.model, split, fold, TrainMode::StudentDistilled);

      std::ostringstream os;
      os << std::fixed << std::setprecision(4) << "seed " << seed << " fold " << fold
         << ": teacher " << seed_report.teacher.folds[fold].metrics.accuracy << ", baseline "
         << seed_report.baseline.folds[fold].metrics.accuracy << " (overlap "
         << *seed_report.baseline.folds[fold].overlap << "), distilled "
         << seed_report.distilled.folds[fold].metrics.accuracy << " (overlap "
         << *seed_report.distilled.folds[fold].overlap << ")";
      say(os.str());
    });
    report.seeds.push_back(std::move(seed_report));
  }
  return report;
}

void write_kfold_csv(const std::filesystem::path& path, const std::vector<KFoldReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "model,fold,acc,prec,rec,f1,overlap\n" << std::setprecision(9);
  auto overlap_str = [](std::optional<double> v) {
    if (!v) return std::string();
    std::ostringstream os;
    os << std::setprecision(9) << *v;
    return os.str();
  };
  for (const auto& r : reports) {
    const auto name = to_string(r.mode);
    for (const auto& f : r.folds) {
      out << name << ',' << f.fold << ',' << f.metrics.accuracy << ',' << f.metrics.precision << ','
          << f.metrics.recall << ',' << f.metrics.f1 << ',' << overlap_str(f.overlap) << '\n';
    }
    out << name << ",mean," << r.mean_accuracy() << ',' << r.mean_precision() << ',' << r.mean_recall() << ','
        << r.mean_f1() << ',' << overlap_str(r.mean_overlap()) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace kdstage
