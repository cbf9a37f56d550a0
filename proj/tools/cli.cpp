#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "kdstage/error.hpp"
#include "kdstage/experiment.hpp"
#include "kdstage/gradcam.hpp"
#include "kdstage/gradcheck_suite.hpp"
#include "kdstage/model.hpp"
#include "kdstage/synthdata.hpp"
#include "kdstage/trainer.hpp"
#include "run_manifest.hpp"

#ifndef KDSTAGE_VERSION
#define KDSTAGE_VERSION "0.0.0"
#endif

namespace kdstage::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

// Flag values bound by CLI11. Defaults mirror the library defaults.
struct DataFlags {
  SynthConfig config;
};

struct TrainFlags {
  LossWeights weights;
  std::size_t epochs = TrainConfig{}.epochs;
  std::size_t batch_size = TrainConfig{}.batch_size;
  double learning_rate = OptimizerConfig{}.learning_rate;
  double momentum = OptimizerConfig{}.momentum;
  std::string optimizer = to_string(OptimizerConfig{}.kind);

  TrainConfig resolve(TrainMode mode, std::uint64_t seed, std::size_t folds) const {
    TrainConfig c;
    c.weights = weights;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.optimizer.kind = parse_optimizer(optimizer);
    c.optimizer.learning_rate = learning_rate;
    c.optimizer.momentum = momentum;
    c.seed = seed;
    c.mode = mode;
    c.folds = folds;
    c.validate();
    return c;
  }
};

void add_data_flags(CLI::App* sub, DataFlags& f) {
  sub->add_option("--samples-per-class", f.config.samples_per_class, "Samples per class (equal-count mode)");
  sub->add_option("--noise", f.config.noise_sigma, "Gaussian pixel noise sigma");
  sub->add_option("--distractors", f.config.distractor_count, "Confounder bands per image");
  sub->add_option("--folds", f.config.folds, "Cross-validation folds");
  sub->add_flag("--paper-proportions", f.config.paper_proportions, "Use the imbalanced 159/92/92/125/255 class ratios");
}

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--alpha", f.weights.alpha, "Attention loss weight");
  sub->add_option("--beta", f.weights.beta, "Distillation loss weight");
  sub->add_option("--theta", f.weights.theta, "Classification loss weight");
  sub->add_option("--temperature", f.weights.temperature, "Distillation temperature");
  sub->add_option("--epochs", f.epochs, "Training epochs");
  sub->add_option("--batch-size", f.batch_size, "Mini-batch size");
  sub->add_option("--lr", f.learning_rate, "Learning rate");
  sub->add_option("--momentum", f.momentum, "SGD momentum");
  sub->add_option("--optimizer", f.optimizer, "adam or sgd-momentum");
}

// Every long option of `sub` with its given or default value.
std::map<std::string, std::string> collect_options(const CLI::App* sub) {
  std::map<std::string, std::string> out;
  for (const auto* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : " ") + r;
    } else {
      value = opt->get_type_size() == 0 ? "false" : opt->get_default_str();
      // CLI11 renders vector defaults as [a,b] and empty ones as {}.
      if (value == "{}") value.clear();
      if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
        value = value.substr(1, value.size() - 2);
        std::replace(value.begin(), value.end(), ',', ' ');
      }
    }
    out[name] = value;
  }
  return out;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

SampleRefs select_fold(const Dataset& ds, int fold, bool equal) {
  SampleRefs refs;
  for (const auto& s : ds.samples) {
    if (fold < 0 || (s.fold == fold) == equal) refs.push_back(&s);
  }
  if (refs.empty()) throw ConfigError("fold " + std::to_string(fold) + " selects no samples");
  return refs;
}

TrainMode checkpoint_mode(const fs::path& dir) {
  const auto manifest = read_checkpoint_manifest(dir);
  const auto prov = manifest.value("provenance", json::object());
  return parse_mode(prov.value("mode", std::string("student-baseline")));
}

struct Context {
  std::vector<std::string> argv;
  std::ostream& out;
  std::ostream& err;
  Clock::time_point start = Clock::now();

  RunManifest manifest(const CLI::App* sub, const fs::path& output_dir) const {
    RunManifest m;
    m.command = sub->get_name();
    m.argv = argv;
    m.options = collect_options(sub);
    m.output_dir = output_dir;
    m.version = KDSTAGE_VERSION;
    return m;
  }

  void finish(RunManifest& m) const {
    m.artifacts = hash_tree(m.output_dir);
    m.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    write_run_manifest(m);
  }
};

// ---- gen-data --------------------------------------------------------------

struct GenDataFlags {
  DataFlags data;
  fs::path out;
};

int cmd_gen_data(const Context& ctx, const CLI::App* sub, const GenDataFlags& f) {
  f.data.config.validate();
  ensure_dir(f.out);
  const auto ds = generate(f.data.config, f.out);
  auto m = ctx.manifest(sub, f.out);
  m.config = f.data.config;
  m.seeds = {{"master_seed", f.data.config.master_seed}};
  ctx.finish(m);
  const auto counts = f.data.config.class_counts();
  ctx.out << "wrote " << ds.samples.size() << " samples to " << f.out.string() << " (per stage:";
  for (auto c : counts) ctx.out << ' ' << c;
  ctx.out << ")\n";
  return kExitOk;
}

// ---- train -----------------------------------------------------------------

struct TrainCmdFlags {
  TrainFlags train;
  fs::path data;
  fs::path out;
  fs::path teacher;
  std::string mode = "student-baseline";
  std::uint64_t seed = 0;
  int fold = -1;
};

int cmd_train(const Context& ctx, const CLI::App* sub, const TrainCmdFlags& f) {
  const auto mode = parse_mode(f.mode);
  if (mode == TrainMode::StudentDistilled && f.teacher.empty()) {
    throw ConfigError("--mode student-distilled requires --teacher <checkpoint>");
  }
  const auto ds = load_dataset(f.data);
  const auto config = f.train.resolve(mode, f.seed, ds.config.folds);
  const auto refs = select_fold(ds, f.fold, false);
  std::optional<ConvClassifier<float>> teacher;
  if (mode == TrainMode::StudentDistilled) teacher = load_checkpoint(f.teacher, config.model);

  const auto result = train(refs, config, teacher ? &*teacher : nullptr);
  ensure_dir(f.out);
  json provenance = config;
  provenance["train_fold_excluded"] = f.fold;
  provenance["train_samples"] = refs.size();
  save_checkpoint(result.model, f.out, provenance);
  write_training_log(f.out / "training_log.csv", result.log);

  auto m = ctx.manifest(sub, f.out);
  m.config = config;
  m.seeds = {{"seed", f.seed},
             {"init_seed", config.resolved_model().init_seed},
             {"data_master_seed", ds.config.master_seed}};
  m.inputs = {{"data", f.data.string()}};
  if (teacher) m.inputs["teacher"] = f.teacher.string();
  ctx.finish(m);

  const auto& last = result.log.back();
  ctx.out << to_string(mode) << ": " << config.epochs << " epochs on " << refs.size() << " samples, final L_total "
          << fixed(last.total) << ", train_acc " << fixed(last.train_acc) << "; checkpoint in " << f.out.string()
          << "\n";
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalFlags {
  fs::path data;
  fs::path checkpoint;
  fs::path out;
  std::string mode;
  int fold = -1;
};

int cmd_eval(const Context& ctx, const CLI::App* sub, const EvalFlags& f) {
  const auto model = load_checkpoint(f.checkpoint);
  const auto mode = f.mode.empty() ? checkpoint_mode(f.checkpoint) : parse_mode(f.mode);
  const auto ds = load_dataset(f.data);
  const auto refs = select_fold(ds, f.fold, true);
  const auto metrics = evaluate(model, refs, mode);
  std::optional<double> overlap;
  if (mode != TrainMode::Teacher) overlap = mean_overlap(model, refs);

  ensure_dir(f.out);
  {
    auto csv = open_out(f.out / "metrics.csv");
    csv << "model,split,acc,prec,rec,f1,overlap\n" << std::setprecision(9);
    csv << to_string(mode) << ',' << (f.fold < 0 ? std::string("all") : "fold" + std::to_string(f.fold)) << ','
        << metrics.accuracy << ',' << metrics.precision << ',' << metrics.recall << ',' << metrics.f1 << ',';
    if (overlap) csv << *overlap;
    csv << '\n';
    if (!csv) throw IoError("write failed: metrics.csv");
  }
  auto m = ctx.manifest(sub, f.out);
  m.config = {{"mode", to_string(mode)}, {"fold", f.fold}, {"model", model.config()}};
  m.inputs = {{"data", f.data.string()}, {"checkpoint", f.checkpoint.string()}};
  ctx.finish(m);

  ctx.out << to_string(mode) << " on " << refs.size() << " samples: acc " << fixed(metrics.accuracy) << " prec "
          << fixed(metrics.precision) << " rec " << fixed(metrics.recall) << " f1 " << fixed(metrics.f1);
  if (overlap) ctx.out << " overlap " << fixed(*overlap);
  ctx.out << "\n";
  return kExitOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradcheckFlags {
  GradcheckOptions options;
  fs::path out;
  std::size_t identity_pairs = 100;
};

int cmd_gradcheck(const Context& ctx, const CLI::App* sub, const GradcheckFlags& f) {
  const auto start = Clock::now();
  const auto report = run_gradcheck(f.options);
  const bool identity_requested =
      f.options.ops.empty() ||
      std::find(f.options.ops.begin(), f.options.ops.end(), "attention_mse") != f.options.ops.end();
  std::optional<double> identity;
  if (identity_requested) identity = attention_mse_identity_error(f.identity_pairs, f.options.seed);
  const double seconds = std::chrono::duration<double>(Clock::now() - start).count();

  ctx.out << std::left << std::setw(22) << "op" << std::setw(9) << "configs" << std::setw(14) << "max_rel_err"
          << "status\n";
  for (const auto& r : report.results) {
    std::ostringstream err_str;
    err_str << std::scientific << std::setprecision(3) << r.max_rel_error;
    ctx.out << std::left << std::setw(22) << r.op << std::setw(9) << r.configs << std::setw(14) << err_str.str()
            << (r.passed ? "ok" : "FAIL (config " + std::to_string(r.worst_config) + ")") << "\n";
  }
  bool ok = report.passed();
  if (identity) {
    const bool id_ok = *identity < 1e-6;
    ok = ok && id_ok;
    ctx.out << "attention_mse closed form (2/N)(A-M): max abs error " << std::scientific << std::setprecision(3)
            << *identity << " over " << f.identity_pairs << " pairs " << (id_ok ? "ok" : "FAIL") << "\n";
  }
  ctx.out << std::defaultfloat << "max relative error " << report.max_rel_error() << " (tolerance "
          << f.options.tolerance << "), " << fixed(seconds, 2) << " s\n";
  const auto failing = report.failing_ops();
  if (!failing.empty()) {
    ctx.out << "FAILED ops:";
    for (const auto& op : failing) ctx.out << ' ' << op;
    ctx.out << "\n";
  }

  if (!f.out.empty()) {
    ensure_dir(f.out);
    {
      auto csv = open_out(f.out / "gradcheck.csv");
      csv << "op,configs,max_rel_error,worst_config,passed\n" << std::setprecision(9);
      for (const auto& r : report.results) {
        csv << r.op << ',' << r.configs << ',' << r.max_rel_error << ',' << r.worst_config << ','
            << (r.passed ? 1 : 0) << '\n';
      }
    }
    auto m = ctx.manifest(sub, f.out);
    m.config = {{"configs", f.options.configs},
                {"step", f.options.step},
                {"tolerance", f.options.tolerance},
                {"ops", f.options.ops},
                {"identity_pairs", f.identity_pairs}};
    m.seeds = {{"seed", f.options.seed}};
    ctx.finish(m);
  }
  return ok ? kExitOk : kExitFailure;
}

// ---- heatmap ---------------------------------------------------------------

struct HeatmapFlags {
  fs::path data;
  std::vector<std::string> models;  // tag=checkpoint
  std::vector<std::string> ids;
  int fold = -1;
  std::size_t limit = 0;
  fs::path out;
};

int cmd_heatmap(const Context& ctx, const CLI::App* sub, const HeatmapFlags& f) {
  std::vector<std::pair<std::string, fs::path>> models;
  for (const auto& spec : f.models) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
      throw ConfigError("--model expects tag=checkpoint, got '" + spec + "'");
    }
    models.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
  }
  const auto ds = load_dataset(f.data);
  SampleRefs refs;
  if (!f.ids.empty()) {
    for (const auto& id : f.ids) {
      auto it = std::find_if(ds.samples.begin(), ds.samples.end(), [&](const auto& s) { return s.id == id; });
      if (it == ds.samples.end()) throw ConfigError("unknown sample id '" + id + "'");
      refs.push_back(&*it);
    }
  } else {
    refs = select_fold(ds, f.fold, true);
  }
  if (f.limit > 0 && refs.size() > f.limit) refs.resize(f.limit);

  ensure_dir(f.out);
  auto csv = open_out(f.out / "overlap.csv");
  csv << "id,model,overlap\n" << std::setprecision(9);
  json inputs = {{"data", f.data.string()}};
  for (const auto& [tag, path] : models) {
    const auto model = load_checkpoint(path);
    inputs["model:" + tag] = path.string();
    double total = 0;
    for (const auto* s : refs) {
      const auto& mask = s->mask;
      const auto map = student_attention(model, s->full, s->class_index(), mask.values.dim(0), mask.values.dim(1));
      write_pgm(f.out / (s->id + "_" + tag + ".pgm"), map.values);
      const double score = overlap_score(map, mask);
      total += score;
      csv << s->id << ',' << tag << ',' << score << '\n';
    }
    ctx.out << tag << ": " << refs.size() << " heatmaps, mean overlap " << fixed(total / refs.size()) << "\n";
  }
  csv.close();
  if (!csv) throw IoError("write failed: overlap.csv");
  auto m = ctx.manifest(sub, f.out);
  m.config = {{"fold", f.fold}, {"limit", f.limit}, {"ids", f.ids}};
  m.inputs = inputs;
  ctx.finish(m);
  return kExitOk;
}

// ---- experiment ------------------------------------------------------------

struct ExperimentFlags {
  DataFlags data;
  TrainFlags train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t jobs = 1;
  fs::path out;
};

struct ModelSummary {
  std::string name;
  double acc = 0, sd = 0, prec = 0, rec = 0, f1 = 0;
  std::optional<double> overlap;
};

ModelSummary summarize(const std::vector<const KFoldReport*>& per_seed) {
  ModelSummary s;
  s.name = to_string(per_seed.front()->mode);
  std::vector<double> accs;
  double overlap = 0;
  for (const auto* r : per_seed) {
    s.acc += r->mean_accuracy();
    s.prec += r->mean_precision();
    s.rec += r->mean_recall();
    s.f1 += r->mean_f1();
    if (auto o = r->mean_overlap()) {
      overlap += *o;
      s.overlap = 0.0;
    }
    for (const auto& f : r->folds) accs.push_back(f.metrics.accuracy);
  }
  const double n = static_cast<double>(per_seed.size());
  s.acc /= n;
  s.prec /= n;
  s.rec /= n;
  s.f1 /= n;
  if (s.overlap) s.overlap = overlap / n;
  if (accs.size() > 1) {
    double mean = 0, ss = 0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    for (double a : accs) ss += (a - mean) * (a - mean);
    s.sd = std::sqrt(ss / static_cast<double>(accs.size() - 1));
  }
  return s;
}

json fold_json(const KFoldReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    json j = {{"fold", f.fold},
              {"acc", f.metrics.accuracy},
              {"prec", f.metrics.precision},
              {"rec", f.metrics.recall},
              {"f1", f.metrics.f1},
              {"confusion", f.metrics.confusion}};
    if (f.overlap) j["overlap"] = *f.overlap;
    folds.push_back(j);
  }
  return folds;
}

int cmd_experiment(const Context& ctx, const CLI::App* sub, const ExperimentFlags& f) {
  if (f.seeds.empty()) throw ConfigError("--seeds needs at least one seed");
  ExperimentConfig config;
  config.data = f.data.config;
  config.data.validate();
  config.train = f.train.resolve(TrainMode::StudentDistilled, 0, config.data.folds);
  config.seeds = f.seeds;
  config.jobs = std::max<std::size_t>(1, f.jobs);

  const auto report = run_experiment(config, [&](const std::string& msg) { ctx.err << msg << std::endl; });

  std::vector<const KFoldReport*> teachers, baselines, distilled;
  for (const auto& s : report.seeds) {
    teachers.push_back(&s.teacher);
    baselines.push_back(&s.baseline);
    distilled.push_back(&s.distilled);
  }
  const std::vector<ModelSummary> rows = {summarize(teachers), summarize(distilled), summarize(baselines)};
  const double t_acc = rows[0].acc, d_acc = rows[1].acc, b_acc = rows[2].acc;
  const double d_ov = rows[1].overlap.value_or(0), b_ov = rows[2].overlap.value_or(0);

  struct Check {
    std::string name;
    bool passed;
    std::string detail;
  };
  const std::vector<Check> checks = {
      {"ordering teacher > distilled > baseline", t_acc > d_acc && d_acc > b_acc,
       fixed(t_acc) + " > " + fixed(d_acc) + " > " + fixed(b_acc)},
      {"distilled - baseline >= 2 points", d_acc - b_acc >= 0.02, fixed(100 * (d_acc - b_acc), 2) + " points"},
      {"teacher accuracy >= 95%", t_acc >= 0.95, fixed(100 * t_acc, 2) + "%"},
      {"overlap gain >= 0.10", d_ov - b_ov >= 0.10, fixed(d_ov) + " - " + fixed(b_ov) + " = " + fixed(d_ov - b_ov)},
  };

  ensure_dir(f.out);
  {
    auto csv = open_out(f.out / "summary.csv");
    csv << "model,acc,acc_sd,prec,rec,f1,overlap\n" << std::setprecision(9);
    for (const auto& r : rows) {
      csv << r.name << ',' << r.acc << ',' << r.sd << ',' << r.prec << ',' << r.rec << ',' << r.f1 << ',';
      if (r.overlap) csv << *r.overlap;
      csv << '\n';
    }
  }
  json per_seed = json::array();
  for (const auto& s : report.seeds) {
    write_kfold_csv(f.out / ("metrics_seed" + std::to_string(s.seed) + ".csv"), {s.teacher, s.baseline, s.distilled});
    per_seed.push_back({{"seed", s.seed},
                        {"teacher", fold_json(s.teacher)},
                        {"student-baseline", fold_json(s.baseline)},
                        {"student-distilled", fold_json(s.distilled)}});
  }
  json summary = json::object();
  for (const auto& r : rows) {
    summary[r.name] = {{"acc", r.acc}, {"acc_sd", r.sd}, {"prec", r.prec}, {"rec", r.rec}, {"f1", r.f1}};
    if (r.overlap) summary[r.name]["overlap"] = *r.overlap;
  }
  json check_json = json::array();
  for (const auto& c : checks) check_json.push_back({{"check", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  {
    auto out = open_out(f.out / "experiment.json");
    out << json{{"summary", summary}, {"seeds", per_seed}, {"checks", check_json}}.dump(2) << '\n';
  }

  auto m = ctx.manifest(sub, f.out);
  m.config = {{"data", config.data}, {"train", config.train}, {"jobs", config.jobs}};
  m.seeds = {{"master_seeds", f.seeds}};
  ctx.finish(m);

  ctx.out << std::left << std::setw(20) << "model" << std::right << std::setw(9) << "acc" << std::setw(9) << "sd"
          << std::setw(9) << "prec" << std::setw(9) << "rec" << std::setw(9) << "f1" << std::setw(10) << "overlap"
          << "\n";
  for (const auto& r : rows) {
    ctx.out << std::left << std::setw(20) << r.name << std::right << std::setw(9) << fixed(100 * r.acc, 2)
            << std::setw(9) << fixed(100 * r.sd, 2) << std::setw(9) << fixed(100 * r.prec, 2) << std::setw(9)
            << fixed(100 * r.rec, 2) << std::setw(9) << fixed(100 * r.f1, 2) << std::setw(10)
            << (r.overlap ? fixed(*r.overlap) : std::string("-")) << "\n";
  }
  bool ok = true;
  for (const auto& c : checks) {
    ctx.out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    ok = ok && c.passed;
  }
  ctx.out << "per-fold results in " << (f.out / "experiment.json").string() << "\n";
  return ok ? kExitOk : kExitFailure;
}

// ---- replay ----------------------------------------------------------------

struct ReplayFlags {
  fs::path manifest;
  fs::path out;
};

int cmd_replay(const Context& ctx, const ReplayFlags& f) {
  const auto recorded = read_run_manifest(f.manifest);
  const auto command = recorded.at("command").get<std::string>();
  auto options = recorded.at("options").get<std::map<std::string, std::string>>();
  if (!options.count("out")) throw ConfigError("replay: the recorded command has no --out");
  options["out"] = f.out.string();

  ensure_dir(f.out);
  // Kept beside the output directory so it is not hashed as an artifact.
  const fs::path config_path = f.out.string() + ".replay.ini";
  {
    auto ini = open_out(config_path);
    ini << "[" << command << "]\n";
    for (const auto& [key, value] : options) {
      if (key == "config" || value.empty()) continue;
      ini << key << "=" << value << "\n";
    }
  }
  std::ostringstream sink;
  const int code = run({ctx.argv.front(), "--config", config_path.string(), command}, sink, ctx.err);
  fs::remove(config_path);
  ctx.out << sink.str();
  if (code != kExitOk && code != kExitFailure) return code;

  const auto replayed = read_run_manifest(f.out / kRunManifestName);
  const auto before = recorded.at("artifacts").get<std::map<std::string, std::string>>();
  const auto after = replayed.at("artifacts").get<std::map<std::string, std::string>>();
  std::size_t mismatches = 0;
  for (const auto& [path, hash] : before) {
    auto it = after.find(path);
    if (it == after.end()) {
      ctx.out << "missing: " << path << "\n";
      ++mismatches;
    } else if (it->second != hash) {
      ctx.out << "differs: " << path << "\n";
      ++mismatches;
    }
  }
  for (const auto& [path, hash] : after) {
    if (!before.count(path)) {
      ctx.out << "extra: " << path << "\n";
      ++mismatches;
    }
  }
  ctx.out << "replay of " << command << ": " << before.size() << " artifacts, " << mismatches << " mismatches\n";
  return mismatches == 0 ? kExitOk : kExitFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Teacher-student distillation with Grad-CAM attention supervision on synthetic staging data",
               "kdstage"};
  app.set_version_flag("--version", KDSTAGE_VERSION);
  app.set_config("--config", "", "INI file with one [command] section of flag=value lines")->check(CLI::ExistingFile);
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GenDataFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.data.config.master_seed, "Master seed");
  add_data_flags(gen_cmd, gen.data);

  TrainCmdFlags tr;
  auto* train_cmd = app.add_subcommand("train", "Train one model and save a checkpoint");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();
  train_cmd->add_option("--mode", tr.mode, "teacher, student-baseline or student-distilled");
  train_cmd->add_option("--teacher", tr.teacher, "Teacher checkpoint (student-distilled)");
  train_cmd->add_option("--seed", tr.seed, "Training seed (init, shuffle)");
  train_cmd->add_option("--fold", tr.fold, "Hold out this fold (-1 trains on every sample)");
  add_train_flags(train_cmd, tr.train);

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and write a metrics CSV");
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--mode", ev.mode, "Input convention; defaults to the checkpoint's training mode");
  eval_cmd->add_option("--fold", ev.fold, "Evaluate this fold only (-1 for every sample)");

  GradcheckFlags gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare tape gradients with central finite differences");
  gc_cmd->add_option("--op", gc.options.ops, "Restrict to these ops (repeatable)");
  gc_cmd->add_option("--configs", gc.options.configs, "Seeded configurations per op");
  gc_cmd->add_option("--seed", gc.options.seed, "Seed");
  gc_cmd->add_option("--step", gc.options.step, "Finite-difference step");
  gc_cmd->add_option("--tolerance", gc.options.tolerance, "Maximum relative error");
  gc_cmd->add_option("--identity-pairs", gc.identity_pairs, "Pairs for the attention_mse closed-form check");
  gc_cmd->add_option("--out", gc.out, "Optional directory for gradcheck.csv");
  gc_cmd->add_option("--inject-bug", gc.options.inject_bug, "Test hook: corrupt this op's gradient")
      ->group("");
  gc_cmd->add_flag_callback("--list", [&] {
    for (const auto& n : gradcheck_op_names()) out << n << "\n";
    throw CLI::Success();
  }, "List op names");

  HeatmapFlags hm;
  auto* hm_cmd = app.add_subcommand("heatmap", "Export Grad-CAM heatmaps as PGM plus an overlap CSV");
  hm_cmd->add_option("--data", hm.data, "Dataset directory")->required();
  hm_cmd->add_option("--model", hm.models, "tag=checkpoint (repeatable)")->required();
  hm_cmd->add_option("--ids", hm.ids, "Sample ids (default: the selected fold)");
  hm_cmd->add_option("--fold", hm.fold, "Fold to export (-1 for every sample)");
  hm_cmd->add_option("--limit", hm.limit, "At most this many samples (0: no limit)");
  hm_cmd->add_option("--out", hm.out, "Output directory")->required();

  ExperimentFlags ex;
  auto* ex_cmd = app.add_subcommand("experiment", "k-fold teacher, baseline and distilled comparison over seeds");
  ex_cmd->add_option("--seeds", ex.seeds, "Master seeds");
  ex_cmd->add_option("--jobs", ex.jobs, "Folds trained concurrently");
  ex_cmd->add_option("--out", ex.out, "Output directory")->required();
  add_data_flags(ex_cmd, ex.data);
  add_train_flags(ex_cmd, ex.train);

  ReplayFlags rp;
  auto* rp_cmd = app.add_subcommand("replay", "Rerun a recorded command and compare artifact hashes");
  rp_cmd->add_option("--manifest", rp.manifest, "run_manifest.json of the original run")->required();
  rp_cmd->add_option("--out", rp.out, "Fresh output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const Context ctx{args, out, err};
  try {
    if (*gen_cmd) return cmd_gen_data(ctx, gen_cmd, gen);
    if (*train_cmd) return cmd_train(ctx, train_cmd, tr);
    if (*eval_cmd) return cmd_eval(ctx, eval_cmd, ev);
    if (*gc_cmd) return cmd_gradcheck(ctx, gc_cmd, gc);
    if (*hm_cmd) return cmd_heatmap(ctx, hm_cmd, hm);
    if (*ex_cmd) return cmd_experiment(ctx, ex_cmd, ex);
    if (*rp_cmd) return cmd_replay(ctx, rp);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CorruptDataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace kdstage::cli
