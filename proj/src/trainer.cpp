#include "kdstage/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "kdstage/error.hpp"
#include "kdstage/gradcam.hpp"
#include "kdstage/rng.hpp"

namespace kdstage {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Teacher:
      return "teacher";
    case TrainMode::StudentBaseline:
      return "student-baseline";
    case TrainMode::StudentDistilled:
      return "student-distilled";
  }
  return "unknown";
}

TrainMode parse_mode(const std::string& name) {
  if (name == "teacher") return TrainMode::Teacher;
  if (name == "student-baseline") return TrainMode::StudentBaseline;
  if (name == "student-distilled") return TrainMode::StudentDistilled;
  throw ConfigError("unknown mode '" + name + "' (expected teacher, student-baseline or student-distilled)");
}

void TrainConfig::validate() const {
  weights.validate();
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(optimizer.learning_rate > 0)) throw ConfigError("train: learning rate must be positive");
  if (folds < 2) throw ConfigError("train: folds must be >= 2");
  model.validate();
}

LossWeights TrainConfig::effective_weights() const {
  if (mode != TrainMode::Teacher) return weights;
  auto w = weights;
  w.alpha = 0;
  w.beta = 0;
  w.theta = 1;
  return w;
}

ConvNetConfig TrainConfig::resolved_model() const {
  auto m = model;
  m.init_seed = derive_seed(seed, mode == TrainMode::Teacher ? "teacher-init" : "student-init");
  return m;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"loss_weights", c.effective_weights()},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"optimizer", to_string(c.optimizer.kind)},
       {"learning_rate", c.optimizer.learning_rate},
       {"seed", c.seed},
       {"folds", c.folds},
       {"model", c.resolved_model()}};
}

const Tensor& model_input(const SynthSample& sample, TrainMode mode) {
  return mode == TrainMode::Teacher ? sample.crop : sample.full;
}

Tensor distill_inputs(const ConvClassifier<float>& teacher, const SynthSample& sample) {
  Tape tape;
  return teacher.forward(tape, sample.crop).logits.detach();
}

namespace {

std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TrainResult train(const SampleRefs& samples, const TrainConfig& config, const ConvClassifier<float>* teacher) {
  config.validate();
  if (samples.empty()) throw ContractError("train: empty training set");
  if (config.mode == TrainMode::StudentDistilled && teacher == nullptr) {
    throw ConfigError("train: student-distilled mode requires a teacher checkpoint");
  }
  const auto weights = config.effective_weights();
  const auto model_config = config.resolved_model();
  if (teacher != nullptr && config.mode == TrainMode::StudentDistilled &&
      teacher->config().num_classes != model_config.num_classes) {
    throw ConfigError("train: teacher and student disagree on num_classes");
  }
  for (const auto* s : samples) {
    if (model_input(*s, config.mode).shape() != model_config.input_shape()) {
      throw ConfigError("train: sample " + s->id + " does not match the model input shape");
    }
    if (s->class_index() >= model_config.num_classes) throw ConfigError("train: label out of range in " + s->id);
  }

  TrainResult result{ConvClassifier<float>(model_config), {}};
  auto& model = result.model;
  model.set_trainable(true);

  std::vector<Tensor> teacher_logits;
  if (config.mode == TrainMode::StudentDistilled) {
    teacher_logits.reserve(samples.size());
    for (const auto* s : samples) teacher_logits.push_back(distill_inputs(*teacher, *s));
  }

  OptimizerState state;
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(samples.size());
  const float temperature = static_cast<float>(weights.temperature);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    EpochLog log;
    log.epoch = epoch;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Tape tape;
      model.zero_grad();
      Tensor batch_total;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const SynthSample& sample = *samples[idx];
        const auto forward = model.forward(tape, model_input(sample, config.mode));
        const std::size_t label = sample.class_index();
        Tensor total;
        if (config.mode == TrainMode::StudentDistilled) {
          const auto& mask = sample.mask.values;
          auto pass = attention_from_forward(tape, forward, label, mask.dim(0), mask.dim(1));
          const auto attn = attention_mse(tape, pass.map.values, mask);
          const auto dist = kl_distill(tape, teacher_logits[idx], forward.logits, temperature);
          total = total_loss(tape, attn, dist, pass.cls_loss, weights);
          log.attn += attn.item();
          log.dist += dist.item();
          log.cls += pass.cls_loss.item();
        } else {
          total = cross_entropy(tape, forward.logits, label);
          log.cls += total.item();
        }
        log.total += total.item();
        if (argmax(forward.logits.values()) == label) ++correct;
        batch_total = batch_total.defined() ? tape.add(batch_total, total) : total;
      }
      const auto batch_loss = tape.scale(batch_total, 1.0f / static_cast<float>(end - start));
      tape.backward(batch_loss);
      optimizer_step(model.parameters(), state, config.optimizer);
    }
    const double n = static_cast<double>(samples.size());
    log.total /= n;
    log.attn /= n;
    log.dist /= n;
    log.cls /= n;
    log.train_acc = static_cast<double>(correct) / n;
    result.log.push_back(log);
  }
  model.zero_grad();
  model.set_trainable(false);
  return result;
}

std::size_t predict(const ConvClassifier<float>& model, const Tensor& input) {
  return argmax(model.logits(input).values());
}

Metrics evaluate(const ConvClassifier<float>& model, const SampleRefs& samples, TrainMode mode) {
  if (samples.empty()) throw ContractError("evaluate: empty split");
  std::vector<std::size_t> truth, predicted;
  for (const auto* s : samples) {
    truth.push_back(s->class_index());
    predicted.push_back(predict(model, model_input(*s, mode)));
  }
  return compute_metrics(truth, predicted, model.config().num_classes);
}

double mean_overlap(const ConvClassifier<float>& model, const SampleRefs& samples) {
  if (samples.empty()) throw ContractError("mean_overlap: empty split");
  double acc = 0;
  for (const auto* s : samples) {
    const auto map = student_attention(model, s->full, s->class_index(), s->mask.values.dim(0),
                                       s->mask.values.dim(1));
    acc += overlap_score(map, s->mask);
  }
  return acc / static_cast<double>(samples.size());
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,L_total,L_attn,L_dist,L_cls,train_acc\n";
  out << std::setprecision(9);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.total << ',' << e.attn << ',' << e.dist << ',' << e.cls << ',' << e.train_acc << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace kdstage
