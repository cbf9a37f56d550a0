#include "kdstage/losses.hpp"

#include <cmath>

#include "kdstage/error.hpp"

namespace kdstage {

void LossWeights::validate() const {
  if (!(alpha >= 0) || !(beta >= 0) || !(theta >= 0)) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ConfigError("distillation temperature must be positive");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"alpha", w.alpha}, {"beta", w.beta}, {"theta", w.theta}, {"temperature", w.temperature}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.alpha = j.at("alpha").get<double>();
  w.beta = j.at("beta").get<double>();
  w.theta = j.at("theta").get<double>();
  w.temperature = j.at("temperature").get<double>();
}

template <typename T>
BasicTensor<T> softmax_t(BasicTape<T>& tape, const BasicTensor<T>& logits, T temperature) {
  if (!(temperature > T(0))) {
    throw NumericDomainError("softmax_t: temperature must be positive, got " + std::to_string(temperature));
  }
  return tape.softmax(logits, temperature);
}

template <typename T>
BasicTensor<T> kl_distill(BasicTape<T>& tape, const BasicTensor<T>& teacher_logits,
                          const BasicTensor<T>& student_logits, T temperature) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("kl_distill: teacher logits " + shape_str(teacher_logits.shape()) + " vs student logits " +
                     shape_str(student_logits.shape()));
  }
  BasicTape<T> constants;
  const auto p = softmax_t(constants, teacher_logits.detach(), temperature);
  const auto log_p = constants.log(p, static_cast<T>(kLogFloor));

  const auto q = softmax_t(tape, student_logits, temperature);
  const auto log_q = tape.log(q, static_cast<T>(kLogFloor));
  const auto kl = tape.sum(tape.mul(p, tape.sub(log_p, log_q)));
  return tape.scale(kl, temperature * temperature);
}

template <typename T>
BasicTensor<T> cross_entropy(BasicTape<T>& tape, const BasicTensor<T>& logits, std::size_t label) {
  if (logits.ndim() != 1) throw ShapeError("cross_entropy: logits must be 1-D, got " + shape_str(logits.shape()));
  if (label >= logits.size()) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(logits.size()) + " classes");
  }
  const auto probs = tape.softmax(logits, T(1));
  return tape.scale(tape.log(tape.select(probs, label), static_cast<T>(kLogFloor)), T(-1));
}

template <typename T>
BasicTensor<T> attention_mse(BasicTape<T>& tape, const BasicTensor<T>& heatmap, const BasicTensor<T>& mask) {
  if (heatmap.shape() != mask.shape()) {
    throw ShapeError("attention_mse: heatmap " + shape_str(heatmap.shape()) + " vs mask " +
                     shape_str(mask.shape()));
  }
  constexpr T slack = static_cast<T>(1e-6);
  auto in_unit = [](std::span<const T> v) {
    for (T x : v) {
      if (x < -slack || x > T(1) + slack) return false;
    }
    return true;
  };
  if (!in_unit(heatmap.values())) throw NumericDomainError("attention_mse: heatmap values outside [0,1]");
  if (!in_unit(mask.values())) throw NumericDomainError("attention_mse: mask values outside [0,1]");
  const auto diff = tape.sub(heatmap, mask);
  return tape.mean(tape.mul(diff, diff));
}

template <typename T>
BasicTensor<T> total_loss(BasicTape<T>& tape, const BasicTensor<T>& attn, const BasicTensor<T>& dist,
                          const BasicTensor<T>& cls, const LossWeights& weights) {
  for (const auto* part : {&attn, &dist, &cls}) {
    if (part->size() != 1) throw ContractError("total_loss: components must be scalars");
    require_finite<T>(part->values(), "total_loss");
  }
  const auto weighted_attn = tape.scale(attn, static_cast<T>(weights.alpha));
  const auto weighted_dist = tape.scale(dist, static_cast<T>(weights.beta));
  const auto weighted_cls = tape.scale(cls, static_cast<T>(weights.theta));
  return tape.add(tape.add(weighted_attn, weighted_dist), weighted_cls);
}

#define KDSTAGE_INSTANTIATE(T)                                                                         \
  template BasicTensor<T> softmax_t(BasicTape<T>&, const BasicTensor<T>&, T);                          \
  template BasicTensor<T> kl_distill(BasicTape<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T); \
  template BasicTensor<T> cross_entropy(BasicTape<T>&, const BasicTensor<T>&, std::size_t);           \
  template BasicTensor<T> attention_mse(BasicTape<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> total_loss(BasicTape<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                     const BasicTensor<T>&, const LossWeights&);
KDSTAGE_INSTANTIATE(float)
KDSTAGE_INSTANTIATE(double)
#undef KDSTAGE_INSTANTIATE

}  // namespace kdstage
