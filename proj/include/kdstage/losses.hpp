#pragma once

#include <cstddef>

#include "json.hpp"
#include "kdstage/tape.hpp"

namespace kdstage {

// Floor applied wherever the log of a probability is taken.
inline constexpr double kLogFloor = 1e-12;

// Weights of the composite student objective
//   alpha * L_attn + beta * L_dist + theta * L_cls
// and the distillation temperature.
struct LossWeights {
  double alpha = 0.01;
  double beta = 0.8;
  double theta = 0.2;
  double temperature = 3.0;

  bool operator==(const LossWeights&) const = default;
  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// exp(z_k / T) / sum_j exp(z_j / T), max-subtracted. T <= 0 is a
// NumericDomainError.
template <typename T>
BasicTensor<T> softmax_t(BasicTape<T>& tape, const BasicTensor<T>& logits, T temperature);

// T^2 * sum_k P_k (log P_k - log Q_k) with P = softmax_t(teacher), Q =
// softmax_t(student). The teacher side is a constant: nothing flows back into
// teacher_logits even when they require gradients.
template <typename T>
BasicTensor<T> kl_distill(BasicTape<T>& tape, const BasicTensor<T>& teacher_logits,
                          const BasicTensor<T>& student_logits, T temperature);

// -log softmax(logits)[label] at T = 1.
template <typename T>
BasicTensor<T> cross_entropy(BasicTape<T>& tape, const BasicTensor<T>& logits, std::size_t label);

// (1/N) sum_i (heatmap_i - mask_i)^2 over the N grid cells. Both inputs must
// lie in [0, 1].
template <typename T>
BasicTensor<T> attention_mse(BasicTape<T>& tape, const BasicTensor<T>& heatmap, const BasicTensor<T>& mask);

template <typename T>
BasicTensor<T> total_loss(BasicTape<T>& tape, const BasicTensor<T>& attn, const BasicTensor<T>& dist,
                          const BasicTensor<T>& cls, const LossWeights& weights);

}  // namespace kdstage
