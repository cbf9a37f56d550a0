#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kdstage/model.hpp"

namespace kdstage {

enum class OptimizerKind { Adam, SgdMomentum };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
};

// Per-parameter moments, in parameter order.
struct OptimizerState {
  std::size_t step = 0;
  std::vector<std::vector<float>> first;
  std::vector<std::vector<float>> second;
};

// One in-place update of every parameter from its .grad; parameters without
// a gradient are treated as having a zero gradient. Gradients are left as is.
void optimizer_step(std::vector<NamedParameter<float>>& params, OptimizerState& state, const OptimizerConfig& config);

}  // namespace kdstage
