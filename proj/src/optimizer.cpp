#include "kdstage/optimizer.hpp"

#include <cmath>

#include "kdstage/error.hpp"

namespace kdstage {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd-momentum"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd-momentum" || name == "sgd") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd-momentum)");
}

void optimizer_step(std::vector<NamedParameter<float>>& params, OptimizerState& state, const OptimizerConfig& config) {
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.tensor.size(), 0.0f);
      state.second.emplace_back(config.kind == OptimizerKind::Adam ? p.tensor.size() : 0, 0.0f);
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("optimizer: state does not match parameter list");
  ++state.step;
  const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto values = tensor.mutable_values();
    auto& m = state.first[i];
    if (m.size() != values.size()) throw ShapeError("optimizer: state shape mismatch for " + params[i].name);
    std::span<const float> grad;
    if (tensor.has_grad()) grad = tensor.grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      if (config.kind == OptimizerKind::SgdMomentum) {
        m[j] = static_cast<float>(config.momentum * m[j] + g);
        values[j] = static_cast<float>(values[j] - config.learning_rate * m[j]);
      } else {
        auto& v = state.second[i];
        m[j] = static_cast<float>(config.beta1 * m[j] + (1 - config.beta1) * g);
        v[j] = static_cast<float>(config.beta2 * v[j] + (1 - config.beta2) * g * g);
        const double m_hat = m[j] / bias1;
        const double v_hat = v[j] / bias2;
        values[j] = static_cast<float>(values[j] - config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon));
      }
    }
    require_finite<float>(values, "optimizer_step " + params[i].name);
  }
}

}  // namespace kdstage
