#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kdstage {

// Seeded 64-bit comparison of tape gradients against central differences for
// every primitive, every loss, the Grad-CAM chain (detached weights) and a
// small model end to end.
struct GradcheckOptions {
  std::size_t configs = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  std::vector<std::string> ops;  // empty: all
  // Test-only negative control: perturbs the tape gradient of this op so the
  // report must flag it.
  std::string inject_bug;
};

struct GradcheckResult {
  std::string op;
  std::size_t configs = 0;
  double max_rel_error = 0;
  std::size_t worst_config = 0;
  // attention_mse only: max |grad - (2/N)(A - M)|.
  double closed_form_error = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;

  bool passed() const;
  double max_rel_error() const;
  std::vector<std::string> failing_ops() const;
};

const std::vector<std::string>& gradcheck_op_names();

// Throws ConfigError for an unknown op name.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

// Largest elementwise |d attention_mse / d heatmap - (2/N)(heatmap - mask)|
// over `pairs` seeded (heatmap, mask) pairs.
double attention_mse_identity_error(std::size_t pairs, std::uint64_t seed);

}  // namespace kdstage
