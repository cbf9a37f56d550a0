#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kdstage {

struct ClassScores {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

// Rows are true classes, columns predictions. Weighted averages use class
// support as weights, so weighted recall always equals accuracy. Precision
// of a never-predicted class is 0, and F1 is 0 when P + R = 0.
struct Metrics {
  std::vector<std::vector<std::size_t>> confusion;
  std::size_t total = 0;
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::vector<ClassScores> per_class;
};

Metrics metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion);
Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::size_t num_classes);

}  // namespace kdstage
