#include "kdstage/metrics.hpp"

#include "kdstage/error.hpp"

namespace kdstage {

Metrics metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  const std::size_t k = confusion.size();
  for (const auto& row : confusion) {
    if (row.size() != k) throw ShapeError("metrics: confusion matrix must be square");
  }
  Metrics m;
  m.confusion = std::move(confusion);
  std::size_t correct = 0;
  std::vector<std::size_t> predicted(k, 0);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t p = 0; p < k; ++p) {
      m.total += m.confusion[t][p];
      predicted[p] += m.confusion[t][p];
    }
    correct += m.confusion[t][t];
  }
  if (m.total == 0) throw ContractError("metrics: empty evaluation set");
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.total);
  m.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    auto& s = m.per_class[c];
    for (std::size_t p = 0; p < k; ++p) s.support += m.confusion[c][p];
    const double tp = static_cast<double>(m.confusion[c][c]);
    s.precision = predicted[c] ? tp / static_cast<double>(predicted[c]) : 0.0;
    s.recall = s.support ? tp / static_cast<double>(s.support) : 0.0;
    s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    const double weight = static_cast<double>(s.support) / static_cast<double>(m.total);
    m.precision += weight * s.precision;
    m.recall += weight * s.recall;
    m.f1 += weight * s.f1;
  }
  return m;
}

Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::size_t num_classes) {
  if (truth.size() != predicted.size()) throw ShapeError("metrics: label and prediction counts differ");
  std::vector<std::vector<std::size_t>> confusion(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) throw ContractError("metrics: class out of range");
    ++confusion[truth[i]][predicted[i]];
  }
  return metrics_from_confusion(std::move(confusion));
}

}  // namespace kdstage
