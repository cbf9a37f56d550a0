#include "kdstage/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "kdstage/error.hpp"

namespace kdstage {

template <typename T>
BasicTensor<T> finite_difference_grad(const std::function<T(const BasicTensor<T>&)>& f,
                                      const BasicTensor<T>& x, T step) {
  if (!(step > T(0))) throw ContractError("finite_difference_grad: step must be positive");
  auto probe = x.detach();
  auto values = probe.mutable_values();
  std::vector<T> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + step;
    const T up = f(probe);
    values[i] = saved - step;
    const T down = f(probe);
    values[i] = saved;
    grad[i] = (up - down) / (T(2) * step);
  }
  return BasicTensor<T>(x.shape(), std::move(grad));
}

template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    diff += d * d;
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nb));
  if (denom < floor) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

template BasicTensor<float> finite_difference_grad(const std::function<float(const BasicTensor<float>&)>&,
                                                   const BasicTensor<float>&, float);
template BasicTensor<double> finite_difference_grad(const std::function<double(const BasicTensor<double>&)>&,
                                                    const BasicTensor<double>&, double);
template double relative_error(std::span<const float>, std::span<const float>, double);
template double relative_error(std::span<const double>, std::span<const double>, double);

}  // namespace kdstage
