#pragma once

#include <functional>

#include "kdstage/tensor.hpp"

namespace kdstage {

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element
// of x. `f` must be deterministic; x itself is not modified.
template <typename T>
BasicTensor<T> finite_difference_grad(const std::function<T(const BasicTensor<T>&)>& f,
                                      const BasicTensor<T>& x, T step);

// ||a - b|| / max(||a||, ||b||), or the absolute error ||a - b|| when both
// norms are below `floor`.
template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-8);

}  // namespace kdstage
