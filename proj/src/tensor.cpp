#include "kdstage/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "kdstage/error.hpp"

namespace kdstage {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
void require_finite(std::span<const T> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << values[i] << " at index " << i;
      throw NumericDomainError(os.str());
    }
  }
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  require_finite<T>(values, "tensor");
  node_ = std::make_shared<detail::TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = shape_size(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

namespace {
template <typename Node>
const Node& deref(const std::shared_ptr<Node>& node) {
  if (!node) throw ContractError("tensor: use of an undefined tensor");
  return *node;
}
}  // namespace

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return deref(node_).shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t BasicTensor<T>::size() const {
  return deref(node_).value.size();
}

template <typename T>
std::span<const T> BasicTensor<T>::values() const {
  return deref(node_).value;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
  deref(node_);
  return node_->value;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (size() != 1) throw ContractError("tensor: item() on tensor of shape " + shape_str(shape()));
  return values()[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return deref(node_).requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
  deref(node_);
  if (node_->tape != nullptr) throw ContractError("tensor: requires_grad is fixed for recorded outputs");
  node_->requires_grad = on;
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return deref(node_).tape == nullptr;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return !deref(node_).grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  const auto& n = deref(node_);
  if (n.grad.empty()) throw ContractError("tensor: no gradient populated");
  return n.grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  deref(node_);
  node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  const auto& n = deref(node_);
  auto copy = std::make_shared<detail::TensorNode<T>>();
  copy->shape = n.shape;
  copy->value = n.value;
  return BasicTensor(std::move(copy));
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void require_finite<float>(std::span<const float>, const std::string&);
template void require_finite<double>(std::span<const double>, const std::string&);

}  // namespace kdstage
