#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kdstage {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class BasicTape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  // Set when the node is the output of a recorded operation.
  const void* tape = nullptr;
  std::size_t tape_index = 0;
};

}  // namespace detail

// N-dimensional real array with optional gradient tracking.
//
// A tensor is a handle: copies share storage, which is what lets a recorded
// operation refer back to its inputs. Use detach() for an independent copy.
// Construction validates that product(shape) == size and that every value
// is finite.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const T> values() const;
  // Mutating values of a tensor already consumed by a live tape invalidates
  // that tape's backward pass; only do this on leaves between steps.
  std::span<T> mutable_values();
  T operator[](std::size_t i) const { return values()[i]; }
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  BasicTensor detach() const;
  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

  template <typename U>
  BasicTensor<U> cast() const;

 private:
  friend class BasicTape<T>;
  explicit BasicTensor(std::shared_ptr<detail::TensorNode<T>> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Throws NumericDomainError naming `what` when any value is NaN or Inf.
template <typename T>
void require_finite(std::span<const T> values, const std::string& what);

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
  auto v = values();
  return BasicTensor<U>(shape(), std::vector<U>(v.begin(), v.end()));
}

}  // namespace kdstage
