#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kdstage/tensor.hpp"

namespace kdstage {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct Pool2dParams {
  std::size_t window = 2;
  std::size_t stride = 2;
};

// Reverse-mode autodiff record.
//
// Every differentiable primitive is a member of the tape. An operation is
// recorded only when at least one input requires a gradient; otherwise the
// tape just evaluates it. Outputs of recorded operations are non-leaf tensors
// that require gradients.
//
// Policy: backward() consumes the tape (it is cleared afterwards) and adds
// into the .grad of every requires_grad leaf, so leaf gradients accumulate
// across tapes until zero_grad(). gradient() is a side-effect-free partial
// sweep that leaves the tape intact.
//
// A tape is single-threaded. Tapes that share no tensors may run
// concurrently.
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;
  ~BasicTape() { clear(); }

  // Elementwise, identical shapes.
  TensorT add(const TensorT& a, const TensorT& b);
  TensorT sub(const TensorT& a, const TensorT& b);
  TensorT mul(const TensorT& a, const TensorT& b);
  TensorT scale(const TensorT& a, T factor);
  TensorT relu(const TensorT& a);
  TensorT exp(const TensorT& a);
  // log(max(a, floor)); the gradient is zero where the floor is active.
  // With floor == 0 a non-positive input is a numeric-domain error.
  TensorT log(const TensorT& a, T floor = T(0));

  // (m,k)x(k,n) -> (m,n) or (m,k)x(k) -> (m).
  TensorT matmul(const TensorT& a, const TensorT& b);
  // x: (C,H,W), weight: (O,C,kh,kw), bias: (O) or undefined.
  TensorT conv2d(const TensorT& x, const TensorT& weight, const TensorT& bias,
                 Conv2dParams params = {});
  // Ties route the gradient to the first maximum in row-major window order.
  TensorT max_pool2d(const TensorT& x, Pool2dParams params = {});
  // (C,H,W) -> (C)
  TensorT global_average_pool(const TensorT& x);
  TensorT reshape(const TensorT& x, Shape shape);

  TensorT sum(const TensorT& a);
  TensorT mean(const TensorT& a);
  // a[index] as a scalar.
  TensorT select(const TensorT& a, std::size_t index);

  // Temperature softmax over a 1-D tensor, max-subtracted.
  TensorT softmax(const TensorT& logits, T temperature = T(1));

  // Weighted channel sum r = sum_c w_c * x_c for x: (C,h,w). The weights are
  // constants: no gradient flows into them even if they require one.
  TensorT channel_weighted_sum(const TensorT& x, std::span<const T> weights);
  // (x - min) / (max - min); a constant input maps to all zeros.
  TensorT min_max_normalize(const TensorT& x);
  // (h,w) -> (out_h,out_w), align-corners bilinear.
  TensorT upsample_bilinear(const TensorT& x, std::size_t out_h, std::size_t out_w);

  // Populates .grad on every requires_grad leaf reachable from `loss` (and on
  // recorded intermediates), then clears the tape.
  void backward(const TensorT& loss);

  // d(output)/d(wrt) as a detached tensor. Leaf gradients are untouched.
  TensorT gradient(const TensorT& output, const TensorT& wrt) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  // Detaches every recorded output from this tape and drops the record.
  void clear();

 private:
  using NodePtr = std::shared_ptr<detail::TensorNode<T>>;
  // Receives the output gradient and one accumulation target per input; an
  // input that needs no gradient gets an empty span.
  using BackwardFn = std::function<void(std::span<const T>, std::span<const std::span<T>>)>;

  struct Entry {
    const char* op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    BackwardFn backward;
  };

  TensorT emit(const char* op, Shape shape, std::vector<T> values,
               std::initializer_list<TensorT> inputs, BackwardFn backward);
  using GradMap = std::unordered_map<const detail::TensorNode<T>*, std::vector<T>>;
  // Reverse sweep from `root` over entries with index >= `first`.
  GradMap sweep(const NodePtr& root, std::size_t first) const;

  std::vector<Entry> entries_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

}  // namespace kdstage
