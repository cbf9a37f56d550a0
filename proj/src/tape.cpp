#include "kdstage/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "kdstage/error.hpp"
#include "kernels.hpp"

namespace kdstage {

namespace {

std::string mismatch(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  return os.str();
}

template <typename T>
void require_same_shape(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(mismatch(op, a.shape(), b.shape()));
}

template <typename T>
void require_rank(const char* op, const BasicTensor<T>& a, std::size_t rank) {
  if (a.ndim() != rank) {
    std::ostringstream os;
    os << op << ": expected rank " << rank << ", got shape " << shape_str(a.shape());
    throw ShapeError(os.str());
  }
}

}  // namespace

template <typename T>
BasicTensor<T> BasicTape<T>::emit(const char* op, Shape shape, std::vector<T> values,
                                  std::initializer_list<TensorT> inputs, BackwardFn backward) {
  require_finite<T>(values, op);
  auto node = std::make_shared<detail::TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || (in.defined() && in.requires_grad());
  if (tracked) {
    node->requires_grad = true;
    node->tape = this;
    node->tape_index = entries_.size();
    Entry entry{op, {}, node, std::move(backward)};
    entry.inputs.reserve(inputs.size());
    for (const auto& in : inputs) entry.inputs.push_back(in.node_);
    entries_.push_back(std::move(entry));
  }
  return TensorT(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTape<T>::add(const TensorT& a, const TensorT& b) {
  require_same_shape("add", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return emit("add", a.shape(), std::move(out), {a, b},
              [](std::span<const T> g, std::span<const std::span<T>> in) {
                for (auto sink : in) {
                  for (std::size_t i = 0; i < sink.size(); ++i) sink[i] += g[i];
                }
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::sub(const TensorT& a, const TensorT& b) {
  require_same_shape("sub", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return emit("sub", a.shape(), std::move(out), {a, b},
              [](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i];
                for (std::size_t i = 0; i < in[1].size(); ++i) in[1][i] -= g[i];
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::mul(const TensorT& a, const TensorT& b) {
  require_same_shape("mul", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return emit("mul", a.shape(), std::move(out), {a, b},
              [an = a.node_, bn = b.node_](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i] * bn->value[i];
                for (std::size_t i = 0; i < in[1].size(); ++i) in[1][i] += g[i] * an->value[i];
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::scale(const TensorT& a, T factor) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return emit("scale", a.shape(), std::move(out), {a},
              [factor](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i] * factor;
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::relu(const TensorT& a) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return emit("relu", a.shape(), std::move(out), {a},
              [an = a.node_](std::span<const T> g, std::span<const std::span<T>> in) {
                const auto& x = an->value;
                for (std::size_t i = 0; i < in[0].size(); ++i) {
                  if (x[i] > T(0)) in[0][i] += g[i];
                }
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::exp(const TensorT& a) {
  auto av = a.values();
  auto out = std::make_shared<std::vector<T>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = std::exp(av[i]);
  auto values = *out;
  return emit("exp", a.shape(), std::move(values), {a},
              [out](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i] * (*out)[i];
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::log(const TensorT& a, T floor) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (floor <= T(0) && av[i] <= T(0)) {
      throw NumericDomainError("log: non-positive input " + std::to_string(av[i]) + " at index " +
                               std::to_string(i));
    }
    out[i] = std::log(std::max(av[i], floor));
  }
  return emit("log", a.shape(), std::move(out), {a},
              [an = a.node_, floor](std::span<const T> g, std::span<const std::span<T>> in) {
                const auto& x = an->value;
                for (std::size_t i = 0; i < in[0].size(); ++i) {
                  if (x[i] > floor) in[0][i] += g[i] / x[i];
                }
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::matmul(const TensorT& a, const TensorT& b) {
  require_rank("matmul", a, 2);
  if (b.ndim() != 1 && b.ndim() != 2) throw ShapeError(mismatch("matmul", a.shape(), b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = b.ndim() == 2 ? b.dim(1) : 1;
  if (b.dim(0) != k) throw ShapeError(mismatch("matmul", a.shape(), b.shape()));
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data());
  Shape shape = b.ndim() == 2 ? Shape{m, n} : Shape{m};
  return emit("matmul", std::move(shape), std::move(out), {a, b},
              [an = a.node_, bn = b.node_, m, n, k](std::span<const T> g,
                                                   std::span<const std::span<T>> in) {
                if (!in[0].empty()) kernels::gemm_nt(m, n, k, g.data(), bn->value.data(), in[0].data());
                if (!in[1].empty()) kernels::gemm_tn(m, n, k, an->value.data(), g.data(), in[1].data());
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::conv2d(const TensorT& x, const TensorT& weight, const TensorT& bias,
                                    Conv2dParams params) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", weight, 4);
  if (weight.dim(1) != x.dim(0)) throw ShapeError(mismatch("conv2d", x.shape(), weight.shape()));
  if (params.stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t out_ch = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{out_ch}) {
    throw ShapeError(mismatch("conv2d", weight.shape(), bias.shape()));
  }
  kernels::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3),
                            params.stride, params.padding, 0, 0};
  const std::size_t ph = geo.height + 2 * geo.padding, pw = geo.width + 2 * geo.padding;
  if (ph < geo.kh || pw < geo.kw) throw ShapeError(mismatch("conv2d", x.shape(), weight.shape()));
  geo.out_h = (ph - geo.kh) / geo.stride + 1;
  geo.out_w = (pw - geo.kw) / geo.stride + 1;

  auto col = std::make_shared<std::vector<T>>(geo.rows() * geo.cols());
  kernels::im2col(geo, x.values().data(), col->data());
  std::vector<T> out(out_ch * geo.cols(), T(0));
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t o = 0; o < out_ch; ++o) {
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(o * geo.cols()), geo.cols(), bv[o]);
    }
  }
  kernels::gemm_nn(out_ch, geo.cols(), geo.rows(), weight.values().data(), col->data(), out.data());

  auto backward = [geo, col, wn = weight.node_, out_ch](std::span<const T> g,
                                                       std::span<const std::span<T>> in) {
    const std::size_t rows = geo.rows(), cols = geo.cols();
    if (!in[1].empty()) kernels::gemm_nt(out_ch, cols, rows, g.data(), col->data(), in[1].data());
    if (in.size() > 2 && !in[2].empty()) {
      for (std::size_t o = 0; o < out_ch; ++o) {
        T acc = 0;
        for (std::size_t p = 0; p < cols; ++p) acc += g[o * cols + p];
        in[2][o] += acc;
      }
    }
    if (!in[0].empty()) {
      std::vector<T> gcol(rows * cols, T(0));
      kernels::gemm_tn(out_ch, cols, rows, wn->value.data(), g.data(), gcol.data());
      kernels::col2im(geo, gcol.data(), in[0].data());
    }
  };
  Shape shape{out_ch, geo.out_h, geo.out_w};
  if (bias.defined()) return emit("conv2d", std::move(shape), std::move(out), {x, weight, bias}, backward);
  return emit("conv2d", std::move(shape), std::move(out), {x, weight}, backward);
}

template <typename T>
BasicTensor<T> BasicTape<T>::max_pool2d(const TensorT& x, Pool2dParams params) {
  require_rank("max_pool2d", x, 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (params.window == 0 || params.stride == 0 || h < params.window || w < params.window) {
    throw ShapeError("max_pool2d: window " + std::to_string(params.window) + " does not fit " +
                     shape_str(x.shape()));
  }
  const std::size_t oh = (h - params.window) / params.stride + 1;
  const std::size_t ow = (w - params.window) / params.stride + 1;
  auto xv = x.values();
  std::vector<T> out(c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + oy * params.stride) * w + ox * params.stride;
        for (std::size_t ky = 0; ky < params.window; ++ky) {
          for (std::size_t kx = 0; kx < params.window; ++kx) {
            const std::size_t idx = (ch * h + oy * params.stride + ky) * w + ox * params.stride + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  return emit("max_pool2d", Shape{c, oh, ow}, std::move(out), {x},
              [argmax](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t o = 0; o < g.size(); ++o) in[0][(*argmax)[o]] += g[o];
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::global_average_pool(const TensorT& x) {
  require_rank("global_average_pool", x, 3);
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto xv = x.values();
  std::vector<T> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += xv[ch * hw + i];
    out[ch] = acc / static_cast<T>(hw);
  }
  return emit("global_average_pool", Shape{c}, std::move(out), {x},
              [hw](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t ch = 0; ch < g.size(); ++ch) {
                  const T v = g[ch] / static_cast<T>(hw);
                  for (std::size_t i = 0; i < hw; ++i) in[0][ch * hw + i] += v;
                }
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::reshape(const TensorT& x, Shape shape) {
  if (shape_size(shape) != x.size()) throw ShapeError(mismatch("reshape", x.shape(), shape));
  auto xv = x.values();
  return emit("reshape", std::move(shape), std::vector<T>(xv.begin(), xv.end()), {x},
              [](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i];
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::sum(const TensorT& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  return emit("sum", Shape{}, {acc}, {a}, [](std::span<const T> g, std::span<const std::span<T>> in) {
    for (auto& v : in[0]) v += g[0];
  });
}

template <typename T>
BasicTensor<T> BasicTape<T>::mean(const TensorT& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  const T n = static_cast<T>(a.size());
  return emit("mean", Shape{}, {acc / n}, {a},
              [n](std::span<const T> g, std::span<const std::span<T>> in) {
                const T v = g[0] / n;
                for (auto& x : in[0]) x += v;
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::select(const TensorT& a, std::size_t index) {
  if (index >= a.size()) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for " + shape_str(a.shape()));
  }
  return emit("select", Shape{}, {a.values()[index]}, {a},
              [index](std::span<const T> g, std::span<const std::span<T>> in) {
                if (!in[0].empty()) in[0][index] += g[0];
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::softmax(const TensorT& logits, T temperature) {
  require_rank("softmax", logits, 1);
  if (!(temperature > T(0))) {
    throw NumericDomainError("softmax: temperature must be positive, got " + std::to_string(temperature));
  }
  auto z = logits.values();
  const T zmax = *std::max_element(z.begin(), z.end());
  auto probs = std::make_shared<std::vector<T>>(z.size());
  T total = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    (*probs)[k] = std::exp((z[k] - zmax) / temperature);
    total += (*probs)[k];
  }
  for (auto& p : *probs) p /= total;
  auto values = *probs;
  return emit("softmax", logits.shape(), std::move(values), {logits},
              [probs, temperature](std::span<const T> g, std::span<const std::span<T>> in) {
                const auto& y = *probs;
                T dotgy = 0;
                for (std::size_t k = 0; k < y.size(); ++k) dotgy += g[k] * y[k];
                for (std::size_t k = 0; k < y.size(); ++k) in[0][k] += y[k] * (g[k] - dotgy) / temperature;
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::channel_weighted_sum(const TensorT& x, std::span<const T> weights) {
  require_rank("channel_weighted_sum", x, 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  if (weights.size() != c) {
    throw ShapeError(mismatch("channel_weighted_sum", x.shape(), Shape{weights.size()}));
  }
  auto xv = x.values();
  std::vector<T> out(hw, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T wc = weights[ch];
    for (std::size_t i = 0; i < hw; ++i) out[i] += wc * xv[ch * hw + i];
  }
  auto wcopy = std::make_shared<std::vector<T>>(weights.begin(), weights.end());
  return emit("channel_weighted_sum", Shape{h, w}, std::move(out), {x},
              [wcopy, hw](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t ch = 0; ch < wcopy->size(); ++ch) {
                  const T wc = (*wcopy)[ch];
                  for (std::size_t i = 0; i < hw; ++i) in[0][ch * hw + i] += wc * g[i];
                }
              });
}

template <typename T>
BasicTensor<T> BasicTape<T>::min_max_normalize(const TensorT& x) {
  auto xv = x.values();
  const std::size_t lo = static_cast<std::size_t>(std::min_element(xv.begin(), xv.end()) - xv.begin());
  const std::size_t hi = static_cast<std::size_t>(std::max_element(xv.begin(), xv.end()) - xv.begin());
  const T range = xv[hi] - xv[lo];
  auto out = std::make_shared<std::vector<T>>(xv.size(), T(0));
  if (range > T(0)) {
    for (std::size_t i = 0; i < xv.size(); ++i) (*out)[i] = (xv[i] - xv[lo]) / range;
  }
  auto values = *out;
  return emit("min_max_normalize", x.shape(), std::move(values), {x},
              [out, lo, hi, range](std::span<const T> g, std::span<const std::span<T>> in) {
                if (!(range > T(0))) return;
                const auto& y = *out;
                T to_lo = 0, to_hi = 0;
                for (std::size_t i = 0; i < y.size(); ++i) {
                  in[0][i] += g[i] / range;
                  to_lo += g[i] * (y[i] - T(1));
                  to_hi -= g[i] * y[i];
                }
                in[0][lo] += to_lo / range;
                in[0][hi] += to_hi / range;
              });
}

namespace {

struct Interp {
  std::size_t i0, i1;
  double frac;
};

// Align-corners source coordinate for each output index.
std::vector<Interp> interp_axis(std::size_t in, std::size_t out) {
  std::vector<Interp> axis(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double pos = (in == 1 || out == 1)
                           ? 0.0
                           : static_cast<double>(o * (in - 1)) / static_cast<double>(out - 1);
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= in) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    axis[o] = {i0, i1, pos - static_cast<double>(i0)};
  }
  return axis;
}

}  // namespace

template <typename T>
BasicTensor<T> BasicTape<T>::upsample_bilinear(const TensorT& x, std::size_t out_h, std::size_t out_w) {
  require_rank("upsample_bilinear", x, 2);
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (out_h < h || out_w < w) {
    throw ShapeError(mismatch("upsample_bilinear", x.shape(), Shape{out_h, out_w}));
  }
  auto ys = std::make_shared<std::vector<Interp>>(interp_axis(h, out_h));
  auto xs = std::make_shared<std::vector<Interp>>(interp_axis(w, out_w));
  auto v = x.values();
  std::vector<T> out(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& ry = (*ys)[oy];
    const T fy = static_cast<T>(ry.frac);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& rx = (*xs)[ox];
      const T fx = static_cast<T>(rx.frac);
      const T top = (T(1) - fx) * v[ry.i0 * w + rx.i0] + fx * v[ry.i0 * w + rx.i1];
      const T bottom = (T(1) - fx) * v[ry.i1 * w + rx.i0] + fx * v[ry.i1 * w + rx.i1];
      out[oy * out_w + ox] = (T(1) - fy) * top + fy * bottom;
    }
  }
  return emit("upsample_bilinear", Shape{out_h, out_w}, std::move(out), {x},
              [ys, xs, w, out_w](std::span<const T> g, std::span<const std::span<T>> in) {
                for (std::size_t oy = 0; oy < ys->size(); ++oy) {
                  const auto& ry = (*ys)[oy];
                  const T fy = static_cast<T>(ry.frac);
                  for (std::size_t ox = 0; ox < xs->size(); ++ox) {
                    const auto& rx = (*xs)[ox];
                    const T fx = static_cast<T>(rx.frac);
                    const T go = g[oy * out_w + ox];
                    in[0][ry.i0 * w + rx.i0] += go * (T(1) - fy) * (T(1) - fx);
                    in[0][ry.i0 * w + rx.i1] += go * (T(1) - fy) * fx;
                    in[0][ry.i1 * w + rx.i0] += go * fy * (T(1) - fx);
                    in[0][ry.i1 * w + rx.i1] += go * fy * fx;
                  }
                }
              });
}

template <typename T>
typename BasicTape<T>::GradMap BasicTape<T>::sweep(const NodePtr& root, std::size_t first) const {
  GradMap grads;
  grads[root.get()].assign(root->value.size(), T(1));
  std::vector<std::span<T>> sinks;
  for (std::size_t idx = entries_.size(); idx-- > first;) {
    const Entry& entry = entries_[idx];
    auto found = grads.find(entry.output.get());
    if (found == grads.end()) continue;
    std::span<const T> gout = found->second;
    sinks.clear();
    for (const auto& in : entry.inputs) {
      if (!in || !in->requires_grad) {
        sinks.emplace_back();
        continue;
      }
      auto& buf = grads[in.get()];
      if (buf.empty()) buf.assign(in->value.size(), T(0));
      sinks.emplace_back(buf);
    }
    entry.backward(gout, sinks);
  }
  return grads;
}

template <typename T>
void BasicTape<T>::backward(const TensorT& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("(undefined)")));
  }
  const auto& root = loss.node_;
  if (root->tape != this) {
    if (!root->requires_grad) throw ContractError("backward: loss is not recorded on this tape");
    if (root->grad.empty()) root->grad.assign(1, T(0));
    root->grad[0] += T(1);
    return;
  }
  auto grads = sweep(root, 0);
  for (auto& [node, buf] : grads) {
    auto* mut = const_cast<detail::TensorNode<T>*>(node);
    if (mut->tape == this) {
      mut->grad = std::move(buf);
      continue;
    }
    require_finite<T>(buf, "backward");
    if (mut->grad.empty()) {
      mut->grad = std::move(buf);
    } else {
      for (std::size_t i = 0; i < buf.size(); ++i) mut->grad[i] += buf[i];
    }
  }
  clear();
}

template <typename T>
BasicTensor<T> BasicTape<T>::gradient(const TensorT& output, const TensorT& wrt) const {
  if (!output.defined() || output.size() != 1) throw ContractError("gradient: output must be a scalar");
  if (!wrt.defined()) throw ContractError("gradient: undefined target");
  const auto& target = wrt.node_;
  if (output.node_->tape != this) {
    if (output.node_ == target) return TensorT::full(target->shape, T(1));
    throw ContractError("gradient: output is not recorded on this tape");
  }
  const std::size_t first = target->tape == this ? target->tape_index + 1 : 0;
  auto grads = sweep(output.node_, first);
  auto found = grads.find(target.get());
  if (found == grads.end()) return TensorT::zeros(target->shape);
  return TensorT(target->shape, std::move(found->second));
}

template <typename T>
void BasicTape<T>::clear() {
  for (auto& entry : entries_) entry.output->tape = nullptr;
  entries_.clear();
}

template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace kdstage
