#include "kdstage/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>

#include "kdstage/error.hpp"
#include "kdstage/gradcam.hpp"
#include "kdstage/gradcheck.hpp"
#include "kdstage/losses.hpp"
#include "kdstage/model.hpp"
#include "kdstage/rng.hpp"

namespace kdstage {

namespace {

// Scalar objective of the inputs, evaluated on the given tape.
using Objective = std::function<Tensor64(Tape64&, const std::vector<Tensor64>&)>;

struct Case {
  std::vector<Tensor64> inputs;
  std::vector<std::size_t> wrt;  // indices of the inputs to differentiate
  Objective objective;
  // Optional closed form for the gradient w.r.t. input 0: returns the largest
  // elementwise deviation of the tape gradient from it.
  std::function<double(std::span<const double>)> closed_form = nullptr;
};

using CaseMaker = std::function<Case(Rng&)>;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

Tensor64 uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64(std::move(shape), std::move(v));
}

Tensor64 normal(Rng& rng, Shape shape, double stddev = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor64(std::move(shape), std::move(v));
}

// Values bounded away from zero, for kinks at the origin.
Tensor64 off_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(0.05, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return Tensor64(std::move(shape), std::move(v));
}

// Distinct values at least 0.01 apart in random order, so maxima and minima
// do not change under a finite-difference step.
Tensor64 distinct(Rng& rng, Shape shape) {
  std::vector<double> v(shape_size(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.05 * static_cast<double>(i) + rng.uniform(0.0, 0.03);
  std::shuffle(v.begin(), v.end(), rng.engine());
  return Tensor64(std::move(shape), std::move(v));
}

Shape random_shape(Rng& rng, std::size_t max_rank = 3, std::size_t max_dim = 4) {
  Shape s(pick(rng, 1, max_rank));
  for (auto& d : s) d = pick(rng, 1, max_dim);
  return s;
}

Tensor64 random_mask(Rng& rng, std::size_t h, std::size_t w) {
  const std::size_t rh = pick(rng, 1, h), rw = pick(rng, 1, w);
  const std::size_t r0 = pick(rng, 0, h - rh), c0 = pick(rng, 0, w - rw);
  std::vector<double> v(h * w, 0.0);
  for (std::size_t r = r0; r < r0 + rh; ++r) {
    for (std::size_t c = c0; c < c0 + rw; ++c) v[r * w + c] = 1.0;
  }
  return Tensor64({h, w}, std::move(v));
}

// sum(out * proj) for a fixed random projection, turning any tensor-valued
// op into a scalar objective with a generic upstream gradient.
Tensor64 project(Tape64& tape, const Tensor64& out, const Tensor64& proj) { return tape.sum(tape.mul(out, proj)); }

Case unary_case(Tensor64 x, std::function<Tensor64(Tape64&, const Tensor64&)> op, Rng& rng) {
  Tape64 scratch;
  const auto probe = op(scratch, x.detach());
  auto proj = normal(rng, probe.shape());
  return {{std::move(x)}, {0}, [op, proj](Tape64& t, const std::vector<Tensor64>& in) {
            return project(t, op(t, in[0]), proj);
          }};
}

Case binary_case(Tensor64 a, Tensor64 b, std::function<Tensor64(Tape64&, const Tensor64&, const Tensor64&)> op,
                 Rng& rng) {
  Tape64 scratch;
  const auto probe = op(scratch, a.detach(), b.detach());
  auto proj = normal(rng, probe.shape());
  return {{std::move(a), std::move(b)}, {0, 1}, [op, proj](Tape64& t, const std::vector<Tensor64>& in) {
            return project(t, op(t, in[0], in[1]), proj);
          }};
}

Case make_conv(Rng& rng) {
  const std::size_t c = pick(rng, 1, 3), o = pick(rng, 1, 3), k = pick(rng, 1, 3);
  const std::size_t stride = pick(rng, 1, 2), padding = pick(rng, 0, 1);
  const std::size_t h = pick(rng, k, k + 4), w = pick(rng, k, k + 4);
  const bool with_bias = rng.uniform() < 0.7;
  const Conv2dParams params{stride, padding};
  auto x = normal(rng, {c, h, w});
  auto weight = normal(rng, {o, c, k, k}, 0.5);
  Tape64 scratch;
  const auto probe = scratch.conv2d(x, weight, Tensor64{}, params);
  auto proj = normal(rng, probe.shape());
  if (!with_bias) {
    return {{x, weight}, {0, 1}, [params, proj](Tape64& t, const std::vector<Tensor64>& in) {
              return project(t, t.conv2d(in[0], in[1], Tensor64{}, params), proj);
            }};
  }
  return {{x, weight, normal(rng, {o})}, {0, 1, 2}, [params, proj](Tape64& t, const std::vector<Tensor64>& in) {
            return project(t, t.conv2d(in[0], in[1], in[2], params), proj);
          }};
}

Case make_pool(Rng& rng) {
  const std::size_t c = pick(rng, 1, 2), h = pick(rng, 2, 6), w = pick(rng, 2, 6);
  const Pool2dParams params{2, pick(rng, 1, 2)};
  return unary_case(distinct(rng, {c, h, w}), [params](Tape64& t, const Tensor64& x) {
    return t.max_pool2d(x, params);
  }, rng);
}

Case make_softmax(Rng& rng) {
  const double temps[] = {0.5, 1.0, 3.0, 10.0};
  const double temperature = temps[pick(rng, 0, 3)];
  return unary_case(normal(rng, {pick(rng, 2, 6)}, 2.0), [temperature](Tape64& t, const Tensor64& x) {
    return t.softmax(x, temperature);
  }, rng);
}

Case make_channel_sum(Rng& rng) {
  const std::size_t c = pick(rng, 1, 4);
  auto w = normal(rng, {c});
  std::vector<double> weights(w.values().begin(), w.values().end());
  return unary_case(normal(rng, {c, pick(rng, 1, 4), pick(rng, 1, 4)}), [weights](Tape64& t, const Tensor64& x) {
    return t.channel_weighted_sum(x, weights);
  }, rng);
}

Case make_upsample(Rng& rng) {
  const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  const std::size_t oh = pick(rng, h, 9), ow = pick(rng, w, 9);
  return unary_case(normal(rng, {h, w}), [oh, ow](Tape64& t, const Tensor64& x) {
    return t.upsample_bilinear(x, oh, ow);
  }, rng);
}

Case make_cross_entropy(Rng& rng) {
  const std::size_t k = pick(rng, 2, 6), label = pick(rng, 0, k - 1);
  return {{normal(rng, {k}, 2.0)}, {0}, [label](Tape64& t, const std::vector<Tensor64>& in) {
            return cross_entropy(t, in[0], label);
          }};
}

Case make_kl(Rng& rng) {
  const double temps[] = {1.0, 3.0, 10.0};
  const double temperature = temps[pick(rng, 0, 2)];
  const std::size_t k = pick(rng, 2, 6);
  auto teacher = normal(rng, {k}, 3.0);
  return {{normal(rng, {k}, 2.0)}, {0}, [teacher, temperature](Tape64& t, const std::vector<Tensor64>& in) {
            return kl_distill(t, teacher, in[0], temperature);
          }};
}

Case make_attention_mse(Rng& rng) {
  const std::size_t h = pick(rng, 1, 6), w = pick(rng, 1, 6);
  auto mask = random_mask(rng, h, w);
  auto heatmap = uniform(rng, {h, w}, 0.02, 0.98);
  Case c{{heatmap}, {0}, [mask](Tape64& t, const std::vector<Tensor64>& in) { return attention_mse(t, in[0], mask); }};
  c.closed_form = [heatmap, mask](std::span<const double> grad) {
    auto a = heatmap.values();
    auto m = mask.values();
    const double n = static_cast<double>(a.size());
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(grad[i] - 2.0 / n * (a[i] - m[i])));
    return worst;
  };
  return c;
}

LossWeights random_weights(Rng& rng) {
  const double temps[] = {1.0, 3.0, 10.0};
  return {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), temps[pick(rng, 0, 2)]};
}

Case make_total(Rng& rng) {
  const auto weights = random_weights(rng);
  const std::size_t k = pick(rng, 2, 6), label = pick(rng, 0, k - 1);
  const std::size_t h = pick(rng, 1, 5), w = pick(rng, 1, 5);
  auto teacher = normal(rng, {k}, 3.0);
  auto mask = random_mask(rng, h, w);
  return {{normal(rng, {k}, 2.0), uniform(rng, {h, w}, 0.02, 0.98)},
          {0, 1},
          [=](Tape64& t, const std::vector<Tensor64>& in) {
            const auto attn = attention_mse(t, in[1], mask);
            const auto dist = kl_distill(t, teacher, in[0], weights.temperature);
            const auto cls = cross_entropy(t, in[0], label);
            return total_loss(t, attn, dist, cls, weights);
          }};
}

// attention_mse(upsample(normalize(sum_c w_c A_c)), M) as a function of A,
// with w a fixed constant.
Case make_gradcam_chain(Rng& rng) {
  const std::size_t c = pick(rng, 1, 4), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
  const std::size_t th = pick(rng, h, 8), tw = pick(rng, w, 8);
  auto weights = normal(rng, {c});
  auto mask = random_mask(rng, th, tw);
  // Raw map with a unique, well separated minimum and maximum.
  auto activations = uniform(rng, {c, h, w}, 0.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Tape64 scratch;
    auto raw = scratch.channel_weighted_sum(activations, weights.values());
    auto v = std::vector<double>(raw.values().begin(), raw.values().end());
    std::sort(v.begin(), v.end());
    if (v.size() >= 2 && v[1] - v[0] > 1e-3 && v[v.size() - 1] - v[v.size() - 2] > 1e-3) break;
    activations = uniform(rng, {c, h, w}, 0.0, 1.0);
  }
  return {{activations}, {0}, [weights, mask, th, tw](Tape64& t, const std::vector<Tensor64>& in) {
            const auto map = upsample_bilinear(t, gradcam_heatmap(t, in[0], weights), th, tw);
            return attention_mse(t, map.values, mask);
          }};
}

// Full distilled objective through a small double-precision model: inputs
// are the image and every parameter. The Grad-CAM weights are computed once
// at the base point and then held fixed.
Case make_model(Rng& rng) {
  ConvNetConfig config;
  config.channels = 1;
  config.height = pick(rng, 4, 6) * 2;
  config.width = config.height;
  config.blocks = {{pick(rng, 2, 3), 3, true}, {pick(rng, 2, 3), 3, false}};
  config.num_classes = 3;
  config.attention_layer = 1;
  config.init_seed = rng.engine()();
  auto model = std::make_shared<ConvClassifier<double>>(config);
  auto image = uniform(rng, config.input_shape(), 0.0, 1.0);
  const std::size_t label = pick(rng, 0, config.num_classes - 1);
  const auto weights = random_weights(rng);
  auto teacher = normal(rng, {config.num_classes}, 3.0);
  auto mask = random_mask(rng, config.height, config.width);

  Tensor64 cam_weights;
  {
    auto tracked = image.detach();
    tracked.set_requires_grad(true);
    Tape64 tape;
    const auto forward = model->forward(tape, tracked);
    cam_weights = attention_from_forward(tape, forward, label, config.height, config.width).weights.detach();
  }

  Case c;
  c.inputs.push_back(image);
  for (const auto& p : model->parameters()) c.inputs.push_back(p.tensor.detach());
  c.wrt.resize(c.inputs.size());
  std::iota(c.wrt.begin(), c.wrt.end(), std::size_t{0});
  c.objective = [=](Tape64& t, const std::vector<Tensor64>& in) {
    auto& params = model->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor = in[i + 1];
    const auto forward = model->forward(t, in[0]);
    const auto map = upsample_bilinear(t, gradcam_heatmap(t, forward.activations, cam_weights), config.height,
                                       config.width);
    const auto attn = attention_mse(t, map.values, mask);
    const auto dist = kl_distill(t, teacher, forward.logits, weights.temperature);
    const auto cls = cross_entropy(t, forward.logits, label);
    return total_loss(t, attn, dist, cls, weights);
  };
  return c;
}

const std::vector<std::pair<std::string, CaseMaker>>& registry() {
  using T = Tape64;
  using X = const Tensor64&;
  static const std::vector<std::pair<std::string, CaseMaker>> cases = {
      {"add", [](Rng& r) {
         const auto s = random_shape(r);
         return binary_case(normal(r, s), normal(r, s), [](T& t, X a, X b) { return t.add(a, b); }, r);
       }},
      {"sub", [](Rng& r) {
         const auto s = random_shape(r);
         return binary_case(normal(r, s), normal(r, s), [](T& t, X a, X b) { return t.sub(a, b); }, r);
       }},
      {"mul", [](Rng& r) {
         const auto s = random_shape(r);
         return binary_case(normal(r, s), normal(r, s), [](T& t, X a, X b) { return t.mul(a, b); }, r);
       }},
      {"scale", [](Rng& r) {
         const double f = r.normal(0.0, 2.0);
         return unary_case(normal(r, random_shape(r)), [f](T& t, X a) { return t.scale(a, f); }, r);
       }},
      {"relu", [](Rng& r) { return unary_case(off_zero(r, random_shape(r)), [](T& t, X a) { return t.relu(a); }, r); }},
      {"exp", [](Rng& r) {
         return unary_case(uniform(r, random_shape(r), -2.0, 2.0), [](T& t, X a) { return t.exp(a); }, r);
       }},
      {"log", [](Rng& r) {
         return unary_case(uniform(r, random_shape(r), 0.1, 3.0), [](T& t, X a) { return t.log(a, kLogFloor); }, r);
       }},
      {"matmul", [](Rng& r) {
         const std::size_t m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
         const bool vec = r.uniform() < 0.3;
         auto b = vec ? normal(r, {k}) : normal(r, {k, n});
         return binary_case(normal(r, {m, k}), b, [](T& t, X a, X bb) { return t.matmul(a, bb); }, r);
       }},
      {"conv2d", make_conv},
      {"max_pool2d", make_pool},
      {"global_average_pool", [](Rng& r) {
         return unary_case(normal(r, {pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)}),
                           [](T& t, X a) { return t.global_average_pool(a); }, r);
       }},
      {"reshape", [](Rng& r) {
         const std::size_t a = pick(r, 1, 4), b = pick(r, 1, 4), c = pick(r, 1, 3);
         return unary_case(normal(r, {a, b, c}), [a, b, c](T& t, X x) { return t.reshape(x, {c, a * b}); }, r);
       }},
      {"sum", [](Rng& r) { return unary_case(normal(r, random_shape(r)), [](T& t, X a) { return t.sum(a); }, r); }},
      {"mean", [](Rng& r) { return unary_case(normal(r, random_shape(r)), [](T& t, X a) { return t.mean(a); }, r); }},
      {"select", [](Rng& r) {
         const std::size_t n = pick(r, 1, 8), i = pick(r, 0, n - 1);
         return unary_case(normal(r, {n}), [i](T& t, X a) { return t.select(a, i); }, r);
       }},
      {"softmax", make_softmax},
      {"channel_weighted_sum", make_channel_sum},
      {"min_max_normalize", [](Rng& r) {
         return unary_case(distinct(r, {pick(r, 1, 4), pick(r, 2, 4)}),
                           [](T& t, X a) { return t.min_max_normalize(a); }, r);
       }},
      {"upsample_bilinear", make_upsample},
      {"cross_entropy", make_cross_entropy},
      {"kl_distill", make_kl},
      {"attention_mse", make_attention_mse},
      {"total_loss", make_total},
      {"gradcam_chain", make_gradcam_chain},
      {"model_end_to_end", make_model},
  };
  return cases;
}

// Tape gradient of the objective w.r.t. input `index`.
std::vector<double> tape_gradient(const Case& c, std::size_t index) {
  std::vector<Tensor64> inputs;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    auto copy = c.inputs[i].detach();
    if (std::find(c.wrt.begin(), c.wrt.end(), i) != c.wrt.end()) copy.set_requires_grad(true);
    inputs.push_back(copy);
  }
  Tape64 tape;
  const auto loss = c.objective(tape, inputs);
  tape.backward(loss);
  const auto& x = inputs[index];
  if (!x.has_grad()) return std::vector<double>(x.size(), 0.0);
  return {x.grad().begin(), x.grad().end()};
}

std::vector<double> numeric_gradient(const Case& c, std::size_t index, double step) {
  const std::function<double(const Tensor64&)> f = [&](const Tensor64& x) {
    std::vector<Tensor64> inputs;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) inputs.push_back(i == index ? x : c.inputs[i].detach());
    Tape64 tape;
    return c.objective(tape, inputs).item();
  };
  const auto g = finite_difference_grad(f, c.inputs[index], step);
  return {g.values().begin(), g.values().end()};
}

}  // namespace

bool GradcheckReport::passed() const {
  return !results.empty() && std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& r : results) m = std::max(m, r.max_rel_error);
  return m;
}

std::vector<std::string> GradcheckReport::failing_ops() const {
  std::vector<std::string> out;
  for (const auto& r : results) {
    if (!r.passed) out.push_back(r.op);
  }
  return out;
}

const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, _] : registry()) n.push_back(name);
    return n;
  }();
  return names;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  if (options.configs == 0) throw ConfigError("gradcheck: configs must be positive");
  if (!(options.step > 0) || !(options.tolerance > 0)) throw ConfigError("gradcheck: step and tolerance must be positive");
  const auto& names = gradcheck_op_names();
  for (const auto& op : options.ops) {
    if (std::find(names.begin(), names.end(), op) == names.end()) throw ConfigError("gradcheck: unknown op '" + op + "'");
  }
  if (!options.inject_bug.empty() && std::find(names.begin(), names.end(), options.inject_bug) == names.end()) {
    throw ConfigError("gradcheck: unknown op '" + options.inject_bug + "'");
  }

  GradcheckReport report;
  for (const auto& [name, make] : registry()) {
    if (!options.ops.empty() && std::find(options.ops.begin(), options.ops.end(), name) == options.ops.end()) continue;
    GradcheckResult result;
    result.op = name;
    result.configs = options.configs;
    for (std::size_t k = 0; k < options.configs; ++k) {
      Rng rng(derive_seed(options.seed, name, k));
      const auto c = make(rng);
      double worst = 0;
      for (const std::size_t index : c.wrt) {
        auto analytic = tape_gradient(c, index);
        if (name == options.inject_bug) {
          for (auto& g : analytic) g = g * 1.01 + 1e-3;
        }
        const auto numeric = numeric_gradient(c, index, options.step);
        worst = std::max(worst, relative_error<double>(analytic, numeric));
        if (c.closed_form && index == 0) {
          result.closed_form_error = std::max(result.closed_form_error, c.closed_form(analytic));
        }
      }
      if (worst > result.max_rel_error) {
        result.max_rel_error = worst;
        result.worst_config = k;
      }
    }
    result.passed = result.max_rel_error < options.tolerance && result.closed_form_error < 1e-6;
    report.results.push_back(result);
  }
  return report;
}

double attention_mse_identity_error(std::size_t pairs, std::uint64_t seed) {
  double worst = 0;
  for (std::size_t k = 0; k < pairs; ++k) {
    Rng rng(derive_seed(seed, "attention-identity", k));
    const std::size_t h = pick(rng, 1, 16), w = pick(rng, 1, 16);
    auto mask = random_mask(rng, h, w);
    auto heatmap = uniform(rng, {h, w}, 0.0, 1.0);
    heatmap.set_requires_grad(true);
    Tape64 tape;
    tape.backward(attention_mse(tape, heatmap, mask));
    const double n = static_cast<double>(h * w);
    auto a = heatmap.values();
    auto m = mask.values();
    auto g = heatmap.grad();
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(g[i] - 2.0 / n * (a[i] - m[i])));
  }
  return worst;
}

}  // namespace kdstage
