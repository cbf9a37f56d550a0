#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "kdstage/error.hpp"
#include "kdstage/losses.hpp"
#include "kdstage/rng.hpp"
#include "kdstage/tape.hpp"

using namespace kdstage;

namespace {

// Independent summation oracle for the temperature-scaled KL term.
double kl_oracle(const std::vector<double>& teacher, const std::vector<double>& student, double t) {
  auto soft = [t](const std::vector<double>& z) {
    double m = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp((z[i] - m) / t);
    for (auto& v : p) v /= s;
    return p;
  };
  auto p = soft(teacher), q = soft(student);
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    kl += p[i] * (std::log(std::max(p[i], 1e-12)) - std::log(std::max(q[i], 1e-12)));
  }
  return t * t * kl;
}

std::vector<double> random_logits(Rng& rng, std::size_t k, double scale = 2.0) {
  std::vector<double> z(k);
  for (auto& v : z) v = rng.normal(0, scale);
  return z;
}

double entropy(const Tensor64& p) {
  double h = 0;
  for (double v : p.values()) h -= v > 0 ? v * std::log(v) : 0;
  return h;
}

}  // namespace

TEST(Softmax, KnownValues) {
  Tape64 tape;
  auto p = softmax_t(tape, Tensor64({2}, {1, 0}), 1.0);
  EXPECT_NEAR(p[0], 0.73106, 1e-5);
  EXPECT_NEAR(p[1], 0.26894, 1e-5);
  // Large T flattens towards uniform: exactly 1 / (1 + e^-0.005).
  auto hot = softmax_t(tape, Tensor64({2}, {5, 0}), 1000.0);
  EXPECT_NEAR(hot[0], 1.0 / (1.0 + std::exp(-0.005)), 1e-15);
  EXPECT_NEAR(hot[0], 0.5, 1.3e-3);
  auto flat = softmax_t(tape, Tensor64({4}, {2, 2, 2, 2}), 3.0);
  for (double v : flat.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, NonPositiveTemperatureIsDomainError) {
  Tape64 tape;
  EXPECT_THROW(softmax_t(tape, Tensor64({2}, {1, 0}), 0.0), NumericDomainError);
  EXPECT_THROW(softmax_t(tape, Tensor64({2}, {1, 0}), -1.0), NumericDomainError);
}

TEST(Softmax, InvariantUnderLogitTranslation) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_logits(rng, 5);
    auto shifted = z;
    double c = rng.uniform(-50, 50);
    for (auto& v : shifted) v += c;
    Tape64 tape;
    auto a = softmax_t(tape, Tensor64({5}, z), 3.0);
    auto b = softmax_t(tape, Tensor64({5}, shifted), 3.0);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Softmax, EntropyNonDecreasingInTemperature) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_logits(rng, 5);
    double prev = -1;
    for (double t : {0.5, 1.0, 3.0, 10.0, 100.0}) {
      Tape64 tape;
      double h = entropy(softmax_t(tape, Tensor64({5}, z), t));
      EXPECT_GE(h, prev - 1e-12) << "T=" << t;
      prev = h;
    }
  }
}

TEST(KlDistill, KnownTwoClassValue) {
  Tape64 tape;
  auto teacher = Tensor64({2}, {std::log(0.7), std::log(0.3)});
  auto student = Tensor64({2}, {0, 0});
  EXPECT_NEAR(kl_distill(tape, teacher, student, 1.0).item(), 0.08228, 1e-5);
  // 0.7 ln 1.4 + 0.3 ln 0.6, by hand.
  EXPECT_NEAR(kl_distill(tape, teacher, student, 1.0).item(), 0.7 * std::log(1.4) + 0.3 * std::log(0.6), 1e-12);
}

TEST(KlDistill, MatchesSummationOracle) {
  Rng rng(9);
  for (double t : {1.0, 3.0, 10.0}) {
    for (int trial = 0; trial < 100; ++trial) {
      auto zt = random_logits(rng, 5), zs = random_logits(rng, 5);
      Tape64 tape;
      double got = kl_distill(tape, Tensor64({5}, zt), Tensor64({5}, zs), t).item();
      EXPECT_NEAR(got, kl_oracle(zt, zs, t), 1e-6);
      EXPECT_GE(got, 0.0);
    }
  }
}

TEST(KlDistill, TemperatureThreeCarriesNineFoldPrefactor) {
  std::vector<double> zt{std::log(0.7), std::log(0.3)}, zs{0, 0};
  Tape64 tape;
  double got = kl_distill(tape, Tensor64({2}, zt), Tensor64({2}, zs), 3.0).item();
  EXPECT_NEAR(got, kl_oracle(zt, zs, 3.0), 1e-12);
  // Softening by 3 then scaling by 9 is the same quantity.
  std::vector<double> st{zt[0] / 3, zt[1] / 3}, ss{0, 0};
  EXPECT_NEAR(got, 9.0 * kl_oracle(st, ss, 1.0), 1e-12);
}

TEST(KlDistill, ZeroForIdenticalLogits) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_logits(rng, 5);
    Tape64 tape;
    EXPECT_NEAR(kl_distill(tape, Tensor64({5}, z), Tensor64({5}, z), 3.0).item(), 0.0, 1e-12);
  }
}

TEST(KlDistill, TeacherReceivesNoGradient) {
  Tape64 tape;
  auto teacher = Tensor64({3}, {1, -1, 0.5}, true);
  auto student = Tensor64({3}, {0.2, 0.1, -0.3}, true);
  tape.backward(kl_distill(tape, teacher, student, 3.0));
  EXPECT_FALSE(teacher.has_grad());
  ASSERT_TRUE(student.has_grad());
  double norm = 0;
  for (double g : student.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(KlDistill, SquaredTemperatureKeepsGradientScale) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto zt = random_logits(rng, 5, 1.0), zs = random_logits(rng, 5, 1.0);
    double lo = 1e300, hi = 0;
    for (double t : {1.0, 3.0, 10.0}) {
      Tape64 tape;
      auto s = Tensor64({5}, zs, true);
      tape.backward(kl_distill(tape, Tensor64({5}, zt), s, t));
      double m = 0;
      for (double g : s.grad()) m = std::max(m, std::abs(g));
      lo = std::min(lo, m);
      hi = std::max(hi, m);
    }
    EXPECT_LT(hi / lo, 3.0);
  }
}

TEST(KlDistill, ShapeMismatch) {
  Tape64 tape;
  EXPECT_THROW(kl_distill(tape, Tensor64({2}, {0, 0}), Tensor64({3}, {0, 0, 0}), 3.0), ShapeError);
}

TEST(CrossEntropy, KnownValues) {
  Tape64 tape;
  EXPECT_NEAR(cross_entropy(tape, Tensor64::zeros({5}), 2).item(), std::log(5.0), 1e-12);
  EXPECT_NEAR(cross_entropy(tape, Tensor64::zeros({5}), 2).item(), 1.60944, 1e-5);
  EXPECT_NEAR(cross_entropy(tape, Tensor64({2}, {0, 10}), 0).item(), 10.0000454, 1e-7);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Tape64 tape;
  auto z = Tensor64({3}, {0.5, -1.0, 2.0}, true);
  tape.backward(cross_entropy(tape, z, 1));
  double s = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
  EXPECT_NEAR(z.grad()[0], std::exp(0.5) / s, 1e-12);
  EXPECT_NEAR(z.grad()[1], std::exp(-1.0) / s - 1, 1e-12);
  EXPECT_NEAR(z.grad()[2], std::exp(2.0) / s, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape64 tape;
  EXPECT_THROW(cross_entropy(tape, Tensor64::zeros({5}), 5), ContractError);
}

TEST(AttentionMse, KnownValues) {
  Tape64 tape;
  auto a = Tensor64({2, 2}, {0.2, 0.2, 0.2, 0.2});
  EXPECT_NEAR(attention_mse(tape, a, Tensor64::zeros({2, 2})).item(), 0.04, 1e-12);
  EXPECT_NEAR(attention_mse(tape, Tensor64::full({3, 3}, 1.0), Tensor64::zeros({3, 3})).item(), 1.0, 1e-15);
  EXPECT_NEAR(attention_mse(tape, a, a).item(), 0.0, 1e-15);
}

TEST(AttentionMse, GradientIsScaledResidual) {
  Rng rng(6);
  std::vector<double> a(12), m(12);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : m) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Tape64 tape;
  auto h = Tensor64({3, 4}, a, true);
  tape.backward(attention_mse(tape, h, Tensor64({3, 4}, m)));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(h.grad()[i], 2.0 / 12 * (a[i] - m[i]), 1e-15);
}

TEST(AttentionMse, RejectsBadInputs) {
  Tape64 tape;
  EXPECT_THROW(attention_mse(tape, Tensor64::zeros({2, 2}), Tensor64::zeros({2, 3})), ShapeError);
  EXPECT_THROW(attention_mse(tape, Tensor64::full({2, 2}, 1.5), Tensor64::zeros({2, 2})), NumericDomainError);
  EXPECT_THROW(attention_mse(tape, Tensor64::zeros({2, 2}), Tensor64::full({2, 2}, -0.1)), NumericDomainError);
}

TEST(TotalLoss, WeightedSumWithDefaults) {
  Tape64 tape;
  auto total = total_loss(tape, Tensor64::scalar(1), Tensor64::scalar(2), Tensor64::scalar(3), LossWeights{});
  EXPECT_NEAR(total.item(), 2.21, 1e-12);
}

TEST(TotalLoss, DegenerateWeightsReduceToCrossEntropy) {
  Tape64 tape;
  auto z = Tensor64({3}, {0.1, 0.7, -0.4});
  auto cls = cross_entropy(tape, z, 2);
  LossWeights w{.alpha = 0, .beta = 0, .theta = 1, .temperature = 3};
  auto total = total_loss(tape, Tensor64::scalar(0.3), Tensor64::scalar(0.9), cls, w);
  EXPECT_EQ(total.item(), cls.item());
}

TEST(TotalLoss, WeightsValidate) {
  EXPECT_THROW((LossWeights{.alpha = -1}).validate(), ConfigError);
  EXPECT_THROW((LossWeights{.temperature = 0}).validate(), ConfigError);
  EXPECT_NO_THROW(LossWeights{}.validate());
}
