#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cigocc/objective.hpp"
#include "cigocc/semkitti.hpp"

using namespace cigocc;
using namespace cigocc::objective;

namespace {

Tensor<double> random_logits(std::size_t c, std::size_t n, std::uint64_t seed, double scale = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  std::vector<double> v(c * n);
  for (auto& x : v) x = d(rng);
  return Tensor<double>({c, n}, std::move(v));
}

std::vector<std::uint16_t> random_labels(std::size_t n, std::size_t c, std::uint64_t seed, bool with_ignore) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint16_t> y(n);
  for (auto& v : y) v = static_cast<std::uint16_t>(rng() % c);
  if (with_ignore) y[rng() % n] = kIgnoreLabel;
  return y;
}

// Probability of class j at voxel k by the textbook softmax definition.
double softmax_at(const Tensor<double>& x, std::size_t j, std::size_t k) {
  const std::size_t c = x.dim(0), n = x.dim(1);
  double z = 0;
  for (std::size_t i = 0; i < c; ++i) z += std::exp(x.data()[i * n + k]);
  return std::exp(x.data()[j * n + k]) / z;
}

double ssc_oracle(const Tensor<double>& x, const std::vector<std::uint16_t>& y, const std::vector<double>& w) {
  const std::size_t c = x.dim(0);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (y[k] == kIgnoreLabel) continue;
    ++count;
    for (std::size_t j = 0; j < c; ++j) {
      const double onehot = j == y[k] ? 1.0 : 0.0;
      total -= w[j] * onehot * std::log(softmax_at(x, j, k));
    }
  }
  return total / static_cast<double>(count);
}

double scal_oracle(const Tensor<double>& x, const std::vector<std::uint16_t>& y, ScalMode mode) {
  const std::size_t c = x.dim(0);
  auto clampl = [](double a) { return std::log(std::clamp(a, kScalEpsilon, 1.0)); };
  std::vector<std::vector<std::pair<double, bool>>> groups;  // (p, member) per counted voxel
  const std::size_t ng = mode == ScalMode::geo ? 2 : c - 1;
  groups.resize(ng);
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (y[k] == kIgnoreLabel) continue;
    for (std::size_t g = 0; g < ng; ++g) {
      if (mode == ScalMode::geo) {
        const double pe = softmax_at(x, 0, k);
        groups[g].emplace_back(g == 0 ? pe : 1 - pe, g == 0 ? y[k] == 0 : y[k] != 0);
      } else {
        groups[g].emplace_back(softmax_at(x, g + 1, k), y[k] == g + 1);
      }
    }
  }
  double loss = 0;
  int present = 0;
  for (const auto& grp : groups) {
    double tp = 0, ps = 0, pos = 0, tn = 0, neg = 0;
    for (auto [p, m] : grp) {
      ps += p;
      tp += m ? p : 0;
      pos += m;
      tn += m ? 0 : 1 - p;
      neg += !m;
    }
    if (pos == 0) continue;
    ++present;
    loss -= clampl(tp / ps) + clampl(tp / pos) + (neg > 0 ? clampl(tn / neg) : 0.0);
  }
  return loss / present;
}

}  // namespace

TEST(ClassWeights, HandArithmetic) {
  const std::vector<double> uniform(5, 0.2);
  for (double w : class_weights(uniform)) EXPECT_DOUBLE_EQ(w, 1.0);
  const std::vector<double> two{0.75, 0.25};
  const auto w = class_weights(two);
  EXPECT_NEAR(w[0], 0.5, 1e-15);
  EXPECT_NEAR(w[1], 1.5, 1e-15);
  const std::vector<double> bad{0.5, 0.0};
  EXPECT_THROW(class_weights(bad), ConfigError);
}

TEST(ClassWeights, PublishedFrequencyRatio) {
  const auto table = semkitti::ClassTable::semantic_kitti();
  const auto w = class_weights(table.frequencies);
  const auto road = *table.index_of("road"), person = *table.index_of("person");
  EXPECT_NEAR(w[person] / w[road], 15.30 / 0.07, 1e-9);
  EXPECT_NEAR(w[person] / w[road], 218.6, 0.05);
}

TEST(LossSsc, UniformLogitsGiveLogC) {
  nd::TapeScope<double> scope;
  const std::vector<double> w(20, 1.0);
  const std::vector<std::uint16_t> y{0, 5, 19, 3};
  EXPECT_NEAR(loss_ssc(Tensor<double>::zeros({20, 4}), y, w).item(), std::log(20.0), 1e-12);
  EXPECT_NEAR(std::log(20.0), 2.9957, 1e-4);
}

TEST(LossSsc, ConfidentLogitsGiveZero) {
  nd::TapeScope<double> scope;
  const std::vector<double> w(3, 1.0);
  const std::vector<std::uint16_t> y{0, 2};
  Tensor<double> x({3, 2}, {50, 0, 0, 0, 0, 50});
  EXPECT_LT(loss_ssc(x, y, w).item(), 1e-20);
}

TEST(LossSsc, MatchesDirectFormula) {
  nd::TapeScope<double> scope;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto x = random_logits(3, 5, seed);
    const auto y = random_labels(5, 3, seed + 100, seed % 2 == 0);
    const std::vector<double> w{0.3, 1.2, 2.5};
    EXPECT_NEAR(loss_ssc(x, y, w).item(), ssc_oracle(x, y, w), 1e-6);
  }
}

TEST(LossSsc, InvariancesAndErrors) {
  nd::TapeScope<double> scope;
  const auto x = random_logits(4, 12, 7);
  const auto y = random_labels(12, 4, 8, true);
  const std::vector<double> w{0.5, 1, 2, 3}, w3{1.5, 3, 6, 9};
  EXPECT_NEAR(loss_ssc(x, y, w3).item(), 3.0 * loss_ssc(x, y, w).item(), 1e-12);
  // Reverse voxel order.
  std::vector<double> rev(x.size());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t k = 0; k < 12; ++k) rev[c * 12 + k] = x.data()[c * 12 + (11 - k)];
  const std::vector<std::uint16_t> yrev(y.rbegin(), y.rend());
  EXPECT_NEAR(loss_ssc(Tensor<double>({4, 12}, rev), yrev, w).item(), loss_ssc(x, y, w).item(), 1e-12);
  const std::vector<std::uint16_t> ignored(12, kIgnoreLabel);
  EXPECT_THROW(loss_ssc(x, ignored, w), DataError);
  EXPECT_THROW(loss_ssc(x, std::vector<std::uint16_t>(5, 0), w), ShapeError);
}

TEST(LossSsc, GradientMatchesFiniteDifferences) {
  const auto y = random_labels(6, 4, 3, true);
  const std::vector<double> w{0.4, 1.0, 1.7, 0.9};
  const double err = nd::grad_check<double>(
      [&](const Tensor<double>& t) { return loss_ssc(t, y, w); }, random_logits(4, 6, 2), 1e-3);
  EXPECT_LT(err, 1e-3);
}

TEST(LossBce, ClosedFormsAndOracle) {
  nd::TapeScope<double> scope;
  const auto zeros = Tensor<double>::zeros({2, 3});
  Tensor<double> targets({2, 3}, {0, 1, 1, 0, 1, 0});
  EXPECT_NEAR(loss_bce(zeros, targets).item(), std::log(2.0), 1e-12);
  EXPECT_LT(loss_bce(Tensor<double>({1}, {20.0}), Tensor<double>({1}, {1.0})).item(), 1e-8);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_logits(3, 4, seed, 6.0);
    std::vector<double> t(12);
    std::mt19937 rng(static_cast<unsigned>(seed));
    for (auto& v : t) v = rng() % 2;
    double direct = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x.data()[i]));
      direct -= t[i] * std::log(s) + (1 - t[i]) * std::log(1 - s);
    }
    EXPECT_NEAR(loss_bce(x, Tensor<double>({3, 4}, t)).item(), direct / 12, 1e-6);
  }
  EXPECT_THROW(loss_bce(zeros, Tensor<double>::zeros({3, 2})), ShapeError);
}

TEST(LossBce, GradientMatchesFiniteDifferences) {
  Tensor<double> t({2, 3}, {0, 1, 1, 0, 1, 0});
  const double err =
      nd::grad_check<double>([&](const Tensor<double>& x) { return loss_bce(x, t); }, random_logits(2, 3, 5), 1e-3);
  EXPECT_LT(err, 1e-3);
}

TEST(LossScal, PerfectPredictionIsNearZero) {
  nd::TapeScope<double> scope;
  const std::vector<std::uint16_t> y{0, 1, 2, 2, 0, 1};
  std::vector<double> x(18, -60.0);
  for (std::size_t k = 0; k < 6; ++k) x[y[k] * 6 + k] = 60.0;
  const Tensor<double> logits({3, 6}, x);
  EXPECT_LE(loss_scal(logits, y, ScalMode::sem).item(), 3 * std::abs(std::log(1 - kScalEpsilon)) + 1e-12);
  EXPECT_LE(loss_scal(logits, y, ScalMode::geo).item(), 3 * std::abs(std::log(1 - kScalEpsilon)) + 1e-12);
}

TEST(LossScal, GeoAllEmptyUsesOnlyEmptyClass) {
  nd::TapeScope<double> scope;
  const std::vector<std::uint16_t> y(8, 0);
  const auto x = random_logits(3, 8, 12);
  // Only the empty class is present: its precision and recall terms remain,
  // specificity has no negatives.
  double pe = 0;
  for (std::size_t k = 0; k < 8; ++k) pe += softmax_at(x, 0, k);
  const double expect = -(std::log(pe / pe) + std::log(pe / 8.0));
  EXPECT_NEAR(loss_scal(x, y, ScalMode::geo).item(), expect, 1e-12);
  EXPECT_THROW(loss_scal(x, y, ScalMode::sem), DataError);
}

TEST(LossScal, MatchesDirectFormula) {
  nd::TapeScope<double> scope;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto x2 = random_logits(2, 8, seed);
    const auto y2 = random_labels(8, 2, seed + 7, seed % 3 == 0);
    for (auto mode : {ScalMode::geo, ScalMode::sem}) {
      bool any = false;
      for (auto v : y2) any = any || (v == 1);
      if (mode == ScalMode::sem && !any) continue;
      EXPECT_NEAR(loss_scal(x2, y2, mode).item(), scal_oracle(x2, y2, mode), 1e-6);
    }
    const auto x4 = random_logits(4, 10, seed + 1);
    const auto y4 = random_labels(10, 4, seed + 9, true);
    EXPECT_NEAR(loss_scal(x4, y4, ScalMode::sem).item(), scal_oracle(x4, y4, ScalMode::sem), 1e-6);
    EXPECT_NEAR(loss_scal(x4, y4, ScalMode::geo).item(), scal_oracle(x4, y4, ScalMode::geo), 1e-6);
  }
}

TEST(LossScal, GradientMatchesFiniteDifferences) {
  const auto y = random_labels(9, 4, 21, true);
  for (auto mode : {ScalMode::geo, ScalMode::sem}) {
    const double err = nd::grad_check<double>(
        [&](const Tensor<double>& x) { return loss_scal(x, y, mode); }, random_logits(4, 9, 22), 1e-3);
    EXPECT_LT(err, 1e-3);
  }
}

TEST(TotalLoss, BasisVectorsAndLinearity) {
  nd::TapeScope<double> scope;
  const Tensor<double> bce({1}, {0.7}), geo({1}, {1.3}), sem({1}, {2.9}), ssc({1}, {0.45});
  EXPECT_EQ(total_loss(bce, geo, sem, ssc, {1, 0, 0, 0}).total.item(), 0.7);
  EXPECT_EQ(total_loss(bce, geo, sem, ssc, {0, 0, 0, 1}).total.item(), 0.45);
  EXPECT_NEAR(total_loss(bce, geo, sem, ssc, {1, 1, 1, 1}).total.item(), 0.7 + 1.3 + 2.9 + 0.45, 1e-7);
  const Lambdas a{0.2, 1.5, 0.0, 3.0}, b{1.0, 0.25, 2.0, 0.5};
  const Lambdas ab{a.bce + b.bce, a.scal_geo + b.scal_geo, a.scal_sem + b.scal_sem, a.ssc + b.ssc};
  EXPECT_NEAR(total_loss(bce, geo, sem, ssc, ab).total.item(),
              total_loss(bce, geo, sem, ssc, a).total.item() + total_loss(bce, geo, sem, ssc, b).total.item(), 1e-12);
  EXPECT_THROW(total_loss(bce, geo, sem, ssc, {-1, 0, 0, 0}), ConfigError);
}
