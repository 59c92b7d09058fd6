#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cigocc/ndgrad.hpp"

using namespace cigocc;
using namespace cigocc::nd;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Keeps normalized sample coordinates away from interpolation cell edges,
// where the sampling maps are only piecewise smooth.
Tensor<double> off_grid_points(std::size_t n, std::vector<std::size_t> extents, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t extent : extents) {
      std::uniform_int_distribution<std::size_t> cell(0, extent);
      std::uniform_real_distribution<double> frac(0.15, 0.85);
      const double pos = static_cast<double>(cell(rng)) - 1.0 + frac(rng);
      v.push_back((pos + 0.5) / static_cast<double>(extent));
    }
  }
  return Tensor<double>({n, extents.size()}, std::move(v));
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>({0, 3}, {}), ShapeError);
}

TEST(Elementwise, AddAndRelu) {
  const auto a = Tensor<double>({2}, {1, 2});
  const auto b = Tensor<double>({2}, {3, 4});
  const auto c = add(a, b);
  EXPECT_EQ(c[0], 4);
  EXPECT_EQ(c[1], 6);
  const auto r = relu(Tensor<double>({3}, {-1, 0, 2}));
  EXPECT_EQ(r[0], 0);
  EXPECT_EQ(r[1], 0);
  EXPECT_EQ(r[2], 2);
  const auto s = silu(Tensor<double>({3}, {-1, 0, 2}));
  EXPECT_NEAR(s[0], -1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_EQ(s[1], 0);
  EXPECT_NEAR(s[2], 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Elementwise, ProductRule) {
  TapeScope<double> scope;
  auto x = Tensor<double>({1}, {2}).set_requires_grad(true);
  auto y = Tensor<double>({1}, {3}).set_requires_grad(true);
  backward(sum(mul(x, y)));
  EXPECT_EQ(x.grad()[0], 3);
  EXPECT_EQ(y.grad()[0], 2);
}

TEST(Elementwise, ErrorContracts) {
  EXPECT_THROW(add(Tensor<double>::zeros({2}), Tensor<double>::zeros({3})), ShapeError);
  EXPECT_THROW(nd::log(Tensor<double>({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(div(Tensor<double>::full({2}, 1.0), Tensor<double>({2}, {1.0, 0.0})), NumericError);
  const auto c = clamp(Tensor<double>({3}, {-2.0, 0.5, 3.0}), 0.0, 1.0);
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.5);
  EXPECT_EQ(c[2], 1.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  const auto x = random_tensor({6}, 3, 0.5, 2.0);
  const auto other = random_tensor({6}, 4, 0.5, 2.0);
  const std::vector<std::function<Tensor<double>(const Tensor<double>&)>> fns = {
      [&](const Tensor<double>& t) { return sum(mul(sub(t, other), div(t, other))); },
      [&](const Tensor<double>& t) { return sum(nd::exp(t)); },
      [&](const Tensor<double>& t) { return sum(nd::log(t)); },
      [&](const Tensor<double>& t) { return sum(mul(sigmoid(t), t)); },
      [&](const Tensor<double>& t) { return sum(relu(add(t, -1.2))); },
      [&](const Tensor<double>& t) { return sum(mul(silu(add(t, -1.2)), t)); },
      [&](const Tensor<double>& t) { return sum(mul(clamp(t, 0.7, 1.5), t)); },
  };
  for (const auto& f : fns) EXPECT_LT(grad_check<double>(f, x, 1e-3), 1e-3);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  const auto eye = Tensor<double>({2, 2}, {1, 0, 0, 1});
  const auto m = Tensor<double>({2, 2}, {1, 2, 3, 4});
  const auto p = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p[i], m[i]);
  EXPECT_EQ(matmul(Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 1}, {3, 4})).item(), 11);
  EXPECT_THROW(matmul(m, Tensor<double>::zeros({3, 1})), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  const auto a = random_tensor({3, 4}, 11);
  const auto b = random_tensor({4, 2}, 12);
  const auto w = random_tensor({3, 2}, 13);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(matmul(t, b), w); }, a, 1e-3), 1e-3);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(matmul(a, t), w); }, b, 1e-3), 1e-3);
}

TEST(Softmax, UniformAndStable) {
  const auto u = softmax(Tensor<double>::zeros({3}), 0);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const auto s = softmax(Tensor<float>({2}, {1000.f, 1000.f}), 0);
  EXPECT_FLOAT_EQ(s[0], 0.5f);
  EXPECT_FLOAT_EQ(s[1], 0.5f);
}

TEST(Softmax, SumsToOneAlongAnyAxis) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tensor({3, 4, 5}, 100 + trial, -30, 30);
    const std::size_t axis = static_cast<std::size_t>(trial % 3);
    const auto y = softmax(x, axis);
    const auto s = detail::split_at(x.shape(), axis);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double total = 0;
        for (std::size_t e = 0; e < s.extent; ++e) {
          const double v = y[(o * s.extent + e) * s.inner + i];
          EXPECT_GT(v, 0.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  const auto x = random_tensor({5}, 21);
  const auto w = random_tensor({5}, 22);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(softmax(t, 0), w); }, x, 1e-3), 1e-3);
  const auto m = random_tensor({3, 4}, 23);
  const auto wm = random_tensor({3, 4}, 24);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(softmax(t, 0), wm); }, m, 1e-3), 1e-3);
}

TEST(Conv, IdentityKernelAndSum) {
  const auto x = random_tensor({1, 4, 5}, 31);
  const auto id = conv_nd(x, Tensor<double>({1, 1, 1, 1}, {1.0}), 1, 0, 2);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(id[i], x[i]);
  const auto ones = Tensor<double>::full({1, 3, 3}, 1.0);
  const auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  const auto s = conv_nd(ones, k, 1, 0, 2);
  ASSERT_EQ(s.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(s[0], 9.0);
}

TEST(Conv, OutputSizeAndErrors) {
  const auto y = conv_nd(Tensor<double>::zeros({2, 7, 6, 5}), Tensor<double>::zeros({3, 2, 3, 3, 3}), 2, 1, 3);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 3, 3}));
  EXPECT_THROW(conv_nd(Tensor<double>::zeros({1, 2, 2}), Tensor<double>::zeros({1, 1, 5, 5}), 1, 1, 2), ShapeError);
  EXPECT_THROW(conv_nd(Tensor<double>::zeros({2, 4, 4}), Tensor<double>::zeros({1, 1, 3, 3}), 1, 1, 2), ShapeError);
}

TEST(Conv, Conv3dGradientMatchesFiniteDifferences) {
  const auto x = random_tensor({2, 4, 4, 4}, 41);
  const auto k = random_tensor({3, 2, 3, 3, 3}, 42);
  const auto b = random_tensor({3}, 43);
  const auto w = random_tensor({3, 4, 4, 4}, 44);
  auto f_x = [&](const Tensor<double>& t) { return dot(conv_nd(t, k, b, 1, 1, 3), w); };
  auto f_k = [&](const Tensor<double>& t) { return dot(conv_nd(x, t, b, 1, 1, 3), w); };
  auto f_b = [&](const Tensor<double>& t) { return dot(conv_nd(x, k, t, 1, 1, 3), w); };
  EXPECT_LT(grad_check<double>(f_x, x, 1e-3), 1e-3);
  EXPECT_LT(grad_check<double>(f_k, k, 1e-3), 1e-3);
  EXPECT_LT(grad_check<double>(f_b, b, 1e-3), 1e-3);
  const auto ws = random_tensor({3, 2, 2, 2}, 45);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(conv_nd(t, k, b, 2, 1, 3), ws); }, x, 1e-3),
            1e-3);
}

TEST(Conv, Conv2dStridedGradient) {
  const auto x = random_tensor({2, 6, 5}, 51);
  const auto k = random_tensor({2, 2, 3, 3}, 52);
  const auto w = random_tensor({2, 3, 3}, 53);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(conv_nd(t, k, 2, 1, 2), w); }, x, 1e-3), 1e-3);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(conv_nd(x, t, 2, 1, 2), w); }, k, 1e-3), 1e-3);
}

TEST(Resize, NearestUpsampleAndGradient) {
  const auto x = Tensor<double>({1, 1, 2, 1}, {0.0, 5.0});
  const auto y = resize_nearest(x, {2, 4, 2});
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(y[(a * 4 + b) * 2 + c], b >= 2 ? 5.0 : 0.0);
  const auto v = random_tensor({2, 3, 2, 2}, 61);
  const auto w = random_tensor({2, 6, 4, 3}, 62);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(resize_nearest(t, {6, 4, 3}), w); }, v, 1e-3),
            1e-3);
}

TEST(Bilinear, GridAlignedAndMidpoint) {
  const auto feat = Tensor<double>({1, 2, 2}, {0.0, 2.0, 4.0, 6.0});
  // Pixel (u=1, v=0) centre.
  EXPECT_DOUBLE_EQ(bilinear_sample2d(feat, Tensor<double>({1, 2}, {0.75, 0.25})).item(), 2.0);
  // Midway between pixel (0,0)=0 and (1,0)=2.
  EXPECT_DOUBLE_EQ(bilinear_sample2d(feat, Tensor<double>({1, 2}, {0.5, 0.25})).item(), 1.0);
  // Far outside returns zero.
  EXPECT_DOUBLE_EQ(bilinear_sample2d(feat, Tensor<double>({1, 2}, {3.0, -2.0})).item(), 0.0);
}

TEST(Bilinear, GradientsMatchFiniteDifferences) {
  const auto feat = random_tensor({3, 4, 5}, 71);
  const auto pts = off_grid_points(7, {5, 4}, 72);
  const auto w = random_tensor({7, 3}, 73);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(bilinear_sample2d(feat, t), w); }, pts, 1e-3),
            1e-3);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(bilinear_sample2d(t, pts), w); }, feat, 1e-3),
            1e-3);
}

TEST(Trilinear, GridAlignedAndMidpoint) {
  std::vector<double> v(8, 0.0);
  v[4] = 4.0;  // voxel (1, 0, 0) in a 2x2x2 grid
  const auto vol = Tensor<double>({1, 2, 2, 2}, v);
  EXPECT_DOUBLE_EQ(trilinear_sample3d(vol, Tensor<double>({1, 3}, {0.75, 0.25, 0.25})).item(), 4.0);
  EXPECT_DOUBLE_EQ(trilinear_sample3d(vol, Tensor<double>({1, 3}, {0.5, 0.25, 0.25})).item(), 2.0);
}

TEST(Trilinear, GradientsMatchFiniteDifferences) {
  const auto vol = random_tensor({2, 4, 4, 4}, 81);
  const auto pts = off_grid_points(9, {4, 4, 4}, 82);
  const auto w = random_tensor({9, 2}, 83);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(trilinear_sample3d(vol, t), w); }, pts, 1e-3),
            1e-3);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(trilinear_sample3d(t, pts), w); }, vol, 1e-3),
            1e-3);
}

TEST(ShapeOps, GradientsMatchFiniteDifferences) {
  const auto x = random_tensor({4, 3}, 91);
  const std::vector<std::size_t> idx{2, 0};
  const auto fill = random_tensor({3}, 92);
  const auto w5 = random_tensor({5, 3}, 93);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(scatter_rows(gather_rows(t, idx), idx, 5, fill), w5); },
                               x, 1e-3),
            1e-3);
  EXPECT_LT(grad_check<double>(
                [&](const Tensor<double>& t) {
                  const auto g = gather_rows(x, idx);
                  return dot(scatter_rows(g, idx, 5, t), w5);
                },
                fill, 1e-3),
            1e-3);
  const auto w = random_tensor({3, 6}, 94);
  EXPECT_LT(grad_check<double>(
                [&](const Tensor<double>& t) {
                  return dot(concat<double>({transpose(t), slice(transpose(t), 1, 1, 3)}, 1), w);
                },
                x, 1e-3),
            1e-3);
  const auto vals = random_tensor({2, 3, 4}, 95);
  const auto wts = random_tensor({2, 3}, 96);
  const auto wp = random_tensor({2, 4}, 97);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(weighted_pool(t, wts), wp); }, vals, 1e-3), 1e-3);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(weighted_pool(vals, t), wp); }, wts, 1e-3), 1e-3);
}

TEST(Backward, SumAndSquare) {
  TapeScope<double> scope;
  auto x = random_tensor({4}, 101).set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  auto s = Tensor<double>({1}, {3.0}).set_requires_grad(true);
  backward(mul(s, s));
  EXPECT_EQ(s.grad()[0], 6.0);
}

TEST(Backward, AccumulatesAcrossCalls) {
  TapeScope<double> scope;
  auto x = Tensor<double>({1}, {3.0}).set_requires_grad(true);
  const auto y = mul(x, x);
  backward(y);
  backward(y);
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, ErrorsOnBadRoot) {
  TapeScope<double> scope;
  auto x = random_tensor({3}, 111).set_requires_grad(true);
  EXPECT_THROW(backward(mul(x, 2.0)), ShapeError);
  EXPECT_THROW(backward(Tensor<double>::scalar(1.0)), Error);
  const auto y = sum(x);
  Tape<double>::active().clear();
  EXPECT_THROW(backward(y), Error);
}

TEST(Backward, GradientLinearity) {
  TapeScope<double> scope;
  auto x = random_tensor({5}, 121).set_requires_grad(true);
  const auto w = random_tensor({5}, 122);
  auto f1 = [&] { return sum(nd::exp(mul(x, w))); };
  auto f2 = [&] { return dot(softmax(x, 0), w); };
  backward(add(f1(), f2()));
  const std::vector<double> joint(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(f1());
  backward(f2());
  for (std::size_t i = 0; i < joint.size(); ++i) EXPECT_NEAR(joint[i], x.grad()[i], 1e-12);
}

TEST(Backward, ForwardIsDeterministic) {
  const auto vol = random_tensor({2, 4, 4, 4}, 131);
  const auto k = random_tensor({2, 2, 3, 3, 3}, 132);
  const auto a = conv_nd(vol, k, 1, 1, 3);
  const auto b = conv_nd(vol, k, 1, 1, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(GradCheck, ExactForLinearSum) {
  EXPECT_LT(grad_check<double>([](const Tensor<double>& t) { return sum(t); }, random_tensor({8}, 141), 1e-3), 1e-12);
}

TEST(GradCheck, SoftmaxThenDot) {
  const auto w = random_tensor({6}, 151);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& t) { return dot(softmax(t, 0), w); }, random_tensor({6}, 152), 1e-3),
            1e-3);
}

TEST(GradCheck, DetectsWrongBackwardRule) {
  // Square with a deliberately wrong derivative (x instead of 2x).
  auto bad_square = [](const Tensor<double>& t) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * t[i];
    return sum(Tape<double>::active().record(
        t.shape(), std::move(out), {t}, [t](std::span<const double> g, std::span<std::vector<double>* const> grads) {
          for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * t[i];
        }));
  };
  EXPECT_GT(grad_check<double>(bad_square, random_tensor({4}, 161, 1.0, 2.0), 1e-3), 0.1);
}

TEST(GradCheck, RejectsNonDeterministicFunction) {
  int calls = 0;
  auto drifting = [&](const Tensor<double>& t) { return add(sum(t), static_cast<double>(++calls)); };
  EXPECT_THROW(grad_check<double>(drifting, random_tensor({3}, 171), 1e-3), Error);
}

TEST(Snapshot, RoundTripAndErrors) {
  const auto t = Tensor<float>({2, 3}, {1, -2, 3.5f, 0, 1e-7f, 42});
  const auto bytes = encode_snapshot(t);
  EXPECT_EQ(bytes.size(), 4u + 4u + 2u * 8u + 6u * 4u);
  const auto back = decode_snapshot<float>(bytes);
  EXPECT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], t[i]);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_snapshot<float>(truncated), TruncatedError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_snapshot<float>(bad), BadMagicError);
}

TEST(Snapshot, CheckpointDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "cigocc_ndgrad_ckpt";
  std::filesystem::remove_all(dir);
  NamedParams<float> params{{"dmf.a", Tensor<float>({2}, {1, 2})}, {"dmf.b", Tensor<float>({1, 1}, {3})}};
  save_checkpoint(dir, params);
  const auto loaded = load_checkpoint<float>(dir);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded.at("dmf.b").item(), 3.0f);
  std::filesystem::remove_all(dir);
}
