#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cigocc/dmfnet.hpp"
#include "cigocc/semkitti.hpp"

using namespace cigocc;
using namespace cigocc::dmf;
using geometry::Vec3;

namespace {

CameraModel test_camera(std::size_t w, std::size_t h) {
  CameraModel cam;
  cam.fx = cam.fy = 40;
  cam.width = w;
  cam.height = h;
  cam.cx = static_cast<double>(w) / 2;
  cam.cy = static_cast<double>(h) / 2;
  return cam;
}

template <class T>
Tensor<T> random_features(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<T> v(c * h * w);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Tensor<T>({c, h, w}, std::move(v));
}

// Direct bilinear interpolation of f (C,H,W) at pixel-continuous (x, y) with
// pixel centres at integer + 0.5 and zero outside.
double bilinear_oracle(const Tensor<double>& f, std::size_t ch, double un, double vn) {
  const std::size_t H = f.dim(1), W = f.dim(2);
  const double x = un * W - 0.5, y = vn * H - 0.5;
  const double x0 = std::floor(x), y0 = std::floor(y);
  double acc = 0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const double xi = x0 + dx, yi = y0 + dy;
      if (xi < 0 || yi < 0 || xi >= W || yi >= H) continue;
      const double w = (dx ? x - x0 : 1 - (x - x0)) * (dy ? y - y0 : 1 - (y - y0));
      acc += w * f.data()[(ch * H + static_cast<std::size_t>(yi)) * W + static_cast<std::size_t>(xi)];
    }
  return acc;
}

DmfConfig small_config() {
  DmfConfig cfg;
  cfg.feature_channels = 2;
  cfg.width = 2;
  cfg.out_channels = 3;
  cfg.classes = 3;
  cfg.proposal_width = 2;
  return cfg;
}

}  // namespace

TEST(Paint, ZeroOccupancyGivesZeroVolume) {
  const VolumeSpec spec{Vec3(-0.8, -0.8, 2.0), {8, 8, 4}, 0.2};
  const auto out = paint_features(random_features<double>(3, 16, 16, 1), OccupancyGrid(spec), test_camera(16, 16));
  EXPECT_EQ(out.shape(), (nd::Shape{3, 8, 8, 4}));
  EXPECT_TRUE(std::all_of(out.data().begin(), out.data().end(), [](double v) { return v == 0.0; }));
}

TEST(Paint, PrincipalRayVoxelSamplesImageCentre) {
  const VolumeSpec spec{Vec3(-0.1, -0.1, 3.9), {1, 1, 1}, 0.2};
  OccupancyGrid occ(spec, 1);
  const auto f = random_features<double>(2, 12, 16, 2);
  const auto cam = test_camera(16, 12);
  const auto out = paint_features(f, occ, cam);
  for (std::size_t c = 0; c < 2; ++c)
    EXPECT_NEAR(out.data()[c], bilinear_oracle(f, c, cam.cx / 16.0, cam.cy / 12.0), 1e-12);
}

TEST(Paint, MatchesProjectAndSampleOracle) {
  const VolumeSpec spec{Vec3(-0.8, -0.8, 1.5), {8, 8, 4}, 0.2};
  auto cam = test_camera(20, 14);
  cam.fx = cam.fy = 15;
  cam.rotation = Eigen::AngleAxisd(0.2, Vec3::UnitY()).toRotationMatrix();
  OccupancyGrid occ(spec);
  std::mt19937 rng(4);
  for (auto& v : occ.values) v = rng() % 3 == 0;
  const auto f = random_features<double>(3, 14, 20, 3);
  const auto out = paint_features(f, occ, cam);
  std::size_t checked = 0;
  for (std::size_t x = 0; x < 8; ++x)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t z = 0; z < 4; ++z) {
        const std::size_t i = spec.linear(x, y, z);
        const Vec3 pc = cam.rotation.transpose() * (spec.center(x, y, z) - cam.translation);
        const double un = (cam.fx * pc.x() / pc.z() + cam.cx) / 20.0, vn = (cam.fy * pc.y() / pc.z() + cam.cy) / 14.0;
        const bool visible = pc.z() > 0 && un >= 0 && un <= 1 && vn >= 0 && vn <= 1;
        for (std::size_t c = 0; c < 3; ++c) {
          const double expect = (occ.values[i] && visible) ? bilinear_oracle(f, c, un, vn) : 0.0;
          EXPECT_NEAR(out.data()[c * spec.voxel_count() + i], expect, 1e-12);
        }
        checked += occ.values[i] && visible;
      }
  EXPECT_GT(checked, 20u);
}

TEST(OneHot, BoxFilteredClassMaps) {
  const std::vector<std::uint8_t> mask{1, 1, 255, 6, 1, 6};  // 3 x 2
  const std::vector<std::uint16_t> ids{1, 6};
  const auto f = one_hot_features<double>(mask, 3, 2, ids);
  EXPECT_EQ(f.shape(), (nd::Shape{2, 2, 3}));
  // Pixel (0,0) sees class 1 at (0,0), (1,0), (1,1).
  EXPECT_NEAR(f.data()[0], 3.0 / 9.0, 1e-15);
  EXPECT_NEAR(f.data()[6 + 0], 1.0 / 9.0, 1e-15);
}

TEST(DmfForward, ShapeAndDegenerateDepth) {
  const VolumeSpec spec{Vec3(-0.8, -0.8, 1.5), {8, 8, 4}, 0.2};
  const auto cam = test_camera(16, 16);
  auto params = DmfParams<float>::init(small_config(), 5);
  nd::TapeScope<float> scope;
  const auto out = dmf_forward(random_features<float>(2, 16, 16, 6), DepthMap(16, 16), cam, spec, params);
  EXPECT_EQ(out.shape(), (nd::Shape{3, 8, 8, 4}));
  EXPECT_TRUE(std::all_of(out.data().begin(), out.data().end(), [](float v) { return std::isfinite(v); }));
}

TEST(DmfForward, FusionPathIsLiveAndDeterministic) {
  const auto spec = semkitti::default_synth_spec();
  const auto cam = geometry::default_camera(spec, 64, 48);
  const auto scene = semkitti::synth_scene(7, spec, cam);
  auto cfg = small_config();
  cfg.feature_channels = 4;
  const auto params = DmfParams<float>::init(cfg, 8);
  const std::vector<std::uint16_t> palette{1, 5, 6, 18};
  const auto f_i = one_hot_features<float>(scene.mask, 64, 48, palette);
  nd::TapeScope<float> scope;
  const auto a = dmf_forward(f_i, scene.depth, cam, spec, params);
  const auto b = dmf_forward(f_i, scene.depth, cam, spec, params);
  const auto z = dmf_forward(Tensor<float>::zeros(f_i.shape()), scene.depth, cam, spec, params);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), z.data().begin()));
}

TEST(DmfForward, ParameterGradientsMatchFiniteDifferences) {
  const VolumeSpec spec{Vec3(-0.8, -0.8, 2.0), {8, 8, 2}, 0.2};
  auto cam = test_camera(12, 12);
  cam.fx = cam.fy = 25;
  OccupancyGrid occ(spec);
  std::mt19937 rng(9);
  for (auto& v : occ.values) v = rng() % 2;
  const auto params = DmfParams<double>::init(small_config(), 10);
  const auto f_i = random_features<double>(2, 12, 12, 11);
  const auto report = nd::grad_check_params<double>(
      [&] { return nd::sum(seg_head(dmf_forward(f_i, occ, cam, params), params)); }, params.named(), 1e-3);
  EXPECT_LT(report.max_error, 1e-2) << report.worst_param;
  const auto raw_report = nd::grad_check_params<double>(
      [&] { return nd::sum(dmf_forward(f_i, occ, cam, params)); }, params.named(), 1e-3);
  EXPECT_LT(raw_report.max_error, 1e-2) << raw_report.worst_param;
}

TEST(DmfForward, FeatureGradientMatchesFiniteDifferences) {
  const VolumeSpec spec{Vec3(-0.8, -0.8, 2.0), {8, 8, 2}, 0.2};
  auto cam = test_camera(12, 12);
  cam.fx = cam.fy = 25;
  OccupancyGrid occ(spec, 1);
  const auto params = DmfParams<double>::init(small_config(), 12);
  const double err = nd::grad_check<double>(
      [&](const Tensor<double>& f) { return nd::sum(dmf_forward(f, occ, cam, params)); },
      random_features<double>(2, 12, 12, 13), 1e-3);
  EXPECT_LT(err, 1e-2);
}

TEST(SegHead, ZeroInputGivesBias) {
  auto params = DmfParams<double>::init(small_config(), 14);
  for (auto& w : params.seg.w.mutable_data()) w = 0;
  const std::vector<double> bias{0.5, -1.0, 2.0};
  std::copy(bias.begin(), bias.end(), params.seg.b.mutable_data().begin());
  nd::TapeScope<double> scope;
  const auto out = seg_head(Tensor<double>::zeros({3, 2, 2, 2}), params);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out.data()[c * 8 + i], bias[c]);
  EXPECT_THROW(seg_head(Tensor<double>::zeros({4, 2, 2, 2}), params), ShapeError);
}

TEST(Proposals, NegativeInfiniteBiasKeepsRawOccupancy) {
  const VolumeSpec spec{Vec3::Zero(), {8, 8, 4}, 0.2};
  OccupancyGrid raw(spec);
  std::mt19937 rng(15);
  for (auto& v : raw.values) v = rng() % 5 == 0;
  auto params = DmfParams<double>::init(small_config(), 16);
  params.occ_out.b.mutable_data()[1] = -1e30;
  const auto q = propose_queries(raw, params, ProposalConfig{0.5, 1.0});
  EXPECT_EQ(q.mask, raw.values);
  EXPECT_EQ(q.count(), static_cast<std::size_t>(std::count(raw.values.begin(), raw.values.end(), 1)));
  EXPECT_TRUE(std::is_sorted(q.indices.begin(), q.indices.end()));
}

TEST(Proposals, UnionFloorAndCap) {
  const VolumeSpec spec{Vec3::Zero(), {8, 8, 4}, 0.2};
  OccupancyGrid raw(spec);
  std::mt19937 rng(17);
  for (auto& v : raw.values) v = rng() % 6 == 0;
  const auto params = DmfParams<double>::init(small_config(), 18);
  const auto strict = propose_queries(raw, params, ProposalConfig{1.0, 1e9});
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (raw.values[i]) EXPECT_EQ(strict.mask[i], 1);

  std::vector<double> prob(raw.size());
  for (auto& p : prob) p = (rng() % 1000) / 1000.0;
  const std::size_t raw_count = static_cast<std::size_t>(std::count(raw.values.begin(), raw.values.end(), 1));
  const auto capped = select_proposals(raw, prob, 0.3, raw_count + 10);
  EXPECT_EQ(capped.count(), raw_count + 10);
  // Oracle: the admitted extras are the ten most probable non-raw voxels.
  std::vector<std::pair<double, std::size_t>> extra;
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (!raw.values[i] && prob[i] >= 0.3) extra.emplace_back(-prob[i], i);
  std::sort(extra.begin(), extra.end());
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(capped.mask[extra[k].second], 1);
  const auto floor_only = select_proposals(raw, prob, 0.3, 0);
  EXPECT_EQ(floor_only.mask, raw.values);
}
