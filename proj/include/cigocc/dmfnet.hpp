#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cigocc/errors.hpp"
#include "cigocc/geometry.hpp"
#include "cigocc/ndgrad.hpp"

namespace cigocc::dmf {

using geometry::CameraModel;
using geometry::DepthMap;
using geometry::OccupancyGrid;
using geometry::VolumeSpec;
using nd::Tensor;

/// 3D convolution weights (Cout, Cin, k, k, k) plus optional bias.
template <class T>
struct Conv3 {
  Tensor<T> w, b;
  std::size_t stride = 1, pad = 0;

  static Conv3 make(std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride, nd::Rng& rng,
                    bool bias = true) {
    Conv3 c;
    c.w = nd::fan_in_param<T>({cout, cin, k, k, k}, cin * k * k * k, rng);
    if (bias) c.b = nd::constant_param<T>({cout}, T(0));
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return nd::conv_nd(x, w, b, stride, pad, 3); }

  void append(nd::NamedParams<T>& out, const std::string& name) const {
    out.emplace_back(name + ".w", w);
    if (b.defined()) out.emplace_back(name + ".b", b);
  }
};

struct DmfConfig {
  std::size_t feature_channels = 4;  // channels of the 2D semantic features F_i
  std::size_t width = 8;             // encoder base width C; widths are [C, 2C]
  std::size_t out_channels = 32;     // channels of F_raw
  std::size_t classes = 20;          // segmentation classes including empty
  std::size_t proposal_width = 8;    // hidden width of the occupancy predictor

  void validate() const {
    if (feature_channels == 0 || width == 0 || out_channels == 0 || proposal_width == 0) {
      throw ConfigError("dmf channel counts must be positive");
    }
    if (classes < 2) throw ConfigError("dmf needs at least two classes");
  }
};

/// Stage-1 parameters: encoder-decoder, segmentation head and the occupancy
/// predictor used for query proposals.
template <class T>
struct DmfParams {
  DmfConfig cfg;
  Conv3<T> enc0a, enc0b, enc1, enc2, dec1, dec0, out, seg;
  Conv3<T> occ0, occ1, occ_out;

  static DmfParams init(const DmfConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nd::Rng rng(seed);
    const std::size_t c = cfg.width, in = cfg.feature_channels + 2;
    DmfParams p;
    p.cfg = cfg;
    p.enc0a = Conv3<T>::make(c, in, 3, 1, rng);
    p.enc0b = Conv3<T>::make(c, c, 3, 1, rng);
    p.enc1 = Conv3<T>::make(2 * c, c, 3, 2, rng);
    p.enc2 = Conv3<T>::make(2 * c, 2 * c, 3, 2, rng);
    p.dec1 = Conv3<T>::make(2 * c, 4 * c, 3, 1, rng);
    p.dec0 = Conv3<T>::make(c, 3 * c, 3, 1, rng);
    p.out = Conv3<T>::make(cfg.out_channels, c, 3, 1, rng, true);
    p.seg = Conv3<T>::make(cfg.classes, cfg.out_channels, 1, 1, rng);
    p.occ0 = Conv3<T>::make(cfg.proposal_width, 2, 3, 1, rng);
    p.occ1 = Conv3<T>::make(cfg.proposal_width, cfg.proposal_width, 3, 1, rng);
    p.occ_out = Conv3<T>::make(2, cfg.proposal_width, 1, 1, rng);
    // Linear output layers start at a smaller scale than the hidden layers.
    for (auto* conv : {&p.out, &p.seg, &p.occ_out}) {
      for (T& v : conv->w.mutable_data()) v *= T(0.4);
    }
    return p;
  }

  nd::NamedParams<T> named() const {
    nd::NamedParams<T> out_params;
    enc0a.append(out_params, "dmf.enc0a");
    enc0b.append(out_params, "dmf.enc0b");
    enc1.append(out_params, "dmf.enc1");
    enc2.append(out_params, "dmf.enc2");
    dec1.append(out_params, "dmf.dec1");
    dec0.append(out_params, "dmf.dec0");
    out.append(out_params, "dmf.out");
    seg.append(out_params, "dmf.seg");
    occ0.append(out_params, "dmf.occ0");
    occ1.append(out_params, "dmf.occ1");
    occ_out.append(out_params, "dmf.occ_out");
    return out_params;
  }
};

inline nd::Shape spatial_shape(const VolumeSpec& spec) { return {spec.dims[0], spec.dims[1], spec.dims[2]}; }

/// Each occupied voxel whose centre projects into the image receives the
/// bilinear sample of f2d (C, H, W) there; all other voxels stay zero.
template <class T>
Tensor<T> paint_features(const Tensor<T>& f2d, const OccupancyGrid& occ, const CameraModel& cam) {
  if (f2d.rank() != 3) throw ShapeError("paint_features expects features (C, H, W)");
  const auto& spec = occ.spec;
  if (occ.values.size() != spec.voxel_count()) throw ShapeError("occupancy grid does not match its volume");
  const std::size_t c = f2d.dim(0), n = spec.voxel_count();
  const auto proj = geometry::project_voxel_centers(spec, cam);
  std::vector<std::size_t> idx;
  std::vector<T> pts;
  for (std::size_t i = 0; i < n; ++i) {
    if (!occ.values[i] || !proj.visible[i]) continue;
    idx.push_back(i);
    pts.push_back(static_cast<T>(proj.uv[2 * i]));
    pts.push_back(static_cast<T>(proj.uv[2 * i + 1]));
  }
  nd::Shape shape{c};
  const auto sp = spatial_shape(spec);
  shape.insert(shape.end(), sp.begin(), sp.end());
  if (idx.empty()) return Tensor<T>::zeros(shape);
  const Tensor<T> points({idx.size(), 2}, std::move(pts));
  const auto samples = nd::bilinear_sample2d(f2d, points);
  const auto rows = nd::scatter_rows(samples, std::span<const std::size_t>(idx), n, Tensor<T>::zeros({c}));
  return nd::from_tokens(rows, sp);
}

/// Constant per-voxel channels: occupancy and normalised height (z + 0.5) / Z.
template <class T>
Tensor<T> geometry_channels(const OccupancyGrid& occ) {
  const auto& spec = occ.spec;
  const std::size_t n = spec.voxel_count();
  std::vector<T> data(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = occ.values[i] ? T(1) : T(0);
    data[n + i] = static_cast<T>((static_cast<double>(i % spec.dims[2]) + 0.5) / static_cast<double>(spec.dims[2]));
  }
  return Tensor<T>({2, spec.dims[0], spec.dims[1], spec.dims[2]}, std::move(data));
}

inline OccupancyGrid depth_occupancy(const DepthMap& depth, const CameraModel& cam, const VolumeSpec& spec) {
  return geometry::voxelize_points(geometry::backproject_depth(depth, cam), spec);
}

/// F_raw = DMF(F_i, D_i): lift depth to voxels, paint them with F_i and run
/// the 3D encoder-decoder.
template <class T>
Tensor<T> dmf_forward(const Tensor<T>& f_i, const OccupancyGrid& occ, const CameraModel& cam,
                      const DmfParams<T>& p) {
  if (f_i.rank() != 3 || f_i.dim(0) != p.cfg.feature_channels) {
    throw ShapeError("dmf_forward: expected " + std::to_string(p.cfg.feature_channels) + "-channel features, got " +
                     nd::to_string(f_i.shape()));
  }
  const auto painted = paint_features(f_i, occ, cam);
  const auto x = nd::concat<T>({painted, geometry_channels<T>(occ)}, 0);
  const auto s0 = nd::silu(p.enc0b(nd::silu(p.enc0a(x))));
  const auto s1 = nd::silu(p.enc1(s0));
  const auto s2 = nd::silu(p.enc2(s1));
  const nd::Shape sp1(s1.shape().begin() + 1, s1.shape().end());
  const nd::Shape sp0(s0.shape().begin() + 1, s0.shape().end());
  const auto u1 = nd::silu(p.dec1(nd::concat<T>({nd::resize_nearest(s2, sp1), s1}, 0)));
  const auto u0 = nd::silu(p.dec0(nd::concat<T>({nd::resize_nearest(u1, sp0), s0}, 0)));
  return p.out(u0);
}

template <class T>
Tensor<T> dmf_forward(const Tensor<T>& f_i, const DepthMap& depth, const CameraModel& cam, const VolumeSpec& spec,
                      const DmfParams<T>& p) {
  return dmf_forward(f_i, depth_occupancy(depth, cam, spec), cam, p);
}

/// Per-voxel class logits (C_N, X, Y, Z); no softmax.
template <class T>
Tensor<T> seg_head(const Tensor<T>& f_raw, const DmfParams<T>& p) {
  if (f_raw.rank() != 4 || f_raw.dim(0) != p.seg.w.dim(1)) {
    throw ShapeError("seg_head: expected " + std::to_string(p.seg.w.dim(1)) + " input channels, got " +
                     nd::to_string(f_raw.shape()));
  }
  return p.seg(f_raw);
}

/// Two-class (empty, occupied) logits of the occupancy predictor.
template <class T>
Tensor<T> occupancy_logits(const OccupancyGrid& occ, const DmfParams<T>& p) {
  const auto x = geometry_channels<T>(occ);
  return p.occ_out(nd::silu(p.occ1(nd::silu(p.occ0(x)))));
}

// ---------------------------------------------------------------- proposals

/// Binary voxel mask with its set indices in increasing order.
struct QueryProposals {
  VolumeSpec spec;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> indices;

  std::size_t count() const { return indices.size(); }

  static QueryProposals from_mask(const VolumeSpec& spec, std::vector<std::uint8_t> mask) {
    if (mask.size() != spec.voxel_count()) throw ShapeError("proposal mask does not match its volume");
    QueryProposals q{spec, std::move(mask), {}};
    for (std::size_t i = 0; i < q.mask.size(); ++i) {
      if (q.mask[i]) {
        q.mask[i] = 1;
        q.indices.push_back(i);
      }
    }
    return q;
  }
};

struct ProposalConfig {
  double threshold = 0.5;
  double cap_fraction = 0.1;  // of all voxels; directly observed voxels are always kept

  void validate() const {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("proposal threshold must lie in (0, 1]");
    if (!(cap_fraction >= 0.0)) throw ConfigError("proposal cap fraction must be non-negative");
  }

  std::size_t cap(std::size_t voxels) const {
    const double c = cap_fraction * static_cast<double>(voxels);
    return c >= static_cast<double>(voxels) ? voxels : static_cast<std::size_t>(c);
  }
};

/// Union of raw occupancy with voxels whose probability reaches the
/// threshold; extra voxels are admitted by decreasing probability (ties by
/// index) until the total reaches `cap`.
inline QueryProposals select_proposals(const OccupancyGrid& raw, std::span<const double> prob, double threshold,
                                       std::size_t cap) {
  const std::size_t n = raw.spec.voxel_count();
  if (prob.size() != n) throw ShapeError("proposal probabilities do not match the volume");
  std::vector<std::uint8_t> mask(raw.values.begin(), raw.values.end());
  std::size_t taken = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
  std::vector<std::size_t> extra;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i] && prob[i] >= threshold) extra.push_back(i);
  }
  std::stable_sort(extra.begin(), extra.end(), [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });
  for (std::size_t i : extra) {
    if (taken >= cap) break;
    mask[i] = 1;
    ++taken;
  }
  return QueryProposals::from_mask(raw.spec, std::move(mask));
}

template <class T>
std::vector<double> occupancy_probability(const Tensor<T>& logits2) {
  const std::size_t n = logits2.size() / 2;
  auto l = logits2.data();
  std::vector<double> prob(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = static_cast<double>(l[i]), b = static_cast<double>(l[n + i]);
    prob[i] = 1.0 / (1.0 + std::exp(a - b));
  }
  return prob;
}

template <class T>
QueryProposals propose_queries(const OccupancyGrid& raw, const DmfParams<T>& p, const ProposalConfig& cfg) {
  cfg.validate();
  nd::TapeScope<T> scope;
  const auto prob = occupancy_probability(occupancy_logits(raw, p));
  return select_proposals(raw, prob, cfg.threshold, cfg.cap(raw.spec.voxel_count()));
}

template <class T>
QueryProposals propose_queries(const DepthMap& depth, const CameraModel& cam, const VolumeSpec& spec,
                               const DmfParams<T>& p, const ProposalConfig& cfg) {
  return propose_queries(depth_occupancy(depth, cam, spec), p, cfg);
}

// ---------------------------------------------------------------- 2D feature stand-in

/// One-hot maps of the listed class ids over a (H, W) label image, smoothed
/// with a 3x3 box filter (zero padded). Pixels labelled 255 contribute nothing.
template <class T>
Tensor<T> one_hot_features(std::span<const std::uint8_t> mask, std::size_t width, std::size_t height,
                           std::span<const std::uint16_t> class_ids) {
  if (mask.size() != width * height) throw ShapeError("label image does not match its size");
  const std::size_t c = class_ids.size();
  std::vector<T> hot(c * width * height, T(0));
  for (std::size_t px = 0; px < mask.size(); ++px) {
    for (std::size_t k = 0; k < c; ++k) {
      if (mask[px] == class_ids[k]) hot[k * width * height + px] = T(1);
    }
  }
  std::vector<T> out(hot.size(), T(0));
  for (std::size_t k = 0; k < c; ++k) {
    const T* src = hot.data() + k * width * height;
    T* dst = out.data() + k * width * height;
    for (std::size_t v = 0; v < height; ++v)
      for (std::size_t u = 0; u < width; ++u) {
        T acc = 0;
        for (int dv = -1; dv <= 1; ++dv)
          for (int du = -1; du <= 1; ++du) {
            const auto vv = static_cast<std::ptrdiff_t>(v) + dv, uu = static_cast<std::ptrdiff_t>(u) + du;
            if (vv < 0 || uu < 0 || vv >= static_cast<std::ptrdiff_t>(height) || uu >= static_cast<std::ptrdiff_t>(width))
              continue;
            acc += src[static_cast<std::size_t>(vv) * width + static_cast<std::size_t>(uu)];
          }
        dst[v * width + u] = acc / T(9);
      }
  }
  return Tensor<T>({c, height, width}, std::move(out));
}

}  // namespace cigocc::dmf
