#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "cigocc/dmfnet.hpp"
#include "cigocc/errors.hpp"
#include "cigocc/geometry.hpp"
#include "cigocc/ndgrad.hpp"

namespace cigocc::cig {

using dmf::QueryProposals;
using geometry::CameraModel;
using geometry::VolumeSpec;
using nd::Tensor;

struct CigConfig {
  std::size_t d = 32;           // embedding width
  std::size_t heads = 2;        // M
  std::size_t points = 4;       // K
  std::size_t dca_layers = 1;
  std::size_t dsa_layers = 1;
  std::array<std::size_t, 3> backbone_widths{16, 32, 64};  // last stage has width d
  std::size_t decoder_width = 32;
  std::size_t raw_channels = 32;   // channels of F_raw
  std::size_t classes = 20;        // output classes including empty
  std::size_t mask_channels = 19;  // distillation mask channels
  std::size_t pos_frequencies = 4;

  void validate() const {
    if (d == 0 || heads == 0 || points == 0) throw ConfigError("attention sizes must be positive");
    if (d % heads != 0) throw ConfigError("embedding width d must be divisible by the head count");
    for (std::size_t w : backbone_widths) {
      if (w == 0) throw ConfigError("backbone widths must be positive");
    }
    if (decoder_width == 0 || raw_channels == 0 || mask_channels == 0 || pos_frequencies == 0) {
      throw ConfigError("cig channel counts must be positive");
    }
    if (classes < 2) throw ConfigError("cig needs at least two classes");
  }
};

/// Row-affine layer: x[N x in] -> x W + b.
template <class T>
struct Linear {
  Tensor<T> w, b;

  static Linear make(std::size_t in, std::size_t out, nd::Rng& rng, double gain = 1.0) {
    Linear l;
    l.w = nd::fan_in_param<T>({in, out}, in, rng, gain * std::sqrt(3.0));
    l.b = nd::constant_param<T>({out}, T(0));
    return l;
  }
  static Linear zeros(std::size_t in, std::size_t out) {
    return {nd::constant_param<T>({in, out}, T(0)), nd::constant_param<T>({out}, T(0))};
  }
  static Linear identity(std::size_t n) {
    Linear l = zeros(n, n);
    auto w = l.w.mutable_data();
    for (std::size_t i = 0; i < n; ++i) w[i * n + i] = T(1);
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return nd::linear(x, w, b); }

  void append(nd::NamedParams<T>& out, const std::string& name) const {
    out.emplace_back(name + ".w", w);
    out.emplace_back(name + ".b", b);
  }
};

/// 2D or 3D convolution with "same" padding for odd kernels.
template <class T>
struct Conv {
  Tensor<T> w, b;
  std::size_t stride = 1, pad = 0, rank = 2;

  static Conv make(std::size_t rank, std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride,
                   nd::Rng& rng, bool bias = true) {
    Conv c;
    nd::Shape shape{cout, cin};
    std::size_t fan_in = cin;
    for (std::size_t a = 0; a < rank; ++a) {
      shape.push_back(k);
      fan_in *= k;
    }
    c.w = nd::fan_in_param<T>(shape, fan_in, rng);
    if (bias) c.b = nd::constant_param<T>({cout}, T(0));
    c.stride = stride;
    c.pad = k / 2;
    c.rank = rank;
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return nd::conv_nd(x, w, b, stride, pad, rank); }

  void append(nd::NamedParams<T>& out, const std::string& name) const {
    out.emplace_back(name + ".w", w);
    if (b.defined()) out.emplace_back(name + ".b", b);
  }
};

/// Multi-head deformable attention over R-dimensional sampling grids.
template <class T>
struct DeformAttnParams {
  std::size_t heads = 1, points = 1, rank = 2;
  Linear<T> value, output, offsets, weights;

  /// Offsets start at zero so every sample sits on its reference point;
  /// attention logits start small and random.
  static DeformAttnParams make(std::size_t d, std::size_t heads, std::size_t points, std::size_t rank,
                               nd::Rng& rng) {
    DeformAttnParams p;
    p.heads = heads;
    p.points = points;
    p.rank = rank;
    p.value = Linear<T>::make(d, d, rng);
    p.output = Linear<T>::make(d, d, rng, 0.5);
    p.offsets = Linear<T>::zeros(d, heads * points * rank);
    p.weights = Linear<T>::make(d, heads * points, rng, 0.1);
    return p;
  }

  void append(nd::NamedParams<T>& out, const std::string& name) const {
    value.append(out, name + ".value");
    output.append(out, name + ".output");
    offsets.append(out, name + ".offsets");
    weights.append(out, name + ".weights");
  }
};

/// Softmax-normalised attention weights [N x (M*K)], one simplex per head.
template <class T>
Tensor<T> attention_weights(const Tensor<T>& queries, const DeformAttnParams<T>& p) {
  const std::size_t n = queries.dim(0);
  const auto logits = nd::reshape(p.weights(queries), {n * p.heads, p.points});
  return nd::reshape(nd::softmax(logits, 1), {n, p.heads * p.points});
}

/// Attention read-out without the residual. `refs` [N x R] holds normalised
/// reference points; `value_tokens` [S x d] lives on a grid of extents `grid`
/// (R = 2: (H, W) with points (u, v); R = 3: (X, Y, Z)). Offsets are in grid
/// cells, converted to normalised units per axis.
template <class T>
Tensor<T> deform_attend(const Tensor<T>& queries, const Tensor<T>& refs, const Tensor<T>& value_tokens,
                        const std::vector<std::size_t>& grid, const DeformAttnParams<T>& p) {
  const std::size_t n = queries.dim(0), d = queries.dim(1), r = p.rank;
  const std::size_t m = p.heads, k = p.points, dh = d / m;
  if (refs.rank() != 2 || refs.dim(0) != n || refs.dim(1) != r) {
    throw ShapeError("deform_attend: refs " + nd::to_string(refs.shape()) + " for " + std::to_string(n) + " queries");
  }
  if (value_tokens.rank() != 2 || value_tokens.dim(1) != d) throw ShapeError("deform_attend: value width mismatch");
  if (grid.size() != r) throw ShapeError("deform_attend: grid rank mismatch");

  // Normalised unit per point coordinate: 2D points are (u along W, v along H).
  std::vector<T> unit(r);
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t extent = r == 2 ? grid[1 - j] : grid[j];
    unit[j] = T(1) / static_cast<T>(extent);
  }
  std::vector<T> scale(n * m * k * r), base(n * m * k * r);
  auto rv = refs.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < m * k; ++s)
      for (std::size_t j = 0; j < r; ++j) {
        scale[(i * m * k + s) * r + j] = unit[j];
        base[(i * m * k + s) * r + j] = rv[i * r + j];
      }
  const Tensor<T> scale_t({n, m * k * r}, std::move(scale));
  const Tensor<T> base_t({n, m * k * r}, std::move(base));
  const auto locations = nd::add(base_t, nd::mul(p.offsets(queries), scale_t));
  const auto attn = attention_weights(queries, p);
  const auto values = p.value(value_tokens);

  std::vector<Tensor<T>> heads;
  heads.reserve(m);
  for (std::size_t h = 0; h < m; ++h) {
    const auto v_h = m == 1 ? values : nd::slice(values, 1, h * dh, (h + 1) * dh);
    const auto loc_h = nd::reshape(m == 1 ? locations : nd::slice(locations, 1, h * k * r, (h + 1) * k * r), {n * k, r});
    const auto sampled = r == 2 ? nd::bilinear_sample_rows(v_h, grid[0], grid[1], loc_h)
                                : nd::trilinear_sample_rows(v_h, {grid[0], grid[1], grid[2]}, loc_h);
    const auto w_h = m == 1 ? attn : nd::slice(attn, 1, h * k, (h + 1) * k);
    heads.push_back(nd::weighted_pool(nd::reshape(sampled, {n, k, dh}), w_h));
  }
  return p.output(m == 1 ? heads[0] : nd::concat(heads, 1));
}

/// Normalised (u, v) reference points and camera visibility of each proposal.
struct QueryLayout {
  std::vector<std::size_t> voxels;   // proposal voxel indices, increasing
  std::vector<std::size_t> visible;  // positions within `voxels` that project into the image
  std::vector<double> refs;          // [visible x 2]
  std::vector<double> positions;     // [voxels x 3] normalised voxel centres
};

inline QueryLayout make_layout(const QueryProposals& qd, const CameraModel& cam) {
  const auto& spec = qd.spec;
  const auto proj = geometry::project_voxel_centers(spec, cam);
  QueryLayout l;
  l.voxels = qd.indices;
  for (std::size_t i = 0; i < l.voxels.size(); ++i) {
    const std::size_t v = l.voxels[i];
    const auto [x, y, z] = spec.unravel(v);
    l.positions.push_back((static_cast<double>(x) + 0.5) / static_cast<double>(spec.dims[0]));
    l.positions.push_back((static_cast<double>(y) + 0.5) / static_cast<double>(spec.dims[1]));
    l.positions.push_back((static_cast<double>(z) + 0.5) / static_cast<double>(spec.dims[2]));
    if (!proj.visible[v]) continue;
    l.visible.push_back(i);
    l.refs.push_back(proj.uv[2 * v]);
    l.refs.push_back(proj.uv[2 * v + 1]);
  }
  return l;
}

/// Fixed Fourier features [N x 6F] of normalised 3D positions [N x 3].
template <class T>
Tensor<T> fourier_features(std::span<const double> positions, std::size_t frequencies) {
  const std::size_t n = positions.size() / 3;
  std::vector<T> out(n * 6 * frequencies);
  for (std::size_t i = 0; i < n; ++i) {
    T* row = out.data() + i * 6 * frequencies;
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t f = 0; f < frequencies; ++f) {
        const double arg = std::numbers::pi * std::ldexp(1.0, static_cast<int>(f)) * positions[i * 3 + a];
        row[(a * frequencies + f) * 2] = static_cast<T>(std::sin(arg));
        row[(a * frequencies + f) * 2 + 1] = static_cast<T>(std::cos(arg));
      }
  }
  return Tensor<T>({n, 6 * frequencies}, std::move(out));
}

template <class T>
struct CigParams {
  CigConfig cfg;
  std::array<Conv<T>, 4> backbone;
  Linear<T> query_embed;
  std::vector<DeformAttnParams<T>> dca, dsa;
  Tensor<T> mask_token;
  Conv<T> raw_proj;  // 1x1x1, no bias
  Conv<T> head;      // 1x1x1 to classes
  Conv<T> dec0, dec1, dec_out;

  static CigParams init(const CigConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nd::Rng rng(seed);
    CigParams p;
    p.cfg = cfg;
    const auto& bw = cfg.backbone_widths;
    p.backbone[0] = Conv<T>::make(2, bw[0], 3, 3, 2, rng);
    p.backbone[1] = Conv<T>::make(2, bw[1], bw[0], 3, 2, rng);
    p.backbone[2] = Conv<T>::make(2, bw[2], bw[1], 3, 2, rng);
    p.backbone[3] = Conv<T>::make(2, cfg.d, bw[2], 3, 2, rng);
    p.query_embed = Linear<T>::make(6 * cfg.pos_frequencies, cfg.d, rng);
    for (std::size_t i = 0; i < cfg.dca_layers; ++i)
      p.dca.push_back(DeformAttnParams<T>::make(cfg.d, cfg.heads, cfg.points, 2, rng));
    for (std::size_t i = 0; i < cfg.dsa_layers; ++i)
      p.dsa.push_back(DeformAttnParams<T>::make(cfg.d, cfg.heads, cfg.points, 3, rng));
    p.mask_token = nd::uniform_param<T>({cfg.d}, T(0.1), rng);
    p.raw_proj = Conv<T>::make(3, cfg.d, cfg.raw_channels, 1, 1, rng, false);
    p.head = Conv<T>::make(3, cfg.classes, cfg.d, 1, 1, rng);
    for (T& v : p.head.w.mutable_data()) v *= T(0.4);
    p.dec0 = Conv<T>::make(2, cfg.decoder_width, cfg.d, 3, 1, rng);
    p.dec1 = Conv<T>::make(2, cfg.decoder_width, cfg.decoder_width, 3, 1, rng);
    p.dec_out = Conv<T>::make(2, cfg.mask_channels, cfg.decoder_width, 1, 1, rng);
    for (T& v : p.dec_out.w.mutable_data()) v = T(0);
    return p;
  }

  nd::NamedParams<T> named() const {
    nd::NamedParams<T> out;
    for (std::size_t i = 0; i < 4; ++i) backbone[i].append(out, "cig.backbone" + std::to_string(i));
    query_embed.append(out, "cig.query_embed");
    for (std::size_t i = 0; i < dca.size(); ++i) dca[i].append(out, "cig.dca" + std::to_string(i));
    for (std::size_t i = 0; i < dsa.size(); ++i) dsa[i].append(out, "cig.dsa" + std::to_string(i));
    out.emplace_back("cig.mask_token", mask_token);
    raw_proj.append(out, "cig.raw_proj");
    head.append(out, "cig.head");
    dec0.append(out, "cig.dec0");
    dec1.append(out, "cig.dec1");
    dec_out.append(out, "cig.dec_out");
    return out;
  }
};

/// Image (3, H, W) -> F_2D (d, H/16, W/16) through four stride-2 convolutions.
template <class T>
Tensor<T> backbone_forward(const Tensor<T>& image, const CigParams<T>& p) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("backbone expects a (3, H, W) image");
  if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0) {
    throw ShapeError("backbone input height and width must be divisible by 16, got " + nd::to_string(image.shape()));
  }
  Tensor<T> x = image;
  for (std::size_t i = 0; i < 4; ++i) {
    x = p.backbone[i](x);
    if (i < 3) x = nd::silu(x);
  }
  return x;
}

/// Lifts visible proposals with deformable cross-attention into F_2D; other
/// proposals keep their input query. Returns [N_d x d].
template <class T>
Tensor<T> deform_cross_attn(const Tensor<T>& f2d, const QueryLayout& layout, const Tensor<T>& queries,
                            const DeformAttnParams<T>& p) {
  if (f2d.rank() != 3 || f2d.dim(0) != queries.dim(1)) throw ShapeError("deform_cross_attn: feature width mismatch");
  if (queries.dim(0) != layout.voxels.size()) throw ShapeError("deform_cross_attn: one query per proposal required");
  if (layout.visible.empty()) return queries;
  const std::size_t nv = layout.visible.size(), d = queries.dim(1);
  std::vector<T> refs(layout.refs.begin(), layout.refs.end());
  const Tensor<T> refs_t({nv, 2}, std::move(refs));
  const bool all_visible = nv == queries.dim(0);
  const auto q_vis = all_visible ? queries : nd::gather_rows(queries, std::span<const std::size_t>(layout.visible));
  const auto out = deform_attend(q_vis, refs_t, nd::to_tokens(f2d), {f2d.dim(1), f2d.dim(2)}, p);
  if (all_visible) return nd::add(queries, out);
  return nd::add(queries, nd::scatter_rows(out, std::span<const std::size_t>(layout.visible), queries.dim(0),
                                           Tensor<T>::zeros({d})));
}

/// Voxel volume (d, X, Y, Z): proposal voxels take their lifted rows, all
/// others take the shared mask token.
template <class T>
Tensor<T> complete_with_mask_tokens(const Tensor<T>& lifted, const QueryProposals& qd, const Tensor<T>& token) {
  const auto& spec = qd.spec;
  const std::size_t n = spec.voxel_count(), d = token.size();
  const auto sp = dmf::spatial_shape(spec);
  if (qd.count() == 0) {
    // Every voxel is the token: ones[n x 1] * token[1 x d].
    return nd::from_tokens(nd::matmul(Tensor<T>::full({n, 1}, T(1)), nd::reshape(token, {1, d})), sp);
  }
  if (lifted.rank() != 2 || lifted.dim(0) != qd.count() || lifted.dim(1) != d) {
    throw ShapeError("complete_with_mask_tokens: " + nd::to_string(lifted.shape()) + " rows for " +
                     std::to_string(qd.count()) + " proposals");
  }
  return nd::from_tokens(nd::scatter_rows(lifted, std::span<const std::size_t>(qd.indices), n, token), sp);
}

/// q3d + 1x1x1 projection of F_raw.
template <class T>
Tensor<T> fuse_raw_features(const Tensor<T>& q3d, const Tensor<T>& f_raw, const CigParams<T>& p) {
  if (q3d.rank() != 4 || f_raw.rank() != 4 ||
      !std::equal(q3d.shape().begin() + 1, q3d.shape().end(), f_raw.shape().begin() + 1)) {
    throw ShapeError("fuse_raw_features: spatial mismatch " + nd::to_string(q3d.shape()) + " vs " +
                     nd::to_string(f_raw.shape()));
  }
  return nd::add(q3d, p.raw_proj(f_raw));
}

/// Normalised centres of every voxel of a (X, Y, Z) grid, [S x 3].
template <class T>
Tensor<T> voxel_reference_points(const std::array<std::size_t, 3>& dims) {
  const std::size_t n = dims[0] * dims[1] * dims[2];
  std::vector<T> refs(n * 3);
  std::size_t i = 0;
  for (std::size_t x = 0; x < dims[0]; ++x)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t z = 0; z < dims[2]; ++z, ++i) {
        refs[3 * i] = static_cast<T>((static_cast<double>(x) + 0.5) / static_cast<double>(dims[0]));
        refs[3 * i + 1] = static_cast<T>((static_cast<double>(y) + 0.5) / static_cast<double>(dims[1]));
        refs[3 * i + 2] = static_cast<T>((static_cast<double>(z) + 0.5) / static_cast<double>(dims[2]));
      }
  return Tensor<T>({n, 3}, std::move(refs));
}

/// Deformable self-attention over a (d, X, Y, Z) volume, residual included.
template <class T>
Tensor<T> deform_self_attn(const Tensor<T>& v, const DeformAttnParams<T>& p) {
  if (v.rank() != 4) throw ShapeError("deform_self_attn expects (d, X, Y, Z)");
  const std::array<std::size_t, 3> dims{v.dim(1), v.dim(2), v.dim(3)};
  const auto tokens = nd::to_tokens(v);
  const auto out = deform_attend(tokens, voxel_reference_points<T>(dims), tokens, {dims[0], dims[1], dims[2]}, p);
  return nd::from_tokens(nd::add(tokens, out), {dims[0], dims[1], dims[2]});
}

/// Nearest upsampling to `out_dims` (factor 1 or 2 per axis) and a per-voxel
/// linear map to class logits.
template <class T>
Tensor<T> occupancy_head(const Tensor<T>& v, const CigParams<T>& p, const std::array<std::size_t, 3>& out_dims) {
  if (v.rank() != 4) throw ShapeError("occupancy_head expects (d, X, Y, Z)");
  bool same = true;
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t in = v.dim(a + 1);
    if (out_dims[a] != in && out_dims[a] != 2 * in) {
      throw ShapeError("occupancy_head: output extent " + std::to_string(out_dims[a]) + " is not 1x or 2x of " +
                       std::to_string(in));
    }
    same = same && out_dims[a] == in;
  }
  const auto up = same ? v : nd::resize_nearest(v, {out_dims[0], out_dims[1], out_dims[2]});
  return p.head(up);
}

/// Per-pixel mask logits (N_mask, h, w) from F_2D.
template <class T>
Tensor<T> semantic_decoder(const Tensor<T>& f2d, const CigParams<T>& p) {
  if (f2d.rank() != 3 || f2d.dim(0) != p.dec0.w.dim(1)) throw ShapeError("semantic_decoder: channel mismatch");
  return p.dec_out(nd::silu(p.dec1(nd::silu(p.dec0(f2d)))));
}

/// Majority label of each factor x factor block of a (H, W) label image; ties
/// go to the smaller id.
inline std::vector<std::uint8_t> downsample_majority(std::span<const std::uint8_t> mask, std::size_t width,
                                                     std::size_t height, std::size_t factor) {
  if (mask.size() != width * height || factor == 0 || width % factor || height % factor) {
    throw ShapeError("downsample_majority: image size is not a multiple of the factor");
  }
  const std::size_t w = width / factor, h = height / factor;
  std::vector<std::uint8_t> out(w * h);
  std::array<std::size_t, 256> counts{};
  for (std::size_t by = 0; by < h; ++by)
    for (std::size_t bx = 0; bx < w; ++bx) {
      counts.fill(0);
      for (std::size_t y = by * factor; y < (by + 1) * factor; ++y)
        for (std::size_t x = bx * factor; x < (bx + 1) * factor; ++x) ++counts[mask[y * width + x]];
      std::size_t best = 0;
      for (std::size_t c = 1; c < 256; ++c)
        if (counts[c] > counts[best]) best = c;
      out[by * w + bx] = static_cast<std::uint8_t>(best);
    }
  return out;
}

/// Binary targets (channels, h, w): channel c is set where the label is c + 1.
template <class T>
Tensor<T> mask_targets(std::span<const std::uint8_t> labels, std::size_t width, std::size_t height,
                       std::size_t channels) {
  std::vector<T> t(channels * width * height, T(0));
  for (std::size_t px = 0; px < labels.size(); ++px) {
    const std::size_t l = labels[px];
    if (l >= 1 && l <= channels) t[(l - 1) * width * height + px] = T(1);
  }
  return Tensor<T>({channels, height, width}, std::move(t));
}

/// Per-scene constants for the stage-2 forward pass.
struct SceneInputs {
  VolumeSpec spec;
  QueryProposals proposals;
  QueryLayout layout;
};

inline SceneInputs make_scene_inputs(const QueryProposals& qd, const CameraModel& cam) {
  return {qd.spec, qd, make_layout(qd, cam)};
}

template <class T>
struct CigOutput {
  Tensor<T> logits;      // (classes, X, Y, Z)
  Tensor<T> mask_logits; // (mask_channels, h, w)
};

/// Full stage-2 forward for one image with its stage-1 guidance.
template <class T>
CigOutput<T> cig_forward(const Tensor<T>& image, const Tensor<T>& f_raw, const SceneInputs& scene,
                         const CigParams<T>& p) {
  const auto f2d = backbone_forward(image, p);
  const auto& qd = scene.proposals;
  Tensor<T> lifted;
  if (qd.count() > 0) {
    lifted = p.query_embed(fourier_features<T>(scene.layout.positions, p.cfg.pos_frequencies));
    for (const auto& layer : p.dca) lifted = deform_cross_attn(f2d, scene.layout, lifted, layer);
  }
  auto v = fuse_raw_features(complete_with_mask_tokens(lifted, qd, p.mask_token), f_raw, p);
  for (const auto& layer : p.dsa) v = deform_self_attn(v, layer);
  return {occupancy_head(v, p, scene.spec.dims), semantic_decoder(f2d, p)};
}

/// Argmax over the class axis of (C, voxels...) logits.
template <class T>
std::vector<std::uint16_t> argmax_labels(const Tensor<T>& logits) {
  const std::size_t c = logits.dim(0), n = logits.size() / c;
  auto x = logits.data();
  std::vector<std::uint16_t> out(n, 0);
  for (std::size_t k = 0; k < n; ++k) {
    T best = x[k];
    for (std::size_t j = 1; j < c; ++j) {
      if (x[j * n + k] > best) {
        best = x[j * n + k];
        out[k] = static_cast<std::uint16_t>(j);
      }
    }
  }
  return out;
}

}  // namespace cigocc::cig
