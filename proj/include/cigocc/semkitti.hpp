#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cigocc/errors.hpp"
#include "cigocc/geometry.hpp"
#include "cigocc/io.hpp"

namespace cigocc::semkitti {

using geometry::CameraModel;
using geometry::DepthMap;
using geometry::Vec3;
using geometry::VolumeSpec;

inline constexpr std::uint16_t kIgnore = 255;

/// Per-voxel class ids: raw dataset ids, or train ids in [0, N) with 255 = ignore.
using LabelGrid = geometry::VoxelGrid<std::uint16_t>;

// ---------------------------------------------------------------- binary I/O

/// Unpacks MSB-first bits: bit i of byte b is voxel b * 8 + i.
inline std::vector<std::uint8_t> read_packed_bits(std::span<const std::uint8_t> bytes, std::size_t voxel_count) {
  const std::size_t expect = (voxel_count + 7) / 8;
  if (bytes.size() != expect) {
    throw FormatError("packed bit grid: expected " + std::to_string(expect) + " bytes for " +
                      std::to_string(voxel_count) + " voxels, got " + std::to_string(bytes.size()));
  }
  std::vector<std::uint8_t> out(voxel_count);
  for (std::size_t i = 0; i < voxel_count; ++i) out[i] = (bytes[i / 8] >> (7 - i % 8)) & 1u;
  return out;
}

inline io::Bytes write_packed_bits(std::span<const std::uint8_t> bits) {
  io::Bytes out((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  }
  return out;
}

inline std::vector<std::uint16_t> read_labels(std::span<const std::uint8_t> bytes, std::size_t voxel_count) {
  if (bytes.size() != 2 * voxel_count) {
    throw FormatError("label grid: expected " + std::to_string(2 * voxel_count) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  std::vector<std::uint16_t> out(voxel_count);
  for (std::size_t i = 0; i < voxel_count; ++i) out[i] = io::get_le<std::uint16_t>(bytes, 2 * i);
  return out;
}

inline io::Bytes write_labels(std::span<const std::uint16_t> labels) {
  io::Bytes out;
  out.reserve(labels.size() * 2);
  for (auto l : labels) io::put_le(out, l);
  return out;
}

// ---------------------------------------------------------------- classes

/// Class names, raw-to-train mapping and class frequencies. Train id 0 is
/// the empty class; the remaining ids follow the benchmark's class order.
struct ClassTable {
  std::vector<std::string> names;
  std::map<std::uint16_t, std::uint16_t> raw_to_train;
  std::vector<double> frequencies;

  std::size_t size() const { return names.size(); }

  void validate() const {
    if (names.empty()) throw ConfigError("class table has no classes");
    if (frequencies.size() != names.size()) throw ConfigError("class table needs one frequency per class");
    for (double f : frequencies) {
      if (!(f > 0) || !std::isfinite(f)) throw ConfigError("class frequencies must be positive");
    }
    for (const auto& [raw, train] : raw_to_train) {
      if (train >= names.size() && train != kIgnore) {
        throw ConfigError("raw id " + std::to_string(raw) + " maps outside the class range");
      }
    }
  }

  std::uint16_t map(std::uint16_t raw) const {
    const auto it = raw_to_train.find(raw);
    return it == raw_to_train.end() ? kIgnore : it->second;
  }

  std::optional<std::size_t> index_of(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names.begin());
  }

  /// Train id -> first raw id mapping onto it; train ids nobody maps to are
  /// left out.
  ClassTable inverse() const {
    ClassTable inv{names, {}, frequencies};
    for (const auto& [raw, train] : raw_to_train) {
      if (train != kIgnore && !inv.raw_to_train.count(train)) inv.raw_to_train[train] = raw;
    }
    return inv;
  }

  static ClassTable identity(std::size_t n) {
    ClassTable t;
    for (std::size_t i = 0; i < n; ++i) {
      t.names.push_back("class" + std::to_string(i));
      t.raw_to_train[static_cast<std::uint16_t>(i)] = static_cast<std::uint16_t>(i);
    }
    t.frequencies.assign(n, 1.0 / static_cast<double>(n));
    return t;
  }

  /// Empty class share used when the semantic shares leave no residual mass.
  static constexpr double kFallbackEmptyFraction = 0.5;

  /// The 20-class benchmark table. Semantic class frequencies are the
  /// published dataset shares. `unlabeled_is_empty` maps raw 0 to the empty
  /// class (completion ground truth) instead of ignore.
  static ClassTable semantic_kitti(bool unlabeled_is_empty = false) {
    static const std::array<std::pair<const char*, double>, 19> kClasses{{
        {"road", 15.30},      {"sidewalk", 11.13},     {"parking", 1.12},    {"other-ground", 0.56},
        {"building", 14.4},   {"car", 3.92},           {"truck", 0.16},      {"bicycle", 0.03},
        {"motorcycle", 0.03}, {"other-vehicle", 0.20}, {"vegetation", 39.3}, {"trunk", 0.51},
        {"terrain", 9.17},    {"person", 0.07},        {"bicyclist", 0.07},  {"motorcyclist", 0.05},
        {"fence", 3.90},      {"pole", 0.29},          {"traffic-sign", 0.08},
    }};
    ClassTable t;
    t.names.push_back("empty");
    t.frequencies.push_back(0.0);
    double semantic_mass = 0;
    for (const auto& [name, pct] : kClasses) {
      t.names.emplace_back(name);
      t.frequencies.push_back(pct / 100.0);
      semantic_mass += pct / 100.0;
    }
    const double residual = 1.0 - semantic_mass;
    t.frequencies[0] = residual > 0 ? residual : kFallbackEmptyFraction;

    // Raw dataset ids -> train ids, following the benchmark learning map;
    // moving objects fold onto their static classes.
    const std::array<std::pair<std::uint16_t, std::uint16_t>, 30> kMap{{
        {10, 6},   {11, 8},   {13, 10},  {15, 9},   {16, 10},  {18, 7},   {20, 10},  {30, 14},
        {31, 15},  {32, 16},  {40, 1},   {44, 3},   {48, 2},   {49, 4},   {50, 5},   {51, 17},
        {60, 1},   {70, 11},  {71, 12},  {72, 13},  {80, 18},  {81, 19},  {252, 6},  {253, 15},
        {254, 14}, {255, 16}, {256, 10}, {257, 10}, {258, 7},  {259, 10},
    }};
    for (const auto& [raw, train] : kMap) t.raw_to_train[raw] = train;
    // Unlabeled, outlier, other-structure and other-object.
    for (std::uint16_t raw : {0, 1, 52, 99}) t.raw_to_train[raw] = unlabeled_is_empty ? 0 : kIgnore;
    return t;
  }
};

inline LabelGrid remap_labels(const LabelGrid& raw, const ClassTable& table) {
  LabelGrid out(raw.spec);
  for (std::size_t i = 0; i < raw.size(); ++i) out.values[i] = table.map(raw.values[i]);
  return out;
}

// ---------------------------------------------------------------- CVOX export

inline constexpr std::string_view kCvoxMagic = "CVOX1\n";

struct CvoxFile {
  LabelGrid grid;
  std::vector<std::string> classes;
};

inline io::Bytes encode_cvox(const LabelGrid& grid, const std::vector<std::string>& classes) {
  grid.spec.validate();
  if (grid.values.size() != grid.spec.voxel_count()) throw DataError("label grid size does not match its volume");
  const nlohmann::json header{
      {"dims", {grid.spec.dims[0], grid.spec.dims[1], grid.spec.dims[2]}},
      {"voxel_size", grid.spec.voxel_size},
      {"origin", {grid.spec.origin.x(), grid.spec.origin.y(), grid.spec.origin.z()}},
      {"classes", classes},
  };
  const std::string text = header.dump();
  io::Bytes out(kCvoxMagic.begin(), kCvoxMagic.end());
  io::put_le(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const auto payload = write_labels(grid.values);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline CvoxFile decode_cvox(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCvoxMagic.size() ||
      !std::equal(kCvoxMagic.begin(), kCvoxMagic.end(), bytes.begin())) {
    throw BadMagicError("not a CVOX file");
  }
  std::size_t at = kCvoxMagic.size();
  const auto header_len = io::get_le<std::uint32_t>(bytes, at);
  at += 4;
  if (bytes.size() - at < header_len) throw TruncatedError("CVOX header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(at + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CVOX header is not valid JSON: ") + e.what());
  }
  at += header_len;

  CvoxFile file;
  try {
    const auto dims = header.at("dims").get<std::vector<std::size_t>>();
    const auto origin = header.at("origin").get<std::vector<double>>();
    if (dims.size() != 3 || origin.size() != 3) throw FormatError("CVOX dims and origin need three entries");
    file.grid.spec = VolumeSpec{Vec3(origin[0], origin[1], origin[2]), {dims[0], dims[1], dims[2]},
                                header.at("voxel_size").get<double>()};
    file.classes = header.at("classes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CVOX header is malformed: ") + e.what());
  }
  try {
    file.grid.spec.validate();
  } catch (const DataError& e) {
    throw FormatError(std::string("CVOX header: ") + e.what());
  }

  const std::size_t count = file.grid.spec.voxel_count();
  const std::size_t payload = bytes.size() - at;
  if (payload < 2 * count) {
    throw TruncatedError("CVOX payload holds " + std::to_string(payload) + " bytes, dims need " +
                         std::to_string(2 * count));
  }
  if (payload > 2 * count) throw FormatError("CVOX payload is longer than its dims allow");
  file.grid.values = read_labels(bytes.subspan(at), count);
  return file;
}

inline void write_cvox(const std::filesystem::path& path, const LabelGrid& grid,
                       const std::vector<std::string>& classes) {
  io::write_file(path, encode_cvox(grid, classes));
}

inline CvoxFile read_cvox(const std::filesystem::path& path) { return decode_cvox(io::read_file(path)); }

// ---------------------------------------------------------------- dataset files

/// One completion frame: `<stem>.bin` input occupancy, `<stem>.label` raw
/// labels and optional `<stem>.invalid`; invalid voxels become ignore.
struct KittiFrame {
  geometry::OccupancyGrid input;
  LabelGrid labels;  // train ids
};

inline KittiFrame read_kitti_frame(const std::filesystem::path& stem, const ClassTable& table,
                                   const VolumeSpec& spec = VolumeSpec::semantic_kitti()) {
  const std::size_t n = spec.voxel_count();
  auto with_ext = [&](const char* ext) {
    auto p = stem;
    p += ext;
    return p;
  };
  KittiFrame frame;
  frame.input = geometry::OccupancyGrid(spec);
  if (std::filesystem::exists(with_ext(".bin"))) {
    frame.input.values = read_packed_bits(io::read_file(with_ext(".bin")), n);
  }
  LabelGrid raw(spec);
  raw.values = read_labels(io::read_file(with_ext(".label")), n);
  frame.labels = remap_labels(raw, table);
  if (std::filesystem::exists(with_ext(".invalid"))) {
    const auto invalid = read_packed_bits(io::read_file(with_ext(".invalid")), n);
    for (std::size_t i = 0; i < n; ++i) {
      if (invalid[i]) frame.labels.values[i] = kIgnore;
    }
  }
  return frame;
}

// ---------------------------------------------------------------- rendering

inline bool is_occupied(std::uint16_t train_id) { return train_id != 0 && train_id != kIgnore; }

struct Rendering {
  DepthMap depth;
  std::vector<std::uint8_t> mask;  // row-major train ids, 255 where the ray misses
};

namespace detail {

// Entry/exit ray parameters of an axis-aligned box, or nullopt when missed.
inline std::optional<std::pair<double, double>> slab(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 >= t1) return std::nullopt;
  return std::make_pair(t0, t1);
}

}  // namespace detail

/// Casts one ray per pixel through the label grid with exact voxel traversal.
/// Depth is camera-frame z at the midpoint of the ray's span inside the first
/// occupied voxel, so lifting the pixel back lands inside that voxel. Voxels
/// the ray only grazes (lifted point rounds outside) are passed over.
inline Rendering render_depth(const LabelGrid& gt, const CameraModel& cam) {
  cam.validate();
  const auto& spec = gt.spec;
  Rendering r{DepthMap(cam.width, cam.height), std::vector<std::uint8_t>(cam.width * cam.height, kIgnore)};
  const Vec3 lo = spec.origin, hi = spec.origin + spec.extent();
  const Vec3 o = cam.translation;
  const double vs = spec.voxel_size;

  for (std::size_t v = 0; v < cam.height; ++v) {
    for (std::size_t u = 0; u < cam.width; ++u) {
      const Vec3 d = cam.ray_direction(static_cast<double>(u), static_cast<double>(v));
      const auto span = detail::slab(o, d, lo, hi);
      if (!span) continue;
      const double t_enter = span->first, t_exit = span->second;

      // Start in the voxel containing the first point strictly inside the volume.
      const Vec3 start = o + d * (t_enter + 1e-9 * (t_exit - t_enter));
      std::array<std::ptrdiff_t, 3> idx{}, step{};
      std::array<double, 3> t_next{}, t_delta{};
      for (int a = 0; a < 3; ++a) {
        const auto n = static_cast<std::ptrdiff_t>(spec.dims[a]);
        idx[a] = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::floor((start[a] - lo[a]) / vs)), 0, n - 1);
        if (d[a] > 0) {
          step[a] = 1;
          t_next[a] = (lo[a] + static_cast<double>(idx[a] + 1) * vs - o[a]) / d[a];
          t_delta[a] = vs / d[a];
        } else if (d[a] < 0) {
          step[a] = -1;
          t_next[a] = (lo[a] + static_cast<double>(idx[a]) * vs - o[a]) / d[a];
          t_delta[a] = -vs / d[a];
        } else {
          step[a] = 0;
          t_next[a] = t_delta[a] = std::numeric_limits<double>::infinity();
        }
      }

      double t_in = t_enter;
      while (true) {
        const int axis = (t_next[0] <= t_next[1] && t_next[0] <= t_next[2]) ? 0 : (t_next[1] <= t_next[2] ? 1 : 2);
        const double t_out = std::min(t_next[axis], t_exit);
        const std::size_t lin = spec.linear(static_cast<std::size_t>(idx[0]), static_cast<std::size_t>(idx[1]),
                                            static_cast<std::size_t>(idx[2]));
        const std::uint16_t label = gt.values[lin];
        if (is_occupied(label) && t_out > t_in) {
          const auto depth = static_cast<float>(0.5 * (t_in + t_out));
          std::array<std::size_t, 3> check{};
          const Vec3 lifted = cam.unproject(static_cast<double>(u), static_cast<double>(v), depth);
          if (depth > 0.0f && geometry::voxel_index(spec, lifted, check) && spec.linear(check[0], check[1], check[2]) == lin) {
            r.depth.at(u, v) = depth;
            r.mask[v * cam.width + u] = static_cast<std::uint8_t>(label);
            break;
          }
        }
        if (t_next[axis] >= t_exit) break;
        idx[axis] += step[axis];
        if (idx[axis] < 0 || idx[axis] >= static_cast<std::ptrdiff_t>(spec.dims[axis])) break;
        t_in = t_next[axis];
        t_next[axis] += t_delta[axis];
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------- synthetic scenes

/// Train ids of the synthetic palette within the benchmark table.
struct Palette {
  static constexpr std::uint16_t road = 1, building = 5, car = 6, pole = 18;
};

struct SynthOptions {
  std::size_t image_width = 128, image_height = 96;
  std::optional<std::size_t> force_boxes;  // overrides the random 2..6 box count
  std::optional<std::size_t> force_poles;  // overrides the random 1..3 pole count
};

struct SynthScene {
  std::uint64_t seed = 0;
  VolumeSpec spec;
  CameraModel camera;
  LabelGrid gt;                     // train ids
  DepthMap depth;
  std::vector<std::uint8_t> mask;   // row-major train ids, 255 on misses
  std::vector<float> image;         // (3, H, W) channel-first, values in [0, 1]

  bool operator==(const SynthScene& o) const {
    return seed == o.seed && spec == o.spec && gt == o.gt && depth.values == o.depth.values && mask == o.mask &&
           image == o.image;
  }
};

inline constexpr std::size_t kMaxSynthVoxels = 128 * 128 * 128;

inline VolumeSpec default_synth_spec() { return {Vec3(0.0, -6.4, -2.0), {64, 64, 8}, 0.2}; }

namespace detail {

// Engine-level draws so scenes are identical across standard libraries.
inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline std::array<float, 3> class_color(std::uint16_t id) {
  switch (id) {
    case Palette::road: return {0.50f, 0.45f, 0.55f};
    case Palette::building: return {0.75f, 0.50f, 0.30f};
    case Palette::car: return {0.20f, 0.55f, 0.85f};
    case Palette::pole: return {0.95f, 0.90f, 0.25f};
    default: return {0.60f, 0.60f, 0.60f};
  }
}

}  // namespace detail

/// Builds a seeded scene: road ground layer, boxes of car or building and thin
/// poles, rendered from `cam`.
inline SynthScene synth_scene(std::uint64_t seed, const VolumeSpec& spec, const CameraModel& cam,
                              const SynthOptions& options = {}) {
  spec.validate();
  cam.validate();
  if (spec.voxel_count() > kMaxSynthVoxels) throw DataError("synthetic scene volume exceeds 128^3 voxels");
  if (spec.dims[0] < 8 || spec.dims[1] < 8 || spec.dims[2] < 3) {
    throw DataError("synthetic scene volume must be at least 8x8x3 voxels");
  }
  std::mt19937_64 rng(seed);
  SynthScene s;
  s.seed = seed;
  s.spec = spec;
  s.camera = cam;
  s.gt = LabelGrid(spec, 0);
  const auto [X, Y, Z] = spec.dims;

  for (std::size_t x = 0; x < X; ++x)
    for (std::size_t y = 0; y < Y; ++y) s.gt.at(x, y, 0) = Palette::road;

  auto fill_box = [&](std::size_t x0, std::size_t y0, std::size_t sx, std::size_t sy, std::size_t sz,
                      std::uint16_t label) {
    for (std::size_t x = x0; x < std::min(X, x0 + sx); ++x)
      for (std::size_t y = y0; y < std::min(Y, y0 + sy); ++y)
        for (std::size_t z = 1; z < std::min(Z, 1 + sz); ++z) s.gt.at(x, y, z) = label;
  };

  const std::size_t boxes = options.force_boxes.value_or(detail::pick(rng, 2, 6));
  for (std::size_t b = 0; b < boxes; ++b) {
    const bool building = detail::unit(rng) < 0.4;
    const std::size_t sx = detail::pick(rng, std::max<std::size_t>(2, X / 10), std::max<std::size_t>(3, X / 4));
    const std::size_t sy = detail::pick(rng, std::max<std::size_t>(2, Y / 12), std::max<std::size_t>(3, Y / 5));
    const std::size_t sz = building ? detail::pick(rng, Z / 2, Z - 1) : detail::pick(rng, 1, std::max<std::size_t>(1, Z / 2));
    const std::size_t x0 = detail::pick(rng, 0, X - sx);
    const std::size_t y0 = detail::pick(rng, 0, Y - sy);
    fill_box(x0, y0, sx, sy, sz, building ? Palette::building : Palette::car);
  }
  const std::size_t poles = options.force_poles.value_or(detail::pick(rng, 1, 3));
  for (std::size_t p = 0; p < poles; ++p) {
    const std::size_t x0 = detail::pick(rng, 0, X - 2);
    const std::size_t y0 = detail::pick(rng, 0, Y - 2);
    fill_box(x0, y0, 2, 2, Z - 1, Palette::pole);
  }

  auto rendering = render_depth(s.gt, cam);
  s.depth = std::move(rendering.depth);
  s.mask = std::move(rendering.mask);

  // Shaded class colours with seeded noise; misses get a vertical sky ramp.
  const std::size_t W = cam.width, H = cam.height;
  s.image.assign(3 * H * W, 0.0f);
  const double far = (spec.extent()).norm() + (cam.translation - spec.origin).norm();
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const std::size_t px = v * W + u;
      std::array<float, 3> rgb{};
      if (s.mask[px] == kIgnore) {
        const float t = static_cast<float>(v) / static_cast<float>(H);
        rgb = {0.55f + 0.3f * t, 0.70f + 0.2f * t, 0.95f};
      } else {
        const auto base = detail::class_color(s.mask[px]);
        const float shade = 1.0f - 0.5f * static_cast<float>(s.depth.values[px] / far);
        for (int c = 0; c < 3; ++c) rgb[c] = base[c] * shade;
      }
      for (int c = 0; c < 3; ++c) {
        const float noise = static_cast<float>(0.06 * (detail::unit(rng) - 0.5));
        s.image[static_cast<std::size_t>(c) * H * W + px] = std::clamp(rgb[c] + noise, 0.0f, 1.0f);
      }
    }
  }
  return s;
}

}  // namespace cigocc::semkitti
