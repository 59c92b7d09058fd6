#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "cigocc/errors.hpp"
#include "cigocc/ndgrad/tensor.hpp"

namespace cigocc::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics with a rigid world-from-camera pose. Camera frame is
/// x right, y down, z forward; `translation` is the camera centre in world
/// coordinates.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  std::size_t width = 1, height = 1;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw DataError("camera focal lengths must be positive");
    if (width < 1 || height < 1) throw DataError("camera image size must be at least 1x1");
    if (!rotation.allFinite() || !translation.allFinite() || !std::isfinite(cx) || !std::isfinite(cy)) {
      throw DataError("camera parameters must be finite");
    }
    if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
        std::abs(rotation.determinant() - 1.0) > 1e-6) {
      throw DataError("camera rotation must be orthonormal with determinant 1");
    }
  }

  Vec3 to_camera(const Vec3& world) const { return rotation.transpose() * (world - translation); }
  Vec3 to_world(const Vec3& cam) const { return rotation * cam + translation; }

  /// World point seen at continuous pixel (u, v) with camera-frame depth z.
  Vec3 unproject(double u, double v, double z) const {
    return to_world(Vec3((u - cx) / fx * z, (v - cy) / fy * z, z));
  }

  /// World-frame direction through pixel (u, v), scaled so that its
  /// camera-frame z component is 1.
  Vec3 ray_direction(double u, double v) const { return rotation * Vec3((u - cx) / fx, (v - cy) / fy, 1.0); }
};

/// Camera at `position` looking at `target`, with world +z as up.
inline CameraModel look_at(const Vec3& position, const Vec3& target, double focal, std::size_t width,
                           std::size_t height) {
  const Vec3 forward = (target - position).normalized();
  Vec3 right = forward.cross(Vec3::UnitZ());
  if (right.norm() < 1e-9) right = Vec3::UnitY().cross(forward);
  right.normalize();
  const Vec3 down = forward.cross(right);
  CameraModel cam;
  cam.fx = cam.fy = focal;
  cam.width = width;
  cam.height = height;
  cam.cx = static_cast<double>(width) / 2.0;
  cam.cy = static_cast<double>(height) / 2.0;
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = down;
  cam.rotation.col(2) = forward;
  cam.translation = position;
  return cam;
}

/// Per-pixel depth in metres, row-major (v * width + u); 0 marks missing.
struct DepthMap {
  std::size_t width = 0, height = 0;
  std::vector<float> values;

  DepthMap() = default;
  DepthMap(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0.0f) {}

  float at(std::size_t u, std::size_t v) const { return values[v * width + u]; }
  float& at(std::size_t u, std::size_t v) { return values[v * width + u]; }

  void validate() const {
    if (values.size() != width * height) throw DataError("depth map size does not match its dimensions");
    for (float d : values) {
      if (!std::isfinite(d) || d < 0.0f) throw DataError("depth values must be finite and non-negative");
    }
  }
};

/// Metric voxel volume: `origin` is the minimum corner.
struct VolumeSpec {
  Vec3 origin = Vec3::Zero();
  std::array<std::size_t, 3> dims{1, 1, 1};
  double voxel_size = 1;

  static VolumeSpec semantic_kitti() { return {Vec3(0.0, -25.6, -2.0), {256, 256, 32}, 0.2}; }

  void validate() const {
    if (!(voxel_size > 0)) throw DataError("voxel size must be positive");
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) throw DataError("volume dimensions must be at least 1");
    if (!origin.allFinite()) throw DataError("volume origin must be finite");
  }

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }

  std::size_t linear(std::size_t x, std::size_t y, std::size_t z) const { return (x * dims[1] + y) * dims[2] + z; }

  std::array<std::size_t, 3> unravel(std::size_t i) const {
    return {i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]};
  }

  Vec3 center(std::size_t x, std::size_t y, std::size_t z) const {
    return origin + voxel_size * Vec3(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5,
                                      static_cast<double>(z) + 0.5);
  }

  Vec3 extent() const {
    return voxel_size * Vec3(static_cast<double>(dims[0]), static_cast<double>(dims[1]), static_cast<double>(dims[2]));
  }

  bool operator==(const VolumeSpec& o) const {
    return origin == o.origin && dims == o.dims && voxel_size == o.voxel_size;
  }
};

/// Dense per-voxel values over a VolumeSpec, x-major then y then z.
template <class V>
struct VoxelGrid {
  VolumeSpec spec;
  std::vector<V> values;

  VoxelGrid() = default;
  explicit VoxelGrid(const VolumeSpec& s, V fill = V{}) : spec(s), values(s.voxel_count(), fill) {}

  V& at(std::size_t x, std::size_t y, std::size_t z) { return values[spec.linear(x, y, z)]; }
  const V& at(std::size_t x, std::size_t y, std::size_t z) const { return values[spec.linear(x, y, z)]; }
  std::size_t size() const { return values.size(); }

  bool operator==(const VoxelGrid& o) const { return spec == o.spec && values == o.values; }
};

using OccupancyGrid = VoxelGrid<std::uint8_t>;

using PointCloud = std::vector<Vec3>;

/// Lifts every valid depth pixel into the world frame, row-major pixel order.
inline PointCloud backproject_depth(const DepthMap& depth, const CameraModel& cam) {
  cam.validate();
  depth.validate();
  PointCloud cloud;
  for (std::size_t v = 0; v < depth.height; ++v)
    for (std::size_t u = 0; u < depth.width; ++u) {
      const float z = depth.at(u, v);
      if (z > 0.0f) cloud.push_back(cam.unproject(static_cast<double>(u), static_cast<double>(v), z));
    }
  return cloud;
}

/// Voxel index of a world point, or false when it lies outside [0, dims).
inline bool voxel_index(const VolumeSpec& spec, const Vec3& p, std::array<std::size_t, 3>& idx) {
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - spec.origin[a]) / spec.voxel_size);
    if (!(f >= 0.0) || f >= static_cast<double>(spec.dims[static_cast<std::size_t>(a)])) return false;
    idx[static_cast<std::size_t>(a)] = static_cast<std::size_t>(f);
  }
  return true;
}

inline OccupancyGrid voxelize_points(const PointCloud& cloud, const VolumeSpec& spec) {
  spec.validate();
  OccupancyGrid grid(spec, 0);
  std::array<std::size_t, 3> idx{};
  for (const Vec3& p : cloud) {
    if (voxel_index(spec, p, idx)) grid.at(idx[0], idx[1], idx[2]) = 1;
  }
  return grid;
}

/// Voxel centres in normalized image coordinates (u / width, v / height),
/// in voxel linear order.
struct ProjectedCenters {
  std::vector<double> uv;            // 2 per voxel
  std::vector<std::uint8_t> visible;  // z > 0 and inside the image
  std::vector<double> depth;          // camera-frame z

  template <class T>
  nd::Tensor<T> points() const {
    return nd::Tensor<T>({visible.size(), 2}, std::vector<T>(uv.begin(), uv.end()));
  }
};

inline ProjectedCenters project_voxel_centers(const VolumeSpec& spec, const CameraModel& cam) {
  spec.validate();
  cam.validate();
  const std::size_t n = spec.voxel_count();
  ProjectedCenters out;
  out.uv.resize(2 * n);
  out.visible.resize(n);
  out.depth.resize(n);
  const double w = static_cast<double>(cam.width), h = static_cast<double>(cam.height);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [x, y, z] = spec.unravel(i);
    const Vec3 pc = cam.to_camera(spec.center(x, y, z));
    out.depth[i] = pc.z();
    if (pc.z() > 0) {
      const double u = (cam.fx * pc.x() / pc.z() + cam.cx) / w;
      const double v = (cam.fy * pc.y() / pc.z() + cam.cy) / h;
      out.uv[2 * i] = u;
      out.uv[2 * i + 1] = v;
      out.visible[i] = u >= 0 && u <= 1 && v >= 0 && v <= 1;
    } else {
      // Behind the camera: park the sample far outside the image.
      out.uv[2 * i] = out.uv[2 * i + 1] = -2.0;
      out.visible[i] = 0;
    }
  }
  return out;
}

/// Index window of a forward-anchored, laterally centred range crop.
struct CropWindow {
  std::array<std::size_t, 3> begin{0, 0, 0};
  std::array<std::size_t, 3> dims{0, 0, 0};
};

inline CropWindow crop_window(const VolumeSpec& spec, double range_m) {
  spec.validate();
  if (!(range_m > 0)) throw DataError("crop range must be positive");
  const auto n = static_cast<std::size_t>(std::llround(range_m / spec.voxel_size));
  if (n == 0) throw DataError("crop range rounds to zero voxels");
  if (n > spec.dims[0] || n > spec.dims[1]) {
    throw DataError("crop range " + std::to_string(range_m) + " m exceeds the volume extent");
  }
  CropWindow w;
  w.begin = {0, spec.dims[1] / 2 - n / 2, 0};
  w.dims = {n, n, spec.dims[2]};
  return w;
}

/// Sub-grid with x in [0, range), y in [-range/2, range/2) about the lateral
/// centre, full height.
template <class V>
VoxelGrid<V> crop_range(const VoxelGrid<V>& grid, double range_m) {
  const CropWindow w = crop_window(grid.spec, range_m);
  VolumeSpec spec = grid.spec;
  spec.dims = w.dims;
  spec.origin = grid.spec.origin + grid.spec.voxel_size * Vec3(static_cast<double>(w.begin[0]),
                                                               static_cast<double>(w.begin[1]),
                                                               static_cast<double>(w.begin[2]));
  VoxelGrid<V> out(spec);
  for (std::size_t x = 0; x < w.dims[0]; ++x)
    for (std::size_t y = 0; y < w.dims[1]; ++y)
      for (std::size_t z = 0; z < w.dims[2]; ++z) out.at(x, y, z) = grid.at(x + w.begin[0], y + w.begin[1], z + w.begin[2]);
  return out;
}

/// Camera behind and above a volume, framing its whole footprint (focal
/// lengths fitted per image axis); used for synthetic scenes.
inline CameraModel default_camera(const VolumeSpec& spec, std::size_t width, std::size_t height) {
  const Vec3 ext = spec.extent();
  const Vec3 ground_center = spec.origin + Vec3(ext.x() / 2, ext.y() / 2, 0.0);
  const double reach = std::max(ext.x(), ext.y());
  const Vec3 position(spec.origin.x() - 0.15 * reach, ground_center.y(), spec.origin.z() + 0.45 * reach + ext.z());
  CameraModel cam = look_at(position, ground_center, 1.0, width, height);
  double fx = 1e9, fy = 1e9;
  for (int i = 0; i < 8; ++i) {
    const Vec3 corner = spec.origin + Vec3((i & 1) ? ext.x() : 0.0, (i & 2) ? ext.y() : 0.0, (i & 4) ? ext.z() : 0.0);
    const Vec3 pc = cam.to_camera(corner);
    if (pc.z() <= 0) continue;
    fx = std::min(fx, 0.96 * (static_cast<double>(width) / 2.0) / std::max(1e-9, std::abs(pc.x() / pc.z())));
    fy = std::min(fy, 0.96 * (static_cast<double>(height) / 2.0) / std::max(1e-9, std::abs(pc.y() / pc.z())));
  }
  cam.fx = fx;
  cam.fy = fy;
  return cam;
}

}  // namespace cigocc::geometry
