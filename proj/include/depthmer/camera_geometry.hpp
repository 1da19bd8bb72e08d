#pragma once

// Pinhole conversion between cropped depth frames and metric point clouds.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "depthmer/errors.hpp"

namespace depthmer {

using DepthGrid =
    Eigen::Array<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raw sensor depth readings. Grids are indexed (row v, column u).
/// A zero reading is never valid.
struct DepthFrame {
  DepthGrid raw;
  MaskGrid valid;

  DepthFrame() = default;
  DepthFrame(DepthGrid raw_depth, MaskGrid mask)
      : raw(std::move(raw_depth)), valid(std::move(mask)) {
    if (raw.rows() != valid.rows() || raw.cols() != valid.cols())
      throw ShapeError("depth grid and validity mask differ in size");
    valid = valid && (raw != 0);
  }

  /// Validity derived from the zero-is-missing rule.
  static DepthFrame from_raw(DepthGrid raw_depth) {
    MaskGrid mask = raw_depth != 0;
    return DepthFrame(std::move(raw_depth), std::move(mask));
  }

  int width() const { return static_cast<int>(raw.cols()); }
  int height() const { return static_cast<int>(raw.rows()); }
  bool empty() const { return raw.size() == 0; }
  std::size_t valid_count() const { return static_cast<std::size_t>(valid.count()); }

  friend bool operator==(const DepthFrame& a, const DepthFrame& b) {
    return a.raw.rows() == b.raw.rows() && a.raw.cols() == b.raw.cols() &&
           (a.raw == b.raw).all() && (a.valid == b.valid).all();
  }
};

struct CropRect {
  int left = 0;
  int top = 0;
  int width = 0;
  int height = 0;

  static CropRect full(const DepthFrame& frame) {
    return {0, 0, frame.width(), frame.height()};
  }
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

/// Source pixel of a point, in the coordinates of the frame it came from.
struct PixelIndex {
  int u = 0;
  int v = 0;
  friend bool operator==(const PixelIndex&, const PixelIndex&) = default;
};

inline constexpr double kDefaultFocalLength = 1324.65;
inline constexpr double kDefaultDepthScale = 1000.0;

template <typename Scalar>
struct CameraIntrinsics {
  Scalar focal_x = Scalar(kDefaultFocalLength);
  Scalar focal_y = Scalar(kDefaultFocalLength);
  Scalar principal_x = Scalar(0);
  Scalar principal_y = Scalar(0);
  Scalar depth_scale = Scalar(kDefaultDepthScale);  // raw units per meter

  void validate() const {
    if (!(focal_x > 0) || !(focal_y > 0))
      throw ConfigError("focal lengths must be positive");
    if (!(depth_scale > 0)) throw ConfigError("depth_scale must be positive");
    if (!std::isfinite(double(principal_x)) || !std::isfinite(double(principal_y)))
      throw ConfigError("principal point must be finite");
  }

  /// Principal point at the center of a width x height pixel grid.
  static CameraIntrinsics centered(int width, int height,
                                   Scalar focal = Scalar(kDefaultFocalLength),
                                   Scalar scale = Scalar(kDefaultDepthScale)) {
    CameraIntrinsics intr;
    intr.focal_x = focal;
    intr.focal_y = focal;
    intr.principal_x = Scalar(width - 1) / Scalar(2);
    intr.principal_y = Scalar(height - 1) / Scalar(2);
    intr.depth_scale = scale;
    return intr;
  }

  template <typename Other>
  CameraIntrinsics<Other> cast() const {
    return {Other(focal_x), Other(focal_y), Other(principal_x), Other(principal_y),
            Other(depth_scale)};
  }

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

using CameraIntrinsicsd = CameraIntrinsics<double>;

/// Intrinsics of a sensor calibration re-expressed in the pixel frame of a crop.
template <typename Scalar>
CameraIntrinsics<Scalar> crop_intrinsics(const CameraIntrinsics<Scalar>& sensor,
                                         const CropRect& rect) {
  CameraIntrinsics<Scalar> out = sensor;
  out.principal_x -= Scalar(rect.left);
  out.principal_y -= Scalar(rect.top);
  return out;
}

template <typename Scalar>
struct PointCloud {
  using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;
  Points points;
  std::vector<PixelIndex> pixel_index;

  std::size_t size() const { return pixel_index.size(); }
  bool empty() const { return pixel_index.empty(); }
};

using PointCloudd = PointCloud<double>;

inline bool rect_inside(const CropRect& rect, int width, int height) {
  return rect.left >= 0 && rect.top >= 0 && rect.width >= 1 && rect.height >= 1 &&
         rect.width <= width - rect.left && rect.height <= height - rect.top;
}

inline DepthFrame crop_depth(const DepthFrame& frame, const CropRect& rect) {
  if (!rect_inside(rect, frame.width(), frame.height()))
    throw BoundsError("crop rect (" + std::to_string(rect.left) + "," +
                      std::to_string(rect.top) + "," + std::to_string(rect.width) + "," +
                      std::to_string(rect.height) + ") exceeds frame " +
                      std::to_string(frame.width()) + "x" + std::to_string(frame.height()));
  return DepthFrame(frame.raw.block(rect.top, rect.left, rect.height, rect.width),
                    frame.valid.block(rect.top, rect.left, rect.height, rect.width));
}

/// Restricts both frames to the cells valid in each, so that their
/// back-projections are index-aligned.
inline std::pair<DepthFrame, DepthFrame> intersect_validity(const DepthFrame& a,
                                                            const DepthFrame& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw AlignmentError("frame pair differs in size");
  MaskGrid both = a.valid && b.valid;
  return {DepthFrame(a.raw, both), DepthFrame(b.raw, both)};
}

/// Valid cells to metric points, row-major. z = raw / depth_scale,
/// x = (u - cx) z / fx, y = (v - cy) z / fy.
template <typename Scalar>
PointCloud<Scalar> backproject(const DepthFrame& frame,
                               const CameraIntrinsics<Scalar>& intr) {
  intr.validate();
  if (frame.empty()) throw EmptyInputError("backproject: empty frame");
  const std::size_t n = frame.valid_count();
  if (n == 0) throw EmptyInputError("backproject: frame has no valid depth cells");

  PointCloud<Scalar> cloud;
  cloud.points.resize(static_cast<Eigen::Index>(n), 3);
  cloud.pixel_index.reserve(n);
  Eigen::Index row = 0;
  for (int v = 0; v < frame.height(); ++v) {
    for (int u = 0; u < frame.width(); ++u) {
      if (!frame.valid(v, u)) continue;
      const Scalar z = Scalar(frame.raw(v, u)) / intr.depth_scale;
      cloud.points(row, 0) = (Scalar(u) - intr.principal_x) * z / intr.focal_x;
      cloud.points(row, 1) = (Scalar(v) - intr.principal_y) * z / intr.focal_y;
      cloud.points(row, 2) = z;
      cloud.pixel_index.push_back({u, v});
      ++row;
    }
  }
  return cloud;
}

/// Renders points into a width x height depth grid. Points landing outside
/// the grid, or with non-positive depth, are dropped; on collisions the
/// nearer point wins.
template <typename Scalar>
DepthFrame project(const PointCloud<Scalar>& cloud, const CameraIntrinsics<Scalar>& intr,
                   int width, int height) {
  intr.validate();
  if (width < 0 || height < 0) throw ShapeError("project: negative grid size");
  DepthGrid raw = DepthGrid::Zero(height, width);
  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> nearest =
      Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(
          height, width, std::numeric_limits<Scalar>::infinity());

  for (Eigen::Index i = 0; i < cloud.points.rows(); ++i) {
    const Scalar z = cloud.points(i, 2);
    if (!(z > 0)) continue;
    const double u = std::round(double(cloud.points(i, 0) * intr.focal_x / z + intr.principal_x));
    const double v = std::round(double(cloud.points(i, 1) * intr.focal_y / z + intr.principal_y));
    if (u < 0 || v < 0 || u >= width || v >= height) continue;
    const auto ui = static_cast<Eigen::Index>(u);
    const auto vi = static_cast<Eigen::Index>(v);
    if (z >= nearest(vi, ui)) continue;
    const double d = std::round(double(z * intr.depth_scale));
    if (d < 1 || d > 65535) continue;
    nearest(vi, ui) = z;
    raw(vi, ui) = static_cast<std::uint16_t>(d);
  }
  return DepthFrame::from_raw(std::move(raw));
}

}  // namespace depthmer
