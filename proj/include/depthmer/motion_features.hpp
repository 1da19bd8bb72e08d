#pragma once

// Per-point motion between an onset and an apex point cloud, its spherical
// encoding, and reduction of the field to a fixed-size k x 6 feature set.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "depthmer/camera_geometry.hpp"
#include "depthmer/errors.hpp"

namespace depthmer {

template <typename Scalar>
using Points3 = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;

template <typename Scalar>
struct MotionField {
  Points3<Scalar> positions;  // onset-frame coordinates
  Points3<Scalar> deltas;     // apex minus onset
  std::vector<PixelIndex> pixel_index;

  std::size_t size() const { return pixel_index.size(); }
};

/// Channels are (r, theta, phi). Before normalization r is in meters,
/// theta in (-pi, pi], phi in [-pi/2, pi/2]; afterwards each lies in [0, 1].
/// `amplitude` always carries the raw r so that ranking survives normalization.
template <typename Scalar>
struct SphericalMotion {
  Points3<Scalar> positions;
  Points3<Scalar> channels;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> amplitude;
  std::vector<PixelIndex> pixel_index;
  bool normalized = false;

  std::size_t size() const { return pixel_index.size(); }
};

struct ExtractionSummary {
  std::size_t valid_points = 0;      // after crop and mask intersection
  std::size_t after_filter = 0;      // after background filter
  std::size_t after_cap = 0;         // after amplitude cap
  std::size_t unique_selected = 0;   // distinct points in the feature set
  double mean_amplitude = 0;         // mean raw r of the selected rows, meters
};

/// Network input: row i = (x, y, z, c1, c2, c3).
template <typename Scalar>
struct MotionFeatureSet {
  using Rows = Eigen::Matrix<Scalar, Eigen::Dynamic, 6>;
  Rows features;
  std::optional<int> label;
  std::string subject_id;
  std::string sample_id;
  std::vector<PixelIndex> pixel_index;  // empty when loaded from a cache
  ExtractionSummary summary;

  int k() const { return static_cast<int>(features.rows()); }
};

using FeatureSet = MotionFeatureSet<double>;

enum class Selection { sorted, random };

/// How points are scored for sorted selection.
///  displacement_norm: L2 norm of the Cartesian displacement (the raw r).
///  channel_norm: L2 norm of the three normalized spherical channels.
enum class ScoreRule { displacement_norm, channel_norm };

/// observed: per-channel min-max over the retained points.
/// fixed: theta and phi scaled from their full signed ranges; r stays min-max.
enum class AngleScaling { observed, fixed };

/// Frame used when center_positions is set.
///  face: centroid and largest radius of every point that reached ranking, so
///        a selection keeps its location on the face.
///  selection: centroid and largest radius of the selected rows alone.
enum class CenterFrame { face, selection };

struct PipelineConfig {
  int k = 2048;
  Selection selection = Selection::sorted;
  double filter_factor = 1.5;
  bool center_positions = true;
  std::uint64_t rng_seed = 0;
  double amplitude_cap_percentile = 99.5;  // <= 0 or >= 100 disables the cap
  ScoreRule score_rule = ScoreRule::displacement_norm;
  AngleScaling angle_scaling = AngleScaling::observed;
  CenterFrame center_frame = CenterFrame::face;

  void validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (!(filter_factor > 0)) throw ConfigError("filter_factor must be > 0");
    if (!std::isfinite(amplitude_cap_percentile))
      throw ConfigError("amplitude_cap_percentile must be finite");
  }

  /// Stable textual form; used for cache keys and provenance.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "k=" << k << ";selection=" << (selection == Selection::sorted ? "sorted" : "random")
       << ";filter_factor=" << filter_factor << ";center_positions=" << center_positions
       << ";rng_seed=" << rng_seed << ";amplitude_cap_percentile=" << amplitude_cap_percentile
       << ";score_rule="
       << (score_rule == ScoreRule::displacement_norm ? "displacement_norm" : "channel_norm")
       << ";angle_scaling=" << (angle_scaling == AngleScaling::observed ? "observed" : "fixed")
       << ";center_frame=" << (center_frame == CenterFrame::face ? "face" : "selection");
    return os.str();
  }
};

namespace detail {

template <typename Matrix>
Matrix take_rows(const Matrix& m, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(Eigen::Index(i)) = m.row(rows[i]);
  return out;
}

template <typename Scalar>
SphericalMotion<Scalar> take(const SphericalMotion<Scalar>& sm,
                             const std::vector<Eigen::Index>& rows) {
  SphericalMotion<Scalar> out;
  out.positions = take_rows(sm.positions, rows);
  out.channels = take_rows(sm.channels, rows);
  out.amplitude = take_rows(sm.amplitude, rows);
  out.pixel_index.reserve(rows.size());
  for (auto r : rows) out.pixel_index.push_back(sm.pixel_index[std::size_t(r)]);
  out.normalized = sm.normalized;
  return out;
}

}  // namespace detail

/// apex - onset, point by point. The clouds must come from the same pixels
/// in the same order.
template <typename Scalar>
MotionField<Scalar> compute_displacement(const PointCloud<Scalar>& onset,
                                         const PointCloud<Scalar>& apex) {
  if (onset.size() != apex.size())
    throw AlignmentError("onset and apex clouds differ in length (" +
                         std::to_string(onset.size()) + " vs " + std::to_string(apex.size()) +
                         ")");
  if (onset.pixel_index != apex.pixel_index)
    throw AlignmentError("onset and apex clouds have different pixel correspondence");
  MotionField<Scalar> mf;
  mf.positions = onset.points;
  mf.deltas = apex.points - onset.points;
  mf.pixel_index = onset.pixel_index;
  return mf;
}

/// Keeps the points whose distance to the centroid is at most
/// factor * (mean distance to the centroid).
template <typename Scalar>
MotionField<Scalar> filter_background(const MotionField<Scalar>& mf, Scalar factor) {
  if (mf.size() == 0) throw EmptyInputError("filter_background: empty motion field");
  if (!(factor > 0)) throw ConfigError("filter factor must be > 0");
  const Eigen::Matrix<Scalar, 1, 3> center = mf.positions.colwise().mean();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dist =
      (mf.positions.rowwise() - center).rowwise().norm();
  const Scalar threshold = factor * dist.mean();

  std::vector<Eigen::Index> keep;
  keep.reserve(mf.size());
  for (Eigen::Index i = 0; i < dist.size(); ++i)
    if (dist(i) <= threshold) keep.push_back(i);

  MotionField<Scalar> out;
  out.positions = detail::take_rows(mf.positions, keep);
  out.deltas = detail::take_rows(mf.deltas, keep);
  out.pixel_index.reserve(keep.size());
  for (auto i : keep) out.pixel_index.push_back(mf.pixel_index[std::size_t(i)]);
  return out;
}

/// (r, theta, phi) of one displacement; the zero vector maps to (0, 0, 0).
template <typename Scalar>
Eigen::Matrix<Scalar, 1, 3> spherical_of(Scalar dx, Scalar dy, Scalar dz) {
  using std::atan2;
  using std::hypot;
  const Scalar planar = hypot(dx, dy);
  const Scalar r = hypot(planar, dz);
  if (r == Scalar(0)) return {Scalar(0), Scalar(0), Scalar(0)};
  Scalar theta = (planar == Scalar(0)) ? Scalar(0) : atan2(dy, dx);
  if (theta <= -Scalar(EIGEN_PI)) theta = Scalar(EIGEN_PI);  // keep (-pi, pi]
  const Scalar phi = atan2(dz, planar);
  return {r, theta, phi};
}

template <typename Scalar>
SphericalMotion<Scalar> to_spherical(const MotionField<Scalar>& mf) {
  SphericalMotion<Scalar> sm;
  sm.positions = mf.positions;
  sm.pixel_index = mf.pixel_index;
  const Eigen::Index n = mf.deltas.rows();
  sm.channels.resize(n, 3);
  sm.amplitude.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sm.channels.row(i) = spherical_of(mf.deltas(i, 0), mf.deltas(i, 1), mf.deltas(i, 2));
    sm.amplitude(i) = sm.channels(i, 0);
  }
  sm.normalized = false;
  return sm;
}

/// Drops points whose raw amplitude exceeds the nearest-rank percentile of
/// the amplitudes. percentile <= 0 or >= 100 leaves the input unchanged.
template <typename Scalar>
SphericalMotion<Scalar> cap_amplitude(const SphericalMotion<Scalar>& sm, double percentile) {
  if (percentile <= 0 || percentile >= 100 || sm.size() == 0) return sm;
  std::vector<Scalar> sorted(sm.amplitude.data(), sm.amplitude.data() + sm.amplitude.size());
  std::sort(sorted.begin(), sorted.end());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * double(sorted.size())));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  const Scalar limit = sorted[rank - 1];
  std::vector<Eigen::Index> keep;
  keep.reserve(sm.size());
  for (Eigen::Index i = 0; i < sm.amplitude.size(); ++i)
    if (sm.amplitude(i) <= limit) keep.push_back(i);
  return detail::take(sm, keep);
}

/// Min-max scales each channel to [0, 1]; a constant channel becomes zeros.
template <typename Scalar>
SphericalMotion<Scalar> normalize_channels(const SphericalMotion<Scalar>& sm,
                                           AngleScaling scaling = AngleScaling::observed) {
  if (sm.normalized) throw DegenerateInputError("normalize_channels: input already normalized");
  if (sm.size() < 2)
    throw DegenerateInputError("normalize_channels: need at least 2 points, got " +
                               std::to_string(sm.size()));
  SphericalMotion<Scalar> out = sm;
  for (int c = 0; c < 3; ++c) {
    auto col = out.channels.col(c);
    if (scaling == AngleScaling::fixed && c > 0) {
      const Scalar lo = c == 1 ? -Scalar(EIGEN_PI) : -Scalar(EIGEN_PI) / 2;
      const Scalar span = c == 1 ? 2 * Scalar(EIGEN_PI) : Scalar(EIGEN_PI);
      col = ((col.array() - lo) / span).cwiseMax(Scalar(0)).cwiseMin(Scalar(1)).matrix();
      continue;
    }
    const Scalar lo = col.minCoeff();
    const Scalar hi = col.maxCoeff();
    if (hi > lo)
      col = ((col.array() - lo) / (hi - lo)).matrix();
    else
      col.setZero();
  }
  out.normalized = true;
  return out;
}

/// Selection scores under `rule` (one per point).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> selection_scores(const SphericalMotion<Scalar>& sm,
                                                          ScoreRule rule) {
  if (rule == ScoreRule::displacement_norm) return sm.amplitude;
  return sm.channels.rowwise().norm();
}

/// Indices of the k highest scores, highest first; equal scores keep
/// ascending index order.
template <typename Scalar>
std::vector<Eigen::Index> top_k_indices(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& scores,
                                        std::size_t k) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  const std::size_t take = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(take), order.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      if (scores(a) != scores(b)) return scores(a) > scores(b);
                      return a < b;
                    });
  order.resize(take);
  return order;
}

template <typename Scalar>
MotionFeatureSet<Scalar> rank_and_select(const SphericalMotion<Scalar>& sm,
                                         const PipelineConfig& cfg) {
  cfg.validate();
  if (sm.size() == 0) throw EmptyInputError("rank_and_select: no points");
  if (!sm.normalized) throw DegenerateInputError("rank_and_select: channels not normalized");
  const auto k = static_cast<std::size_t>(cfg.k);
  const std::size_t n = sm.size();

  std::vector<Eigen::Index> picked;
  if (cfg.selection == Selection::sorted) {
    picked = top_k_indices<Scalar>(selection_scores(sm, cfg.score_rule), k);
  } else {
    std::vector<Eigen::Index> pool(n);
    std::iota(pool.begin(), pool.end(), Eigen::Index(0));
    std::mt19937_64 rng(cfg.rng_seed);
    const std::size_t take = std::min(k, n);
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(take);
    picked = std::move(pool);
  }
  const std::size_t unique = picked.size();
  for (std::size_t i = unique; i < k; ++i) picked.push_back(picked[i % unique]);

  MotionFeatureSet<Scalar> out;
  out.features.resize(Eigen::Index(k), 6);
  out.pixel_index.reserve(k);
  Scalar amplitude_sum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::Index src = picked[i];
    out.features.row(Eigen::Index(i)).template head<3>() = sm.positions.row(src);
    out.features.row(Eigen::Index(i)).template tail<3>() = sm.channels.row(src);
    out.pixel_index.push_back(sm.pixel_index[std::size_t(src)]);
    amplitude_sum += sm.amplitude(src);
  }
  if (cfg.center_positions) {
    auto xyz = out.features.leftCols(3);
    if (cfg.center_frame == CenterFrame::selection) {
      const Eigen::Matrix<Scalar, 1, 3> centroid = xyz.colwise().mean();
      xyz.rowwise() -= centroid;
      const Scalar radius = xyz.rowwise().norm().maxCoeff();
      if (radius > 0) xyz /= radius;
    } else {
      const Eigen::Matrix<Scalar, 1, 3> centroid = sm.positions.colwise().mean();
      const Scalar radius = (sm.positions.rowwise() - centroid).rowwise().norm().maxCoeff();
      xyz.rowwise() -= centroid;
      if (radius > 0) xyz /= radius;
    }
  }
  out.summary.unique_selected = unique;
  out.summary.mean_amplitude = double(amplitude_sum) / double(k);
  return out;
}

/// Full extraction for one onset/apex pair. `intr` is expressed in the
/// coordinates of the uncropped frames; the crop offset is applied here.
template <typename Scalar>
MotionFeatureSet<Scalar> extract_features(const DepthFrame& onset, const DepthFrame& apex,
                                          const CropRect& rect,
                                          const CameraIntrinsics<Scalar>& intr,
                                          const PipelineConfig& cfg) {
  cfg.validate();
  if (onset.width() != apex.width() || onset.height() != apex.height())
    throw AlignmentError("onset and apex frames differ in size");
  const auto [onset_masked, apex_masked] =
      intersect_validity(crop_depth(onset, rect), crop_depth(apex, rect));
  const CameraIntrinsics<Scalar> local = crop_intrinsics(intr, rect);
  const MotionField<Scalar> field =
      compute_displacement(backproject(onset_masked, local), backproject(apex_masked, local));
  const MotionField<Scalar> kept = filter_background(field, Scalar(cfg.filter_factor));
  const SphericalMotion<Scalar> capped =
      cap_amplitude(to_spherical(kept), cfg.amplitude_cap_percentile);
  MotionFeatureSet<Scalar> out =
      rank_and_select(normalize_channels(capped, cfg.angle_scaling), cfg);
  out.summary.valid_points = field.size();
  out.summary.after_filter = kept.size();
  out.summary.after_cap = capped.size();
  return out;
}

}  // namespace depthmer
