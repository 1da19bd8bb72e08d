#include "depthmer/synthetic_faces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "depthmer/seeding.hpp"

namespace depthmer {

namespace {

struct SubjectShape {
  double center_u, center_v;  // dome center, pixels
  double axis_u, axis_v;      // dome semi-axes, pixels
  double height;              // meters
  double ripple;              // meters, low-frequency shape term
  double ripple_fu, ripple_fv, ripple_pu, ripple_pv;
  std::vector<Eigen::Vector2d> region_offsets;  // per class, fractions of the box
};

SubjectShape subject_shape(const SyntheticSpec& spec, int subject) {
  std::mt19937_64 rng(derive_seed(spec.rng_seed, std::uint64_t(subject) + 1));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double j = spec.subject_jitter;
  SubjectShape s;
  s.center_u = (spec.width - 1) / 2.0 + 0.2 * j * unit(rng) * spec.width;
  s.center_v = (spec.height - 1) / 2.0 + 0.2 * j * unit(rng) * spec.height;
  s.axis_u = 0.3 * spec.width * (1 + 0.5 * j * unit(rng));
  s.axis_v = 0.3 * spec.height * (1 + 0.5 * j * unit(rng));
  s.height = spec.dome_height * (1 + j * unit(rng));
  s.ripple = 0.05 * spec.dome_height * (1 + unit(rng)) / 2;
  s.ripple_fu = 1 + 0.5 * (1 + unit(rng));
  s.ripple_fv = 1 + 0.5 * (1 + unit(rng));
  s.ripple_pu = EIGEN_PI * unit(rng);
  s.ripple_pv = EIGEN_PI * unit(rng);
  for (std::size_t c = 0; c < spec.classes.size(); ++c)
    s.region_offsets.emplace_back(0.2 * j * unit(rng), 0.2 * j * unit(rng));
  return s;
}

/// Onset surface depth in meters at (possibly fractional) pixel (u, v).
double surface(const SyntheticSpec& spec, const SubjectShape& s, double u, double v) {
  const double a = (u - s.center_u) / s.axis_u;
  const double b = (v - s.center_v) / s.axis_v;
  const double rho2 = a * a + b * b;
  if (rho2 >= 1.0) return spec.background_depth;
  const double ripple = s.ripple * std::cos(2 * EIGEN_PI * s.ripple_fu * a + s.ripple_pu) *
                        std::cos(2 * EIGEN_PI * s.ripple_fv * b + s.ripple_pv) * (1 - rho2);
  return spec.base_depth - s.height * std::sqrt(1.0 - rho2) + ripple;
}

CropRect face_box(const SyntheticSpec& spec, const SubjectShape& s) {
  const int left = std::max(0, int(std::floor(s.center_u - s.axis_u)));
  const int top = std::max(0, int(std::floor(s.center_v - s.axis_v)));
  const int right = std::min(spec.width, int(std::ceil(s.center_u + s.axis_u)) + 1);
  const int bottom = std::min(spec.height, int(std::ceil(s.center_v + s.axis_v)) + 1);
  return {left, top, right - left, bottom - top};
}

std::uint16_t to_raw(double meters, double scale) {
  const double d = std::round(meters * scale);
  return std::uint16_t(std::clamp(d, 0.0, 65535.0));
}

}  // namespace

SyntheticSpec SyntheticSpec::standard() {
  SyntheticSpec spec;
  spec.classes = {
      {"positive", {0.5, 0.74}, 0.17, 0.005, {0, 0, -1}},
      {"negative", {0.5, 0.27}, 0.17, 0.005, {0, 0, 1}},
      {"surprise", {0.27, 0.5}, 0.17, 0.005, {0, 0, -1}},
  };
  spec.noise_sigma = 0.005 / 10;
  return spec;
}

SyntheticSpec SyntheticSpec::scaled_amplitude(double factor) const {
  SyntheticSpec out = *this;
  for (auto& c : out.classes) c.amplitude *= factor;
  return out;
}

void SyntheticSpec::validate() const {
  if (subjects < 1) throw ConfigError("synthetic spec: subjects must be >= 1");
  if (samples_per_class < 1) throw ConfigError("synthetic spec: samples_per_class must be >= 1");
  if (classes.size() < 2) throw ConfigError("synthetic spec: need at least 2 classes");
  if (width < 16 || height < 16) throw ConfigError("synthetic spec: frame too small");
  if (!(noise_sigma >= 0)) throw ConfigError("synthetic spec: noise_sigma must be >= 0");
  if (!(base_depth > dome_height) || !(dome_height > 0) || !(background_depth > base_depth))
    throw ConfigError("synthetic spec: need background_depth > base_depth > dome_height > 0");
  if (!(depth_scale > 0) || !(focal_length > 0))
    throw ConfigError("synthetic spec: focal_length and depth_scale must be positive");
  if (background_depth * depth_scale > 65535)
    throw ConfigError("synthetic spec: background does not fit 16-bit depth");
  for (const auto& c : classes) {
    if (!(c.amplitude > 0)) throw ConfigError("class '" + c.name + "': amplitude must be > 0");
    if (c.amplitude < 5 * noise_sigma)
      throw ConfigError("class '" + c.name + "': amplitude must be >= 5 x noise_sigma");
    if (!(c.region_radius > 0)) throw ConfigError("class '" + c.name + "': radius must be > 0");
    if (std::abs(c.direction.norm() - 1) > 1e-9)
      throw ConfigError("class '" + c.name + "': direction must be a unit vector");
    // Region must sit inside the face ellipse (box fractions map to [-1, 1]).
    const double a = 2 * c.region_center.x() - 1;
    const double b = 2 * c.region_center.y() - 1;
    const double r = 2 * c.region_radius;
    if (std::hypot(a, b) + r >= 1.0)
      throw ConfigError("class '" + c.name + "': region leaves the face");
  }
}

std::string synthetic_subject_id(const SyntheticSpec& spec, int subject) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub%02d", subject + 1);
  return spec.id_prefix + buf;
}

std::string synthetic_sample_id(const SyntheticSpec& spec, int subject, int class_index,
                                int repetition) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "_c%d_r%d", class_index, repetition);
  return synthetic_subject_id(spec, subject) + buf;
}

SyntheticSample generate_sample(const SyntheticSpec& spec, int subject, int class_index,
                                int repetition) {
  spec.validate();
  if (subject < 0 || subject >= spec.subjects)
    throw BoundsError("synthetic subject index out of range");
  if (class_index < 0 || class_index >= int(spec.classes.size()))
    throw BoundsError("synthetic class index out of range");
  if (repetition < 0) throw BoundsError("synthetic repetition index must be >= 0");

  const SubjectShape shape = subject_shape(spec, subject);
  const SyntheticClass& cls = spec.classes[std::size_t(class_index)];
  const CropRect box = face_box(spec, shape);

  std::mt19937_64 rng(derive_seed(
      derive_seed(spec.rng_seed, std::uint64_t(subject) + 1),
      (std::uint64_t(class_index) << 32) ^ std::uint64_t(repetition) ^ 0x5eedULL));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double amplitude = cls.amplitude * (1 + spec.sample_jitter * unit(rng));
  const Eigen::Vector2d frac =
      cls.region_center + shape.region_offsets[std::size_t(class_index)] +
      Eigen::Vector2d(0.01 * unit(rng), 0.01 * unit(rng));
  // Region center snapped to a pixel so the peak lands on a cell.
  const double region_u = std::round(box.left + frac.x() * box.width);
  const double region_v = std::round(box.top + frac.y() * box.height);
  const double region_r = cls.region_radius * std::min(box.width, box.height);

  SyntheticSample out;
  out.subject_id = synthetic_subject_id(spec, subject);
  out.crop = box;
  out.truth.sample_id = synthetic_sample_id(spec, subject, class_index, repetition);
  out.truth.class_label = class_index;
  out.truth.moved = MaskGrid::Constant(spec.height, spec.width, false);

  DepthGrid onset(spec.height, spec.width);
  DepthGrid apex(spec.height, spec.width);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  for (int v = 0; v < spec.height; ++v) {
    for (int u = 0; u < spec.width; ++u) {
      const double z = surface(spec, shape, u, v);
      double z_apex = z;
      const double d = std::hypot(u - region_u, v - region_v);
      if (d < region_r) {
        const double bump = 0.5 * (1 + std::cos(EIGEN_PI * d / region_r));
        const Eigen::Vector3d disp = amplitude * bump * cls.direction;
        // The surface point seen at (u, v) after the move came from the
        // laterally shifted pixel before it.
        const double su = disp.x() * spec.focal_length / z;
        const double sv = disp.y() * spec.focal_length / z;
        z_apex = (su == 0 && sv == 0 ? z : surface(spec, shape, u - su, v - sv)) + disp.z();
        if (amplitude * bump > spec.noise_sigma) out.truth.moved(v, u) = true;
      }
      if (spec.noise_sigma > 0) z_apex += noise(rng);
      onset(v, u) = to_raw(z, spec.depth_scale);
      apex(v, u) = to_raw(z_apex, spec.depth_scale);
    }
  }
  out.onset = DepthFrame::from_raw(std::move(onset));
  out.apex = DepthFrame::from_raw(std::move(apex));
  return out;
}

Manifest generate_corpus(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  Manifest m;
  m.focal_x = m.focal_y = spec.focal_length;
  m.depth_scale = spec.depth_scale;
  for (const auto& c : spec.classes) m.class_vocabulary.push_back(c.name);
  m.objective_vocabulary = m.class_vocabulary;
  m.base_dir = out_dir;
  for (int s = 0; s < spec.subjects; ++s) {
    for (int c = 0; c < int(spec.classes.size()); ++c) {
      for (int r = 0; r < spec.samples_per_class; ++r) {
        const SyntheticSample sample = generate_sample(spec, s, c, r);
        ManifestEntry e;
        e.sample_id = sample.truth.sample_id;
        e.subject_id = sample.subject_id;
        e.onset = fs::path("depth") / (e.sample_id + "_onset.pgm");
        e.apex = fs::path("depth") / (e.sample_id + "_apex.pgm");
        e.crop = sample.crop;
        e.emotion = spec.classes[std::size_t(c)].name;
        e.objective = e.emotion;
        write_depth(sample.onset, out_dir / e.onset);
        write_depth(sample.apex, out_dir / e.apex);
        m.entries.push_back(std::move(e));
      }
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

MaskGrid dilate(const MaskGrid& mask, int radius) {
  MaskGrid out = mask;
  const Eigen::Index h = mask.rows(), w = mask.cols();
  for (Eigen::Index v = 0; v < h; ++v)
    for (Eigen::Index u = 0; u < w; ++u) {
      if (!mask(v, u)) continue;
      for (int dv = -radius; dv <= radius; ++dv)
        for (int du = -radius; du <= radius; ++du) {
          if (du * du + dv * dv > radius * radius) continue;
          const Eigen::Index vv = v + dv, uu = u + du;
          if (vv >= 0 && vv < h && uu >= 0 && uu < w) out(vv, uu) = true;
        }
    }
  return out;
}

}  // namespace depthmer
