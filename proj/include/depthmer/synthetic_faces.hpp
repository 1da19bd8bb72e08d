#pragma once

// Seeded onset/apex depth pairs with known moved regions, used as a test
// oracle and as a stand-in corpus for the evaluation protocols.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthmer/camera_geometry.hpp"
#include "depthmer/dataset_io.hpp"

namespace depthmer {

struct SyntheticClass {
  std::string name;
  Eigen::Vector2d region_center;  // (u, v) as fractions of the face box
  double region_radius = 0.17;    // fraction of the face box's shorter side
  double amplitude = 0.005;       // meters, peak displacement
  Eigen::Vector3d direction{0, 0, -1};
};

struct SyntheticSpec {
  int subjects = 8;
  int samples_per_class = 2;
  std::vector<SyntheticClass> classes;
  double noise_sigma = 0.0005;     // meters, added to the apex frame
  int width = 640;
  int height = 480;
  double base_depth = 0.5;         // face rim distance, meters
  double dome_height = 0.06;       // nose-tip protrusion toward the camera
  double background_depth = 1.2;
  double focal_length = kDefaultFocalLength;
  // 0.1 mm raw units. At 1 mm the rounding step is twice the default noise
  // sigma, and quantized noise ties with the real motion in the ranking.
  double depth_scale = 10000;
  double subject_jitter = 0.1;     // relative shape variation across subjects
  double sample_jitter = 0.1;      // relative amplitude variation across samples
  std::uint64_t rng_seed = 1;
  std::string id_prefix;

  /// Three classes: mouth pulled in, brow raised toward the camera, left
  /// cheek pushed out, all 5 mm with sigma = amplitude / 10.
  static SyntheticSpec standard();
  /// Copy with every class amplitude multiplied by `factor` and the noise
  /// left unchanged.
  SyntheticSpec scaled_amplitude(double factor) const;

  void validate() const;
};

struct GroundTruth {
  std::string sample_id;
  int class_label = 0;
  MaskGrid moved;  // cells whose injected displacement exceeds noise_sigma
};

struct SyntheticSample {
  DepthFrame onset;
  DepthFrame apex;
  GroundTruth truth;
  std::string subject_id;
  CropRect crop;  // the subject's face bounding box
};

std::string synthetic_sample_id(const SyntheticSpec& spec, int subject, int class_index,
                                int repetition);
std::string synthetic_subject_id(const SyntheticSpec& spec, int subject);

SyntheticSample generate_sample(const SyntheticSpec& spec, int subject, int class_index,
                                int repetition = 0);

/// Writes subjects x classes x samples_per_class pairs as 16-bit P5 files
/// under `out_dir/depth/` and saves `out_dir/manifest.json`.
Manifest generate_corpus(const SyntheticSpec& spec, const fs::path& out_dir);

/// Grows a mask by a disk of `radius` pixels.
MaskGrid dilate(const MaskGrid& mask, int radius);

}  // namespace depthmer
