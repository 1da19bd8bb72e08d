#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "depthmer/camera_geometry.hpp"
#include "depthmer/seeding.hpp"

namespace testing {

namespace fs = std::filesystem;

/// Fresh, empty directory under the system temp dir, unique per name.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("depthmer-test-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Frame with values in [lo, hi] and roughly `holes` of the cells missing.
inline depthmer::DepthFrame random_frame(std::mt19937_64& rng, int w, int h, int lo = 300,
                                         int hi = 4000, double holes = 0.1) {
  std::uniform_int_distribution<int> value(lo, hi);
  std::bernoulli_distribution missing(holes);
  depthmer::DepthGrid raw(h, w);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) raw(v, u) = missing(rng) ? 0 : std::uint16_t(value(rng));
  return depthmer::DepthFrame::from_raw(std::move(raw));
}

}  // namespace testing
