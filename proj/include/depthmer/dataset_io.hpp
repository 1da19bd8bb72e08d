#pragma once

// Everything that reads or writes files. Byte layouts are documented in
// docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthmer/camera_geometry.hpp"
#include "depthmer/motion_features.hpp"
#include "depthmer/point_network.hpp"

namespace depthmer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- depth images

/// Parses either format; a leading "P5" followed by whitespace selects the
/// graymap reader, anything else is read as the raw container.
DepthFrame decode_depth(std::span<const std::uint8_t> bytes);
DepthFrame read_depth(const fs::path& path);

std::vector<std::uint8_t> encode_depth_pgm(const DepthFrame& frame);
std::vector<std::uint8_t> encode_depth_raw(const DepthFrame& frame);
/// ".pgm" writes P5, any other extension the raw container. Invalid cells are
/// written as 0.
void write_depth(const DepthFrame& frame, const fs::path& path);

// ------------------------------------------------------------------------ PLY

struct PlyPoints {
  Eigen::Matrix<float, Eigen::Dynamic, 3> xyz;
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 3> rgb;
};

/// Channel value to color byte: round-half-up of value * 255, clamped.
std::uint8_t channel_to_byte(double value);

std::vector<std::uint8_t> encode_ply(const FeatureSet& feats);
void write_ply(const FeatureSet& feats, const fs::path& path);
/// Reads back files produced by write_ply (binary little-endian, float xyz,
/// uchar rgb vertex layout only).
PlyPoints decode_ply(std::span<const std::uint8_t> bytes);
PlyPoints read_ply(const fs::path& path);

// ------------------------------------------------------------------- manifest

enum class LabelKind { emotion, objective };

struct ManifestEntry {
  std::string sample_id;
  std::string subject_id;
  fs::path onset;  // as written in the manifest; see Manifest::resolve
  fs::path apex;
  CropRect crop;
  std::optional<std::string> emotion;
  std::optional<std::string> objective;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  double focal_x = kDefaultFocalLength;
  double focal_y = kDefaultFocalLength;
  double depth_scale = kDefaultDepthScale;
  /// Sensor-frame principal point; when absent each crop's center is used.
  std::optional<double> principal_x;
  std::optional<double> principal_y;
  std::vector<std::string> class_vocabulary;      // emotion labels
  std::vector<std::string> objective_vocabulary;  // objective-class labels
  fs::path base_dir;                              // relative paths resolve here

  fs::path resolve(const fs::path& p) const;
  /// Sensor-frame intrinsics used for one entry.
  CameraIntrinsicsd intrinsics_for(const ManifestEntry& entry) const;
  const std::vector<std::string>& vocabulary(LabelKind kind) const;
  /// Index of the entry's label in the vocabulary, if it has one.
  std::optional<int> label_index(const ManifestEntry& entry, LabelKind kind) const;

  /// Rejects duplicate ids, unknown labels and bad crops. With
  /// `check_files`, a missing depth file is rejected too.
  void validate(bool check_files) const;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

nlohmann::json manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& doc, const fs::path& base_dir);
Manifest load_manifest(const fs::path& path, bool check_files = true);
void save_manifest(const Manifest& manifest, const fs::path& path);

/// Keeps the entries whose label of `kind` is among `keep`, and restricts the
/// vocabulary to `keep` in its original order.
Manifest filter_classes(const Manifest& manifest, LabelKind kind,
                        const std::vector<std::string>& keep);

// ------------------------------------------------------------- feature cache

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& text);

/// Hash of everything that determines a sample's features.
std::uint64_t feature_config_hash(const PipelineConfig& cfg, const CameraIntrinsicsd& intr,
                                  const ManifestEntry& entry);

std::vector<std::uint8_t> encode_feature_record(const FeatureSet& feats,
                                                std::uint64_t config_hash);
/// Throws IntegrityError on checksum or layout damage.
FeatureSet decode_feature_record(std::span<const std::uint8_t> bytes,
                                 std::uint64_t* config_hash = nullptr);

/// Content-addressed store of feature records, one file per
/// (sample_id, config hash). Writes go through a temporary file and an
/// atomic rename.
class FeatureCache {
 public:
  explicit FeatureCache(fs::path dir);

  const fs::path& dir() const { return dir_; }
  fs::path record_path(const std::string& sample_id, std::uint64_t config_hash) const;
  void store(const FeatureSet& feats, std::uint64_t config_hash) const;
  /// nullopt on a miss. A damaged record is deleted and reported with
  /// IntegrityError.
  std::optional<FeatureSet> load(const std::string& sample_id,
                                 std::uint64_t config_hash) const;

 private:
  fs::path dir_;
};

// --------------------------------------------------------------- checkpoints

nlohmann::json to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> encode_checkpoint(const PointModel& model);
PointModel decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const PointModel& model, const fs::path& path);
PointModel load_checkpoint(const fs::path& path);

// -------------------------------------------------------------------- helpers

std::vector<std::uint8_t> read_file(const fs::path& path);
/// Writes via a sibling temporary file and rename.
void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const fs::path& path, const std::string& text);

}  // namespace depthmer
