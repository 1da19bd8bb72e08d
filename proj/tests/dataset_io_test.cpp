#include <doctest.h>

#include <fstream>
#include <random>

#include "depthmer/dataset_io.hpp"
#include "helpers.hpp"

using namespace depthmer;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

FeatureSet sample_features(int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1), c(0, 1);
  FeatureSet f;
  f.sample_id = "sub01/ep 3";
  f.subject_id = "sub01";
  f.label = 2;
  f.summary = {5000, 4000, 3980, std::size_t(k), 0.0041};
  f.features.resize(k, 6);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < 3; ++j) f.features(i, j) = double(float(u(rng)));
    for (int j = 3; j < 6; ++j) f.features(i, j) = double(float(c(rng)));
  }
  return f;
}

Manifest small_manifest(const fs::path& dir) {
  Manifest m;
  m.base_dir = dir;
  m.class_vocabulary = {"positive", "negative", "surprise"};
  m.objective_vocabulary = {"AU1", "AU12"};
  for (int i = 0; i < 3; ++i) {
    ManifestEntry e;
    e.sample_id = "s" + std::to_string(i);
    e.subject_id = i < 2 ? "A" : "B";
    e.onset = "depth/s" + std::to_string(i) + "_on.pgm";
    e.apex = "depth/s" + std::to_string(i) + "_ap.pgm";
    e.crop = {1, 1, 4, 3};
    e.emotion = m.class_vocabulary[std::size_t(i)];
    if (i == 1) e.objective = "AU12";
    m.entries.push_back(e);
  }
  return m;
}

/// Every mutated or truncated stream must end in a library error, never a
/// crash or a foreign exception type.
template <typename Decoder>
void fuzz(const std::vector<std::uint8_t>& good, Decoder decode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  int rejected = 0;
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<std::uint8_t> b = good;
    switch (trial % 4) {
      case 0:
        b.resize(rng() % (good.size() + 1));
        break;
      case 1:
        for (int i = 0; i < 1 + int(rng() % 4); ++i) b[rng() % b.size()] ^= std::uint8_t(1 + rng() % 255);
        break;
      case 2:
        b.insert(b.begin() + std::ptrdiff_t(rng() % b.size()), std::uint8_t(rng()));
        break;
      default:
        b.assign(rng() % 64, 0);
        for (auto& x : b) x = std::uint8_t(rng());
    }
    try {
      decode(b);
    } catch (const Error&) {
      ++rejected;
    }
  }
  CHECK(rejected > 0);
}

}  // namespace

TEST_CASE("P5 depth images") {
  SUBCASE("hand-built 2x2 file") {
    std::vector<std::uint8_t> b = bytes_of("P5\n# depth\n2 2\n65535\n");
    for (std::uint16_t v : {0, 1000, 2000, 3000}) {
      b.push_back(std::uint8_t(v >> 8));
      b.push_back(std::uint8_t(v & 0xff));
    }
    const DepthFrame f = decode_depth(b);
    CHECK(f.width() == 2);
    CHECK(f.raw(0, 1) == 1000);
    CHECK(f.raw(1, 1) == 3000);
    CHECK(f.valid_count() == 3);
    CHECK_FALSE(f.valid(0, 0));
  }
  SUBCASE("8-bit graymaps are rejected") {
    std::vector<std::uint8_t> b = bytes_of("P5 2 1 255\n");
    b.push_back(1);
    b.push_back(2);
    CHECK_THROWS_AS(decode_depth(b), FormatError);
  }
  SUBCASE("truncation reports an offset") {
    std::vector<std::uint8_t> b = bytes_of("P5\n4 4\n65535\n");
    b.resize(b.size() + 10);
    try {
      decode_depth(b);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == b.size());
    }
  }
}

TEST_CASE("depth write/read round trips") {
  std::mt19937_64 rng(1);
  const auto dir = testing::scratch_dir("depth");
  for (int trial = 0; trial < 6; ++trial) {
    const DepthFrame f = testing::random_frame(rng, 3 + trial, 5, 1, 65535, 0.2);
    write_depth(f, dir / "a.pgm");
    write_depth(f, dir / "a.dep");
    CHECK(read_depth(dir / "a.pgm") == f);
    CHECK(read_depth(dir / "a.dep") == f);
    CHECK(decode_depth(encode_depth_raw(f)) == f);
  }
  // Raw container layout: LE width, LE height, LE samples.
  DepthGrid raw(1, 2);
  raw << 0x0102, 0x0304;
  const auto b = encode_depth_raw(DepthFrame::from_raw(raw));
  CHECK(b == std::vector<std::uint8_t>{2, 0, 0, 0, 1, 0, 0, 0, 0x02, 0x01, 0x04, 0x03});
  CHECK_THROWS_AS(read_depth(dir / "missing.pgm"), StorageError);
}

TEST_CASE("PLY export") {
  CHECK(channel_to_byte(1.0) == 255);
  CHECK(channel_to_byte(0.0) == 0);
  CHECK(channel_to_byte(0.5) == 128);  // 127.5 rounds half up
  CHECK(channel_to_byte(1.7) == 255);
  CHECK(channel_to_byte(-0.2) == 0);

  FeatureSet f = sample_features(2048, 3);
  f.features.row(0).tail<3>() << 1, 0, 0;
  const auto bytes = encode_ply(f);
  const std::string header(bytes.begin(), bytes.begin() + 200);
  CHECK(header.rfind("ply\nformat binary_little_endian 1.0\nelement vertex 2048\n", 0) == 0);
  CHECK(header.find("end_header\n") != std::string::npos);

  const PlyPoints p = decode_ply(bytes);
  REQUIRE(p.xyz.rows() == 2048);
  CHECK(p.rgb(0, 0) == 255);
  CHECK(p.rgb(0, 1) == 0);
  for (Eigen::Index i = 0; i < 2048; ++i)
    for (int c = 0; c < 3; ++c) {
      CHECK(p.xyz(i, c) == float(f.features(i, c)));
      CHECK(p.rgb(i, c) == channel_to_byte(f.features(i, 3 + c)));
    }
  fuzz(bytes, [](const auto& b) { decode_ply(b); }, 5);
}

TEST_CASE("manifest") {
  const auto dir = testing::scratch_dir("manifest");
  const Manifest m = small_manifest(dir);

  SUBCASE("save and load without files") {
    save_manifest(m, dir / "manifest.json");
    const Manifest back = load_manifest(dir / "manifest.json", false);
    CHECK(back == m);
    CHECK_THROWS_AS(load_manifest(dir / "manifest.json", true), ValidationError);
  }

  SUBCASE("relative paths resolve against the manifest directory") {
    CHECK(m.resolve("depth/x.pgm") == dir / "depth/x.pgm");
    CHECK(m.resolve("/abs/x.pgm") == fs::path("/abs/x.pgm"));
  }

  SUBCASE("default principal point is the crop center in sensor pixels") {
    const CameraIntrinsicsd intr = m.intrinsics_for(m.entries[0]);
    CHECK(intr.principal_x == 2.5);
    CHECK(intr.principal_y == 2.0);
    Manifest fixed = m;
    fixed.principal_x = 300;
    fixed.principal_y = 200;
    CHECK(fixed.intrinsics_for(m.entries[0]).principal_x == 300);
  }

  SUBCASE("validation names the offending entry") {
    Manifest dup = m;
    dup.entries[2].sample_id = "s0";
    try {
      dup.validate(false);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("'s0'") != std::string::npos);
    }
    Manifest unknown = m;
    unknown.entries[1].emotion = "disgust";
    CHECK_THROWS_AS(unknown.validate(false), ValidationError);
  }

  SUBCASE("malformed documents") {
    write_text_atomic(dir / "bad.json", "{\"format\": \"depthmer-manifest\", ");
    CHECK_THROWS_AS(load_manifest(dir / "bad.json"), FormatError);
    write_text_atomic(dir / "wrong.json", "{\"format\": \"other\"}");
    CHECK_THROWS_AS(load_manifest(dir / "wrong.json"), ValidationError);
    write_text_atomic(dir / "types.json",
                      "{\"format\": \"depthmer-manifest\", \"version\": 1, \"intrinsics\": "
                      "{\"focal_x\": \"wide\"}, \"class_vocabulary\": [], \"samples\": []}");
    CHECK_THROWS_AS(load_manifest(dir / "types.json"), ValidationError);
  }

  SUBCASE("class filtering") {
    const Manifest two = filter_classes(m, LabelKind::emotion, {"surprise", "positive"});
    CHECK(two.class_vocabulary == std::vector<std::string>{"positive", "surprise"});
    CHECK(two.entries.size() == 2);
    CHECK_THROWS_AS(filter_classes(m, LabelKind::emotion, {"fear"}), ConfigError);
    const Manifest obj = filter_classes(m, LabelKind::objective, {"AU12"});
    CHECK(obj.entries.size() == 1);
  }

  SUBCASE("label lookup") {
    CHECK(m.label_index(m.entries[2], LabelKind::emotion) == 2);
    CHECK_FALSE(m.label_index(m.entries[0], LabelKind::objective).has_value());
    CHECK(m.label_index(m.entries[1], LabelKind::objective) == 1);
  }
}

TEST_CASE("feature records and the cache") {
  const FeatureSet f = sample_features(64, 9);
  const auto bytes = encode_feature_record(f, 0xabcdef);
  std::uint64_t hash = 0;
  const FeatureSet back = decode_feature_record(bytes, &hash);
  CHECK(hash == 0xabcdef);
  CHECK(back.features == f.features);  // inputs are float-representable
  CHECK(back.label == f.label);
  CHECK(back.sample_id == f.sample_id);
  CHECK(back.subject_id == f.subject_id);
  CHECK(back.summary.after_cap == 3980);
  CHECK(back.summary.mean_amplitude == 0.0041);
  fuzz(bytes, [](const auto& b) { decode_feature_record(b); }, 6);

  const auto dir = testing::scratch_dir("cache");
  const FeatureCache cache(dir);
  PipelineConfig cfg;
  const CameraIntrinsicsd intr;
  ManifestEntry e;
  e.sample_id = f.sample_id;
  const std::uint64_t h = feature_config_hash(cfg, intr, e);

  CHECK_FALSE(cache.load(f.sample_id, h).has_value());
  cache.store(f, h);
  const auto hit = cache.load(f.sample_id, h);
  REQUIRE(hit.has_value());
  CHECK(hit->features == f.features);

  PipelineConfig other = cfg;
  other.k = 1024;
  CHECK(feature_config_hash(other, intr, e) != h);
  CHECK_FALSE(cache.load(f.sample_id, feature_config_hash(other, intr, e)).has_value());

  // Damage the record on disk: reported once, then gone.
  const fs::path path = cache.record_path(f.sample_id, h);
  auto damaged = read_file(path);
  damaged[damaged.size() / 2] ^= 0x40;
  write_file_atomic(path, damaged);
  CHECK_THROWS_AS(cache.load(f.sample_id, h), IntegrityError);
  CHECK_FALSE(fs::exists(path));
  CHECK_FALSE(cache.load(f.sample_id, h).has_value());
}

TEST_CASE("config JSON round trips") {
  PipelineConfig p;
  p.k = 777;
  p.selection = Selection::random;
  p.rng_seed = 123456789012345ULL;
  p.score_rule = ScoreRule::channel_norm;
  p.center_frame = CenterFrame::selection;
  CHECK(pipeline_config_from_json(to_json(p)).canonical() == p.canonical());
  CHECK_THROWS_AS(pipeline_config_from_json({{"selection", "shuffled"}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json({{"k", 0}}), ConfigError);

  const ModelConfig m = ModelConfig::pointnet2_lite(4);
  CHECK(model_config_from_json(to_json(m)) == m);
  TrainConfig t;
  t.epochs = 13;
  t.rng_seed = 99;
  const TrainConfig back = train_config_from_json(to_json(t));
  CHECK(back.epochs == 13);
  CHECK(back.rng_seed == 99);
  CHECK(back.learning_rate == t.learning_rate);
}

TEST_CASE("checkpoints") {
  ModelConfig c = ModelConfig::pointnet2_lite(3);
  c.rng_seed = 4;
  const PointModel m = init_model(c);
  const auto bytes = encode_checkpoint(m);
  CHECK(decode_checkpoint(bytes) == m);
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(m, dir / "m.dmck");
  CHECK(load_checkpoint(dir / "m.dmck") == m);
  CHECK(read_file(dir / "m.dmck") == bytes);

  auto tail = bytes;
  tail.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(tail), FormatError);
  fuzz(bytes, [](const auto& b) { decode_checkpoint(b); }, 7);
}

TEST_CASE("depth and manifest readers reject garbage") {
  std::mt19937_64 rng(2);
  const DepthFrame f = testing::random_frame(rng, 6, 4);
  fuzz(encode_depth_pgm(f), [](const auto& b) { decode_depth(b); }, 8);
  fuzz(encode_depth_raw(f), [](const auto& b) { decode_depth(b); }, 9);

  const auto dir = testing::scratch_dir("manifest-fuzz");
  const std::string text = manifest_to_json(small_manifest(dir)).dump();
  fuzz(bytes_of(text),
       [&](const auto& b) {
         write_file_atomic(dir / "m.json", b);
         load_manifest(dir / "m.json", false);
       },
       10);
}
