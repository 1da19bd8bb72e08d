#include "depthmer/dataset_io.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <unistd.h>

namespace depthmer {

namespace {

constexpr std::uint32_t kFeatureRecordVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr int kManifestVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(std::uint8_t(v & 0xff));
    u8(std::uint8_t(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(std::uint8_t(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void text(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void sized_text(const std::string& s) {
    u32(std::uint32_t(s.size()));
    text(s);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const char* what)
      : bytes_(bytes), what_(what) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (n > remaining())
      throw FormatError(std::string(what_) + ": truncated, need " + std::to_string(n) +
                            " more bytes",
                        pos_);
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = std::uint16_t(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return std::bit_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string sized_text(std::size_t limit) {
    const std::size_t at = pos_;
    const std::uint32_t n = u32();
    if (n > limit) throw FormatError(std::string(what_) + ": string length out of range", at);
    return text(n);
  }
  std::span<const std::uint8_t> consumed() const { return bytes_.first(pos_); }

 private:
  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

bool is_space(std::uint8_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

/// Next decimal header field of a graymap, skipping whitespace and comments.
std::uint32_t pgm_field(std::span<const std::uint8_t> bytes, std::size_t& pos,
                        const char* name) {
  while (pos < bytes.size()) {
    if (is_space(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n' && bytes[pos] != '\r') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  std::uint64_t value = 0;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    value = value * 10 + (bytes[pos] - '0');
    if (value > 0xffffffffULL) throw FormatError(std::string("P5: ") + name + " too large", start);
    ++pos;
  }
  if (pos == start) throw FormatError(std::string("P5: expected ") + name, start);
  return std::uint32_t(value);
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string sanitize(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
      c = '_';
  return out;
}

template <typename Map>
const char* enum_name(const Map& names, int value) {
  for (const auto& [v, n] : names)
    if (v == value) return n;
  throw ConfigError("unknown enum value");
}

template <typename Map>
int enum_value(const Map& names, const std::string& name, const char* field) {
  for (const auto& [v, n] : names)
    if (name == n) return v;
  throw ConfigError(std::string("unknown value '") + name + "' for " + field);
}

const std::pair<int, const char*> kSelectionNames[] = {{int(Selection::sorted), "sorted"},
                                                       {int(Selection::random), "random"}};
const std::pair<int, const char*> kScoreNames[] = {
    {int(ScoreRule::displacement_norm), "displacement_norm"},
    {int(ScoreRule::channel_norm), "channel_norm"}};
const std::pair<int, const char*> kScalingNames[] = {{int(AngleScaling::observed), "observed"},
                                                     {int(AngleScaling::fixed), "fixed"}};
const std::pair<int, const char*> kFrameNames[] = {{int(CenterFrame::face), "face"},
                                                   {int(CenterFrame::selection), "selection"}};
const std::pair<int, const char*> kVariantNames[] = {{int(Variant::pointnet), "pointnet"},
                                                     {int(Variant::pointnet2), "pointnet2"}};

std::atomic<unsigned> temp_counter{0};

}  // namespace

// ---------------------------------------------------------------- files

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw StorageError("read failed for '" + path.string() + "'");
  return bytes;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw StorageError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(temp_counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    out.flush();
    if (!out) throw StorageError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw StorageError("cannot move record into place at '" + path.string() + "'");
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------- depth

DepthFrame decode_depth(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 3 && bytes[0] == 'P' && bytes[1] == '5' && is_space(bytes[2])) {
    std::size_t pos = 2;
    const std::uint32_t width = pgm_field(bytes, pos, "width");
    const std::uint32_t height = pgm_field(bytes, pos, "height");
    const std::size_t maxval_at = pos;
    const std::uint32_t maxval = pgm_field(bytes, pos, "maxval");
    if (width == 0 || height == 0) throw FormatError("P5: zero image dimension", maxval_at);
    if (maxval == 0 || maxval > 65535) throw FormatError("P5: maxval out of range", maxval_at);
    if (maxval < 256)
      throw FormatError("P5: 8-bit graymaps cannot carry depth; 16-bit required", maxval_at);
    if (pos >= bytes.size() || !is_space(bytes[pos]))
      throw FormatError("P5: expected whitespace after maxval", pos);
    ++pos;
    const std::uint64_t cells = std::uint64_t(width) * height;
    if (cells * 2 > bytes.size() - pos)
      throw FormatError("P5: truncated payload, " + std::to_string(cells * 2) + " bytes expected",
                        bytes.size());
    DepthGrid raw(height, width);
    for (std::uint64_t i = 0; i < cells; ++i) {
      const std::uint16_t v = std::uint16_t((bytes[pos] << 8) | bytes[pos + 1]);  // big-endian
      if (v > maxval) throw FormatError("P5: sample exceeds maxval", pos);
      raw.data()[i] = v;
      pos += 2;
    }
    return DepthFrame::from_raw(std::move(raw));
  }

  ByteReader in(bytes, "raw depth");
  const std::uint32_t width = in.u32();
  const std::uint32_t height = in.u32();
  if (width == 0 || height == 0) throw FormatError("raw depth: zero image dimension", 0);
  const std::uint64_t cells = std::uint64_t(width) * height;
  if (cells * 2 != in.remaining())
    throw FormatError("raw depth: payload is " + std::to_string(in.remaining()) +
                          " bytes, header implies " + std::to_string(cells * 2),
                      in.pos());
  DepthGrid raw(height, width);
  for (std::uint64_t i = 0; i < cells; ++i) raw.data()[i] = in.u16();
  return DepthFrame::from_raw(std::move(raw));
}

DepthFrame read_depth(const fs::path& path) {
  try {
    return decode_depth(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

std::vector<std::uint8_t> encode_depth_pgm(const DepthFrame& frame) {
  ByteWriter out;
  out.text("P5\n" + std::to_string(frame.width()) + " " + std::to_string(frame.height()) +
           "\n65535\n");
  for (int v = 0; v < frame.height(); ++v)
    for (int u = 0; u < frame.width(); ++u) {
      const std::uint16_t d = frame.valid(v, u) ? frame.raw(v, u) : 0;
      out.u8(std::uint8_t(d >> 8));
      out.u8(std::uint8_t(d & 0xff));
    }
  return std::move(out.bytes());
}

std::vector<std::uint8_t> encode_depth_raw(const DepthFrame& frame) {
  ByteWriter out;
  out.u32(std::uint32_t(frame.width()));
  out.u32(std::uint32_t(frame.height()));
  for (int v = 0; v < frame.height(); ++v)
    for (int u = 0; u < frame.width(); ++u) out.u16(frame.valid(v, u) ? frame.raw(v, u) : 0);
  return std::move(out.bytes());
}

void write_depth(const DepthFrame& frame, const fs::path& path) {
  const bool pgm = path.extension() == ".pgm";
  write_file_atomic(path, pgm ? encode_depth_pgm(frame) : encode_depth_raw(frame));
}

// ---------------------------------------------------------------- PLY

std::uint8_t channel_to_byte(double value) {
  const double scaled = std::floor(value * 255.0 + 0.5);
  return std::uint8_t(std::clamp(scaled, 0.0, 255.0));
}

namespace {
const char* const kPlyHeaderTail =
    "property float x\n"
    "property float y\n"
    "property float z\n"
    "property uchar red\n"
    "property uchar green\n"
    "property uchar blue\n"
    "end_header\n";
}

std::vector<std::uint8_t> encode_ply(const FeatureSet& feats) {
  ByteWriter out;
  out.text("ply\nformat binary_little_endian 1.0\nelement vertex " +
           std::to_string(feats.features.rows()) + "\n" + kPlyHeaderTail);
  for (Eigen::Index i = 0; i < feats.features.rows(); ++i) {
    for (int c = 0; c < 3; ++c) out.f32(float(feats.features(i, c)));
    for (int c = 3; c < 6; ++c) out.u8(channel_to_byte(feats.features(i, c)));
  }
  return std::move(out.bytes());
}

void write_ply(const FeatureSet& feats, const fs::path& path) {
  write_file_atomic(path, encode_ply(feats));
}

PlyPoints decode_ply(std::span<const std::uint8_t> bytes) {
  const std::string prefix = "ply\nformat binary_little_endian 1.0\nelement vertex ";
  ByteReader in(bytes, "ply");
  if (in.text(std::min(prefix.size(), bytes.size())) != prefix)
    throw FormatError("ply: unsupported header", 0);
  std::size_t pos = prefix.size();
  std::uint64_t count = 0;
  const std::size_t digits_at = pos;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    count = count * 10 + (bytes[pos] - '0');
    if (count > (1ULL << 32)) throw FormatError("ply: vertex count too large", digits_at);
    ++pos;
  }
  if (pos == digits_at || pos >= bytes.size() || bytes[pos] != '\n')
    throw FormatError("ply: malformed vertex count", pos);
  ++pos;
  const std::string tail = kPlyHeaderTail;
  if (bytes.size() - pos < tail.size() ||
      !std::equal(tail.begin(), tail.end(), bytes.begin() + std::ptrdiff_t(pos)))
    throw FormatError("ply: unsupported vertex layout", pos);
  pos += tail.size();
  if ((bytes.size() - pos) != count * 15)
    throw FormatError("ply: vertex payload size mismatch", pos);

  ByteReader body(bytes.subspan(pos), "ply");
  PlyPoints out;
  out.xyz.resize(Eigen::Index(count), 3);
  out.rgb.resize(Eigen::Index(count), 3);
  for (Eigen::Index i = 0; i < Eigen::Index(count); ++i) {
    for (int c = 0; c < 3; ++c) out.xyz(i, c) = body.f32();
    for (int c = 0; c < 3; ++c) out.rgb(i, c) = body.u8();
  }
  return out;
}

PlyPoints read_ply(const fs::path& path) { return decode_ply(read_file(path)); }

// ---------------------------------------------------------------- manifest

fs::path Manifest::resolve(const fs::path& p) const {
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

CameraIntrinsicsd Manifest::intrinsics_for(const ManifestEntry& entry) const {
  CameraIntrinsicsd intr;
  intr.focal_x = focal_x;
  intr.focal_y = focal_y;
  intr.depth_scale = depth_scale;
  intr.principal_x = principal_x ? *principal_x
                                 : entry.crop.left + (entry.crop.width - 1) / 2.0;
  intr.principal_y = principal_y ? *principal_y
                                 : entry.crop.top + (entry.crop.height - 1) / 2.0;
  return intr;
}

const std::vector<std::string>& Manifest::vocabulary(LabelKind kind) const {
  return kind == LabelKind::emotion ? class_vocabulary : objective_vocabulary;
}

std::optional<int> Manifest::label_index(const ManifestEntry& entry, LabelKind kind) const {
  const auto& label = kind == LabelKind::emotion ? entry.emotion : entry.objective;
  if (!label) return std::nullopt;
  const auto& vocab = vocabulary(kind);
  const auto it = std::find(vocab.begin(), vocab.end(), *label);
  if (it == vocab.end())
    throw ValidationError("sample '" + entry.sample_id + "': label '" + *label +
                          "' is not in the vocabulary");
  return int(it - vocab.begin());
}

void Manifest::validate(bool check_files) const {
  if (!(focal_x > 0) || !(focal_y > 0) || !(depth_scale > 0))
    throw ValidationError("manifest intrinsics: focal lengths and depth_scale must be positive");
  if (principal_x.has_value() != principal_y.has_value())
    throw ValidationError("manifest intrinsics: principal_x and principal_y go together");
  for (const auto* vocab : {&class_vocabulary, &objective_vocabulary}) {
    std::set<std::string> names(vocab->begin(), vocab->end());
    if (names.size() != vocab->size()) throw ValidationError("vocabulary has duplicate names");
  }
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (e.sample_id.empty()) throw ValidationError("entry with empty sample_id");
    if (!ids.insert(e.sample_id).second)
      throw ValidationError("duplicate sample_id '" + e.sample_id + "'");
    if (e.subject_id.empty())
      throw ValidationError("sample '" + e.sample_id + "' has no subject_id");
    if (e.crop.width < 1 || e.crop.height < 1 || e.crop.left < 0 || e.crop.top < 0)
      throw ValidationError("sample '" + e.sample_id + "' has an invalid crop rect");
    label_index(e, LabelKind::emotion);
    label_index(e, LabelKind::objective);
    if (check_files) {
      for (const auto* p : {&e.onset, &e.apex})
        if (!fs::exists(resolve(*p)))
          throw ValidationError("sample '" + e.sample_id + "': missing depth file '" +
                                resolve(*p).string() + "'");
    }
  }
}

nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json intr = {{"focal_x", m.focal_x}, {"focal_y", m.focal_y},
                         {"depth_scale", m.depth_scale}};
  if (m.principal_x) intr["principal_x"] = *m.principal_x;
  if (m.principal_y) intr["principal_y"] = *m.principal_y;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json s = {
        {"sample_id", e.sample_id},
        {"subject_id", e.subject_id},
        {"onset", e.onset.generic_string()},
        {"apex", e.apex.generic_string()},
        {"crop",
         {{"left", e.crop.left}, {"top", e.crop.top}, {"width", e.crop.width},
          {"height", e.crop.height}}}};
    if (e.emotion) s["emotion"] = *e.emotion;
    if (e.objective) s["objective"] = *e.objective;
    samples.push_back(std::move(s));
  }
  return {{"format", "depthmer-manifest"},
          {"version", kManifestVersion},
          {"intrinsics", intr},
          {"class_vocabulary", m.class_vocabulary},
          {"objective_vocabulary", m.objective_vocabulary},
          {"samples", samples}};
}

Manifest manifest_from_json(const nlohmann::json& doc, const fs::path& base_dir) {
  Manifest m;
  m.base_dir = base_dir;
  std::string where = "manifest";
  try {
    if (doc.value("format", std::string()) != "depthmer-manifest")
      throw ValidationError("not a depthmer manifest (missing \"format\": \"depthmer-manifest\")");
    if (doc.at("version").get<int>() != kManifestVersion)
      throw ValidationError("unsupported manifest version");
    const auto& intr = doc.at("intrinsics");
    m.focal_x = intr.at("focal_x").get<double>();
    m.focal_y = intr.value("focal_y", m.focal_x);
    m.depth_scale = intr.value("depth_scale", kDefaultDepthScale);
    if (intr.contains("principal_x")) m.principal_x = intr.at("principal_x").get<double>();
    if (intr.contains("principal_y")) m.principal_y = intr.at("principal_y").get<double>();
    m.class_vocabulary = doc.at("class_vocabulary").get<std::vector<std::string>>();
    m.objective_vocabulary =
        doc.value("objective_vocabulary", std::vector<std::string>{});
    for (const auto& s : doc.at("samples")) {
      ManifestEntry e;
      e.sample_id = s.at("sample_id").get<std::string>();
      where = "sample '" + e.sample_id + "'";
      e.subject_id = s.at("subject_id").get<std::string>();
      e.onset = fs::path(s.at("onset").get<std::string>());
      e.apex = fs::path(s.at("apex").get<std::string>());
      const auto& c = s.at("crop");
      e.crop = {c.at("left").get<int>(), c.at("top").get<int>(), c.at("width").get<int>(),
                c.at("height").get<int>()};
      if (s.contains("emotion")) e.emotion = s.at("emotion").get<std::string>();
      if (s.contains("objective")) e.objective = s.at("objective").get<std::string>();
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + ": " + e.what());
  }
  return m;
}

Manifest load_manifest(const fs::path& path, bool check_files) {
  const auto bytes = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }
  fs::path base = path.parent_path();
  if (base.empty()) base = ".";
  Manifest m = manifest_from_json(doc, base);
  m.validate(check_files);
  return m;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  manifest.validate(false);
  write_text_atomic(path, manifest_to_json(manifest).dump(2) + "\n");
}

Manifest filter_classes(const Manifest& manifest, LabelKind kind,
                        const std::vector<std::string>& keep) {
  Manifest out = manifest;
  const auto& vocab = manifest.vocabulary(kind);
  std::vector<std::string> kept_vocab;
  for (const auto& name : vocab)
    if (std::find(keep.begin(), keep.end(), name) != keep.end()) kept_vocab.push_back(name);
  for (const auto& name : keep)
    if (std::find(vocab.begin(), vocab.end(), name) == vocab.end())
      throw ConfigError("class '" + name + "' is not in the manifest vocabulary");
  (kind == LabelKind::emotion ? out.class_vocabulary : out.objective_vocabulary) = kept_vocab;
  out.entries.clear();
  for (const auto& e : manifest.entries) {
    const auto& label = kind == LabelKind::emotion ? e.emotion : e.objective;
    if (label && std::find(kept_vocab.begin(), kept_vocab.end(), *label) != kept_vocab.end())
      out.entries.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------- feature cache

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& text) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint64_t feature_config_hash(const PipelineConfig& cfg, const CameraIntrinsicsd& intr,
                                  const ManifestEntry& entry) {
  std::ostringstream os;
  os << "depthmer-features/" << kFeatureRecordVersion << ";" << cfg.canonical()
     << ";fx=" << number(intr.focal_x) << ";fy=" << number(intr.focal_y)
     << ";cx=" << number(intr.principal_x) << ";cy=" << number(intr.principal_y)
     << ";scale=" << number(intr.depth_scale) << ";sample=" << entry.sample_id
     << ";onset=" << entry.onset.generic_string() << ";apex=" << entry.apex.generic_string()
     << ";crop=" << entry.crop.left << "," << entry.crop.top << "," << entry.crop.width << ","
     << entry.crop.height;
  return fnv1a64(os.str());
}

// Four u64 counters and the f64 mean amplitude.
constexpr std::uint64_t kSummaryBytes = 5 * 8;

std::vector<std::uint8_t> encode_feature_record(const FeatureSet& feats,
                                                std::uint64_t config_hash) {
  ByteWriter out;
  out.text("DMFC");
  out.u32(kFeatureRecordVersion);
  out.u64(config_hash);
  out.u32(std::uint32_t(feats.features.rows()));
  out.i32(feats.label ? *feats.label : -1);
  out.sized_text(feats.sample_id);
  out.sized_text(feats.subject_id);
  for (Eigen::Index i = 0; i < feats.features.rows(); ++i)
    for (int c = 0; c < 6; ++c) out.f32(float(feats.features(i, c)));
  const ExtractionSummary& s = feats.summary;
  for (std::size_t n : {s.valid_points, s.after_filter, s.after_cap, s.unique_selected})
    out.u64(n);
  out.f64(s.mean_amplitude);
  out.u64(fnv1a64(out.bytes()));
  return std::move(out.bytes());
}

FeatureSet decode_feature_record(std::span<const std::uint8_t> bytes,
                                 std::uint64_t* config_hash) {
  try {
    ByteReader in(bytes, "feature record");
    if (in.text(4) != "DMFC") throw FormatError("feature record: bad magic", 0);
    if (in.u32() != kFeatureRecordVersion)
      throw FormatError("feature record: unsupported version", 4);
    const std::uint64_t hash = in.u64();
    const std::uint32_t k = in.u32();
    const std::int32_t label = in.i32();
    FeatureSet f;
    f.sample_id = in.sized_text(4096);
    f.subject_id = in.sized_text(4096);
    if (std::uint64_t(k) * 24 + kSummaryBytes + 8 != in.remaining())
      throw FormatError("feature record: row payload size mismatch", in.pos());
    f.features.resize(k, 6);
    for (std::uint32_t i = 0; i < k; ++i)
      for (int c = 0; c < 6; ++c) f.features(i, c) = double(in.f32());
    f.summary.valid_points = in.u64();
    f.summary.after_filter = in.u64();
    f.summary.after_cap = in.u64();
    f.summary.unique_selected = in.u64();
    f.summary.mean_amplitude = in.f64();
    const std::uint64_t expected = fnv1a64(in.consumed());
    if (in.u64() != expected) throw FormatError("feature record: checksum mismatch", in.pos());
    if (label >= 0) f.label = label;
    if (config_hash) *config_hash = hash;
    return f;
  } catch (const FormatError& e) {
    throw IntegrityError(e.what());
  }
}

FeatureCache::FeatureCache(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw StorageError("cannot create cache dir '" + dir_.string() + "': " + ec.message());
}

fs::path FeatureCache::record_path(const std::string& sample_id,
                                   std::uint64_t config_hash) const {
  return dir_ / (sanitize(sample_id) + "-" + hex16(config_hash) + ".dmf");
}

void FeatureCache::store(const FeatureSet& feats, std::uint64_t config_hash) const {
  write_file_atomic(record_path(feats.sample_id, config_hash),
                    encode_feature_record(feats, config_hash));
}

std::optional<FeatureSet> FeatureCache::load(const std::string& sample_id,
                                             std::uint64_t config_hash) const {
  const fs::path path = record_path(sample_id, config_hash);
  if (!fs::exists(path)) return std::nullopt;
  std::uint64_t stored = 0;
  FeatureSet f;
  try {
    f = decode_feature_record(read_file(path), &stored);
  } catch (const IntegrityError& e) {
    std::error_code ec;
    fs::remove(path, ec);
    throw IntegrityError(path.string() + ": " + e.what() + " (record removed)");
  }
  if (stored != config_hash || f.sample_id != sample_id) return std::nullopt;
  return f;
}

// ---------------------------------------------------------------- configs

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"k", c.k},
          {"selection", enum_name(kSelectionNames, int(c.selection))},
          {"filter_factor", c.filter_factor},
          {"center_positions", c.center_positions},
          {"rng_seed", c.rng_seed},
          {"amplitude_cap_percentile", c.amplitude_cap_percentile},
          {"score_rule", enum_name(kScoreNames, int(c.score_rule))},
          {"angle_scaling", enum_name(kScalingNames, int(c.angle_scaling))},
          {"center_frame", enum_name(kFrameNames, int(c.center_frame))}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    c.k = j.value("k", c.k);
    c.selection = Selection(
        enum_value(kSelectionNames, j.value("selection", std::string("sorted")), "selection"));
    c.filter_factor = j.value("filter_factor", c.filter_factor);
    c.center_positions = j.value("center_positions", c.center_positions);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.amplitude_cap_percentile = j.value("amplitude_cap_percentile", c.amplitude_cap_percentile);
    c.score_rule = ScoreRule(enum_value(
        kScoreNames, j.value("score_rule", std::string("displacement_norm")), "score_rule"));
    c.angle_scaling = AngleScaling(enum_value(
        kScalingNames, j.value("angle_scaling", std::string("observed")), "angle_scaling"));
    c.center_frame = CenterFrame(
        enum_value(kFrameNames, j.value("center_frame", std::string("face")), "center_frame"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : c.sa_levels)
    levels.push_back({{"centroids", l.centroids},
                      {"radius", l.radius},
                      {"group_size", l.group_size},
                      {"widths", l.widths}});
  return {{"variant", enum_name(kVariantNames, int(c.variant))},
          {"sa_levels", levels},
          {"global_widths", c.global_widths},
          {"head_widths", c.head_widths},
          {"class_count", c.class_count},
          {"input_points", c.input_points},
          {"rng_seed", c.rng_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.variant = Variant(enum_value(kVariantNames, j.at("variant").get<std::string>(), "variant"));
    c.sa_levels.clear();
    for (const auto& l : j.at("sa_levels"))
      c.sa_levels.push_back({l.at("centroids").get<int>(), l.at("radius").get<double>(),
                             l.at("group_size").get<int>(),
                             l.at("widths").get<std::vector<int>>()});
    c.global_widths = j.at("global_widths").get<std::vector<int>>();
    c.head_widths = j.at("head_widths").get<std::vector<int>>();
    c.class_count = j.at("class_count").get<int>();
    c.input_points = j.value("input_points", 0);
    c.rng_seed = j.value("rng_seed", std::uint64_t(0));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},       {"epochs", c.epochs},
          {"rng_seed", c.rng_seed},           {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"epsilon", c.epsilon}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- checkpoints

std::vector<std::uint8_t> encode_checkpoint(const PointModel& model) {
  ByteWriter out;
  out.text("DMCK");
  out.u32(kCheckpointVersion);
  out.sized_text(to_json(model.config).dump());
  out.u32(std::uint32_t(model.layers.size()));
  for (const auto& l : model.layers) {
    out.u32(std::uint32_t(l.weight.rows()));
    out.u32(std::uint32_t(l.weight.cols()));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) out.f64(l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) out.f64(l.bias(i));
  }
  out.u64(fnv1a64(out.bytes()));
  return std::move(out.bytes());
}

PointModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, "checkpoint");
  if (in.text(4) != "DMCK") throw FormatError("checkpoint: bad magic", 0);
  if (in.u32() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version", 4);
  const std::size_t config_at = in.pos();
  const std::string config_text = in.sized_text(1 << 20);
  PointModel model;
  try {
    model.config = model_config_from_json(nlohmann::json::parse(config_text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config echo: ") + e.what(), config_at);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad config echo: ") + e.what(), config_at);
  }
  const auto shapes = layer_shapes(model.config);
  const std::size_t count_at = in.pos();
  if (in.u32() != shapes.size()) throw FormatError("checkpoint: layer count mismatch", count_at);
  for (auto [out_dim, in_dim] : shapes) {
    const std::size_t at = in.pos();
    if (in.u32() != std::uint32_t(out_dim) || in.u32() != std::uint32_t(in_dim))
      throw FormatError("checkpoint: layer shape mismatch", at);
    in.need(std::size_t(out_dim) * std::size_t(in_dim + 1) * 8);
    DenseLayer l{Eigen::MatrixXd(out_dim, in_dim), Eigen::VectorXd(out_dim)};
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = in.f64();
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = in.f64();
    model.layers.push_back(std::move(l));
  }
  const std::uint64_t expected = fnv1a64(in.consumed());
  const std::size_t sum_at = in.pos();
  if (in.u64() != expected) throw FormatError("checkpoint: checksum mismatch", sum_at);
  if (in.remaining() != 0) throw FormatError("checkpoint: trailing bytes", in.pos());
  return model;
}

void save_checkpoint(const PointModel& model, const fs::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

PointModel load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace depthmer
