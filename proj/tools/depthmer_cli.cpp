// Command-line front end. Each subcommand writes into its own run directory.
//
// Exit codes: 0 success, 1 some samples failed (the rest were processed),
// 2 configuration or usage error, 3 any other runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "depthmer/dataset_io.hpp"
#include "depthmer/evaluation.hpp"
#include "depthmer/synthetic_faces.hpp"

#ifndef DEPTHMER_VERSION
#define DEPTHMER_VERSION "unknown"
#endif
#ifndef DEPTHMER_GIT_COMMIT
#define DEPTHMER_GIT_COMMIT "unknown"
#endif

using namespace depthmer;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kPartial = 1, kConfig = 2, kRuntime = 3 };

// Flag values as parsed; seeds are applied after parsing so that --seed can
// be overridden per config.
struct Options {
  PipelineConfig pipeline;
  TrainConfig train;
  std::string preset = "pointnet2-lite";
  std::optional<std::uint64_t> seed, model_rng_seed, train_rng_seed, pipeline_rng_seed;
  std::string label = "emotion";
  std::string classes;
  fs::path manifest, train_manifest, test_manifest;
  fs::path out;
  std::optional<fs::path> cache_dir;
  int workers = 1;
  int verbose = 0;
  bool save_checkpoints = false;

  std::vector<std::string> selections{"sorted", "random"};
  std::vector<int> ks{1024, 2048, 4096};

  SyntheticSpec synth = SyntheticSpec::standard();
  double amplitude_factor = 1;

  std::string sample_id;
};

const std::map<std::string, Selection> kSelections{{"sorted", Selection::sorted},
                                                   {"random", Selection::random}};
const std::map<std::string, ScoreRule> kScoreRules{
    {"displacement_norm", ScoreRule::displacement_norm}, {"channel_norm", ScoreRule::channel_norm}};
const std::map<std::string, AngleScaling> kAngleScalings{{"observed", AngleScaling::observed},
                                                         {"fixed", AngleScaling::fixed}};
const std::map<std::string, CenterFrame> kCenterFrames{{"face", CenterFrame::face},
                                                       {"selection", CenterFrame::selection}};

void add_pipeline_flags(CLI::App* app, Options& o) {
  PipelineConfig& p = o.pipeline;
  app->add_option("--k", p.k, "points per sample")->capture_default_str();
  app->add_option("--selection", p.selection, "sorted or random")
      ->transform(CLI::CheckedTransformer(kSelections))
      ->default_str("sorted");
  app->add_option("--filter_factor", p.filter_factor, "background filter threshold factor")
      ->capture_default_str();
  app->add_option("--center_positions", p.center_positions, "recenter and scale xyz")
      ->capture_default_str();
  app->add_option("--amplitude_cap_percentile", p.amplitude_cap_percentile,
                  "amplitude cap percentile; <= 0 or >= 100 disables")
      ->capture_default_str();
  app->add_option("--score_rule", p.score_rule, "displacement_norm or channel_norm")
      ->transform(CLI::CheckedTransformer(kScoreRules))
      ->default_str("displacement_norm");
  app->add_option("--angle_scaling", p.angle_scaling, "observed or fixed")
      ->transform(CLI::CheckedTransformer(kAngleScalings))
      ->default_str("observed");
  app->add_option("--center_frame", p.center_frame, "face or selection")
      ->transform(CLI::CheckedTransformer(kCenterFrames))
      ->default_str("face");
  app->add_option("--rng_seed", o.pipeline_rng_seed, "pipeline seed (random selection)");
}

void add_model_flags(CLI::App* app, Options& o) {
  TrainConfig& t = o.train;
  app->add_option("--preset", o.preset, "pointnet2-lite, pointnet2 or pointnet")
      ->check(CLI::IsMember({"pointnet2-lite", "pointnet2", "pointnet"}))
      ->capture_default_str();
  app->add_option("--model_rng_seed", o.model_rng_seed, "weight initialization seed");
  app->add_option("--learning_rate", t.learning_rate)->capture_default_str();
  app->add_option("--weight_decay", t.weight_decay)->capture_default_str();
  app->add_option("--batch_size", t.batch_size)->capture_default_str();
  app->add_option("--epochs", t.epochs)->capture_default_str();
  app->add_option("--beta1", t.beta1)->capture_default_str();
  app->add_option("--beta2", t.beta2)->capture_default_str();
  app->add_option("--epsilon", t.epsilon)->capture_default_str();
  app->add_option("--train_rng_seed", o.train_rng_seed, "minibatch shuffling seed");
}

void add_run_flags(CLI::App* app, Options& o, bool needs_manifest = true) {
  if (needs_manifest)
    app->add_option("--manifest", o.manifest, "corpus manifest")->required();
  app->add_option("--out", o.out, "run directory for every output of this run")->required();
  app->add_option("--cache_dir", o.cache_dir,
                  "feature cache; defaults to $DEPTHMER_CACHE_DIR, then <out>/cache");
  app->add_option("--workers", o.workers, "extraction and fold threads")->capture_default_str();
  app->add_option("--label", o.label, "emotion or objective")
      ->check(CLI::IsMember({"emotion", "objective"}))
      ->capture_default_str();
  app->add_option("--classes", o.classes,
                  "keep the first N vocabulary classes, or a comma-separated list of names");
  app->add_option("--seed", o.seed, "sets every seed not given explicitly");
  app->add_flag("-v,--verbose", o.verbose, "progress on stderr");
}

// ------------------------------------------------------------------ helpers

LabelKind label_kind(const Options& o) {
  return o.label == "objective" ? LabelKind::objective : LabelKind::emotion;
}

void resolve_seeds(Options& o, ModelConfig& model) {
  const std::uint64_t base = o.seed.value_or(0);
  o.pipeline.rng_seed = o.pipeline_rng_seed.value_or(base);
  o.train.rng_seed = o.train_rng_seed.value_or(base);
  model.rng_seed = o.model_rng_seed.value_or(base);
}

ModelConfig model_for(const Options& o, int class_count) {
  if (o.preset == "pointnet2") return ModelConfig::pointnet2_default(class_count);
  if (o.preset == "pointnet") return ModelConfig::pointnet_default(class_count);
  return ModelConfig::pointnet2_lite(class_count);
}

fs::path cache_dir_for(const Options& o) {
  if (o.cache_dir) return *o.cache_dir;
  if (const char* env = std::getenv("DEPTHMER_CACHE_DIR"); env && *env) return env;
  return o.out / "cache";
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

Manifest apply_class_filter(const Manifest& m, const Options& o) {
  if (o.classes.empty()) return m;
  const LabelKind kind = label_kind(o);
  const auto& vocab = m.vocabulary(kind);
  std::vector<std::string> keep;
  if (o.classes.find_first_not_of("0123456789") == std::string::npos) {
    const std::size_t n = std::stoul(o.classes);
    if (n < 2 || n > vocab.size())
      throw ConfigError("--classes " + o.classes + ": vocabulary has " +
                        std::to_string(vocab.size()) + " classes");
    keep.assign(vocab.begin(), vocab.begin() + std::ptrdiff_t(n));
  } else {
    keep = split_commas(o.classes);
  }
  return filter_classes(m, kind, keep);
}

Manifest load_corpus(const fs::path& path, const Options& o) {
  // Missing depth files are per-sample failures, not a manifest error.
  return apply_class_filter(load_manifest(path, false), o);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json manifest_ref(const fs::path& path) {
  return {{"path", path.generic_string()}, {"fnv1a64", hex64(fnv1a64(read_file(path)))}};
}

json base_provenance(const std::string& cmd, const std::vector<std::string>& argv) {
  return {{"tool", "depthmer"},
          {"version", DEPTHMER_VERSION},
          {"git_commit", DEPTHMER_GIT_COMMIT},
          {"subcommand", cmd},
          {"argv", argv}};
}

json run_provenance(const std::string& cmd, const std::vector<std::string>& argv,
                    const Options& o, const ModelConfig& model) {
  json p = base_provenance(cmd, argv);
  p["pipeline"] = to_json(o.pipeline);
  p["model"] = to_json(model);
  p["model_preset"] = o.preset;
  p["train"] = to_json(o.train);
  p["seeds"] = {{"pipeline", o.pipeline.rng_seed},
                {"model", model.rng_seed},
                {"train", o.train.rng_seed},
                {"per_sample_rule", "derive_seed(pipeline.rng_seed, sample_id)"}};
  p["label"] = o.label;
  p["classes"] = o.classes;
  p["workers"] = o.workers;
  p["cache_dir"] = cache_dir_for(o).generic_string();
  return p;
}

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

EvaluationOptions eval_options(const Options& o) {
  EvaluationOptions e;
  e.label = label_kind(o);
  e.cache_dir = cache_dir_for(o);
  e.workers = o.workers;
  if (o.verbose) e.log = [](const std::string& msg) { std::cerr << msg << "\n"; };
  return e;
}

// Writes failures.txt and echoes the table; returns the exit code to use.
int report_failures(const fs::path& out, const std::vector<ExtractionFailure>& failures) {
  if (failures.empty()) return kOk;
  std::ostringstream os;
  os << "sample_id\terror\n";
  for (const auto& f : failures) os << f.sample_id << "\t" << f.message << "\n";
  write_text_atomic(out / "failures.txt", os.str());
  std::cerr << failures.size() << " sample(s) failed:\n" << os.str();
  return kPartial;
}

ExtractionResult extract_or_log(const Manifest& m, const Options& o) {
  ExtractionResult ex = extract_manifest(m, o.pipeline, eval_options(o));
  if (o.verbose)
    std::cerr << ex.samples.size() << " samples extracted (" << ex.cache_hits
              << " from cache), " << ex.failures.size() << " failed\n";
  return ex;
}

void write_report(const fs::path& dir, const MetricsReport& r) {
  write_text_atomic(dir / "report.txt", report_to_text(r));
  write_json(dir / "report.json", report_to_json(r));
}

// --------------------------------------------------------------- commands

int cmd_extract(Options& o, const std::vector<std::string>& argv) {
  const Manifest m = load_corpus(o.manifest, o);
  ModelConfig unused;
  resolve_seeds(o, unused);
  o.pipeline.validate();
  fs::create_directories(o.out);
  json prov = base_provenance("extract", argv);
  prov["pipeline"] = to_json(o.pipeline);
  prov["seeds"] = {{"pipeline", o.pipeline.rng_seed},
                   {"per_sample_rule", "derive_seed(pipeline.rng_seed, sample_id)"}};
  prov["manifest"] = manifest_ref(o.manifest);
  prov["label"] = o.label;
  prov["classes"] = o.classes;
  prov["cache_dir"] = cache_dir_for(o).generic_string();
  write_json(o.out / "provenance.json", prov);

  const ExtractionResult ex = extract_or_log(m, o);
  json rows = json::array();
  std::ostringstream text;
  text << "sample_id\tsubject_id\tk\tunique_selected\tvalid_points\tmean_amplitude_m\n";
  for (const auto& s : ex.samples) {
    rows.push_back({{"sample_id", s.sample_id},
                    {"subject_id", s.subject_id},
                    {"k", s.k()},
                    {"unique_selected", s.summary.unique_selected},
                    {"valid_points", s.summary.valid_points},
                    {"after_filter", s.summary.after_filter},
                    {"after_cap", s.summary.after_cap},
                    {"mean_amplitude", s.summary.mean_amplitude}});
    char amp[32];
    std::snprintf(amp, sizeof amp, "%.6g", s.summary.mean_amplitude);
    text << s.sample_id << "\t" << s.subject_id << "\t" << s.k() << "\t"
         << s.summary.unique_selected << "\t" << s.summary.valid_points << "\t" << amp << "\n";
  }
  json failures = json::array();
  for (const auto& f : ex.failures) failures.push_back({{"sample_id", f.sample_id}, {"error", f.message}});
  write_json(o.out / "summary.json",
             {{"samples", rows}, {"failures", failures}, {"cache_hits", ex.cache_hits}});
  write_text_atomic(o.out / "summary.txt", text.str());
  std::cout << ex.samples.size() << " extracted, " << ex.failures.size() << " failed\n";
  return report_failures(o.out, ex.failures);
}

int cmd_loso(Options& o, const std::vector<std::string>& argv) {
  const Manifest m = load_corpus(o.manifest, o);
  const auto& vocab = m.vocabulary(label_kind(o));
  ModelConfig model = model_for(o, int(vocab.size()));
  resolve_seeds(o, model);
  o.pipeline.validate();
  o.train.validate();
  model.input_points = o.pipeline.k;
  model.validate();
  fs::create_directories(o.out);
  json prov = run_provenance("loso", argv, o, model);
  prov["manifest"] = manifest_ref(o.manifest);
  write_json(o.out / "provenance.json", prov);

  const ExtractionResult ex = extract_or_log(m, o);
  const int status = report_failures(o.out, ex.failures);
  if (ex.samples.empty()) throw EmptyInputError("loso: no sample could be extracted");
  EvaluationOptions opts = eval_options(o);
  if (o.save_checkpoints) {
    opts.checkpoint_dir = o.out / "checkpoints";
    fs::create_directories(*opts.checkpoint_dir);
  }
  const MetricsReport r = run_loso(ex.samples, vocab, model, o.train, opts);
  write_report(o.out, r);
  std::cout << report_to_text(r);
  return status;
}

int cmd_cross(Options& o, const std::vector<std::string>& argv) {
  const Manifest train_m = load_corpus(o.train_manifest, o);
  const Manifest test_m = load_corpus(o.test_manifest, o);
  const std::vector<std::string> warnings = check_cross_corpus(train_m, test_m, label_kind(o));
  const auto& vocab = train_m.vocabulary(label_kind(o));
  ModelConfig model = model_for(o, int(vocab.size()));
  resolve_seeds(o, model);
  o.pipeline.validate();
  o.train.validate();
  model.input_points = o.pipeline.k;
  model.validate();
  fs::create_directories(o.out);
  json prov = run_provenance("cross", argv, o, model);
  prov["train_manifest"] = manifest_ref(o.train_manifest);
  prov["test_manifest"] = manifest_ref(o.test_manifest);
  write_json(o.out / "provenance.json", prov);

  ExtractionResult train = extract_or_log(train_m, o);
  ExtractionResult test = extract_or_log(test_m, o);
  std::vector<ExtractionFailure> failures = train.failures;
  failures.insert(failures.end(), test.failures.begin(), test.failures.end());
  const int status = report_failures(o.out, failures);
  MetricsReport r = cross_corpus_eval(train.samples, test.samples, vocab, model, o.train);
  r.warnings.insert(r.warnings.begin(), warnings.begin(), warnings.end());
  write_report(o.out, r);
  std::cout << report_to_text(r);
  return status;
}

int cmd_ablate(Options& o, const std::vector<std::string>& argv) {
  const Manifest m = load_corpus(o.manifest, o);
  const auto& vocab = m.vocabulary(label_kind(o));
  ModelConfig model = model_for(o, int(vocab.size()));
  resolve_seeds(o, model);
  o.train.validate();
  if (o.selections.empty() || o.ks.empty()) throw ConfigError("ablate: empty grid");
  for (const auto& s : o.selections)
    if (!kSelections.count(s)) throw ConfigError("ablate: unknown selection '" + s + "'");
  fs::create_directories(o.out);
  json prov = run_provenance("ablate", argv, o, model);
  prov["manifest"] = manifest_ref(o.manifest);
  prov["grid"] = {{"selections", o.selections}, {"ks", o.ks}};
  write_json(o.out / "provenance.json", prov);

  json cells = json::array();
  std::ostringstream table;
  table << "selection\tk\tUF1\tUAR\tpipeline_seed\tmodel_seed\ttrain_seed\n";
  int status = kOk;
  for (const auto& sel : o.selections)
    for (int k : o.ks) {
      Options cell = o;
      cell.pipeline.selection = kSelections.at(sel);
      cell.pipeline.k = k;
      cell.pipeline.validate();
      ModelConfig cell_model = model;
      cell_model.input_points = k;
      cell_model.validate();
      const std::string name = sel + "-" + std::to_string(k);
      const fs::path dir = o.out / "cells" / name;
      fs::create_directories(dir);
      if (o.verbose) std::cerr << "cell " << name << "\n";

      const ExtractionResult ex = extract_or_log(m, cell);
      status = std::max(status, report_failures(dir, ex.failures));
      if (ex.samples.empty()) throw EmptyInputError("ablate: no sample could be extracted");
      const MetricsReport r = run_loso(ex.samples, vocab, cell_model, cell.train, eval_options(cell));
      write_report(dir, r);
      cells.push_back({{"selection", sel},
                       {"k", k},
                       {"uf1", r.uf1},
                       {"uar", r.uar},
                       {"seeds",
                        {{"pipeline", cell.pipeline.rng_seed},
                         {"model", cell_model.rng_seed},
                         {"train", cell.train.rng_seed}}},
                       {"pipeline", to_json(cell.pipeline)}});
      char line[160];
      std::snprintf(line, sizeof line, "%s\t%d\t%.4f\t%.4f\t%llu\t%llu\t%llu\n", sel.c_str(), k,
                    r.uf1, r.uar, static_cast<unsigned long long>(cell.pipeline.rng_seed),
                    static_cast<unsigned long long>(cell_model.rng_seed),
                    static_cast<unsigned long long>(cell.train.rng_seed));
      table << line;
    }
  write_json(o.out / "ablation.json", {{"cells", cells}});
  write_text_atomic(o.out / "ablation.txt", table.str());
  std::cout << table.str();
  return status;
}

int cmd_synth(Options& o, const std::vector<std::string>& argv) {
  if (o.seed) o.synth.rng_seed = *o.seed;
  SyntheticSpec spec = o.amplitude_factor == 1 ? o.synth : o.synth.scaled_amplitude(o.amplitude_factor);
  spec.validate();
  const Manifest m = generate_corpus(spec, o.out);
  json prov = base_provenance("synth", argv);
  json classes = json::array();
  for (const auto& c : spec.classes)
    classes.push_back({{"name", c.name},
                       {"region_center", {c.region_center.x(), c.region_center.y()}},
                       {"region_radius", c.region_radius},
                       {"amplitude", c.amplitude},
                       {"direction", {c.direction.x(), c.direction.y(), c.direction.z()}}});
  prov["spec"] = {{"subjects", spec.subjects},
                  {"samples_per_class", spec.samples_per_class},
                  {"classes", classes},
                  {"noise_sigma", spec.noise_sigma},
                  {"width", spec.width},
                  {"height", spec.height},
                  {"base_depth", spec.base_depth},
                  {"dome_height", spec.dome_height},
                  {"background_depth", spec.background_depth},
                  {"focal_length", spec.focal_length},
                  {"depth_scale", spec.depth_scale},
                  {"subject_jitter", spec.subject_jitter},
                  {"sample_jitter", spec.sample_jitter},
                  {"rng_seed", spec.rng_seed},
                  {"id_prefix", spec.id_prefix}};
  write_json(o.out / "provenance.json", prov);
  std::cout << m.entries.size() << " samples written to " << o.out.generic_string() << "\n";
  return kOk;
}

int cmd_export_ply(Options& o, const std::vector<std::string>&) {
  const Manifest m = load_manifest(o.manifest, false);
  ModelConfig unused;
  resolve_seeds(o, unused);
  o.pipeline.validate();
  const auto it = std::find_if(m.entries.begin(), m.entries.end(),
                               [&](const ManifestEntry& e) { return e.sample_id == o.sample_id; });
  if (it == m.entries.end()) throw ConfigError("no sample '" + o.sample_id + "' in the manifest");
  PipelineConfig cfg = o.pipeline;
  cfg.rng_seed = sample_seed(o.pipeline, it->sample_id);
  const FeatureSet f = extract_features(read_depth(m.resolve(it->onset)),
                                        read_depth(m.resolve(it->apex)), it->crop,
                                        m.intrinsics_for(*it), cfg);
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  write_ply(f, o.out);
  std::cout << f.k() << " points written to " << o.out.generic_string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-based micro-expression point-cloud pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(DEPTHMER_VERSION) + " (" DEPTHMER_GIT_COMMIT ")");
  Options o;

  auto* extract = app.add_subcommand("extract", "build feature records for every sample");
  add_run_flags(extract, o);
  add_pipeline_flags(extract, o);

  auto* loso = app.add_subcommand("loso", "leave-one-subject-out evaluation");
  add_run_flags(loso, o);
  add_pipeline_flags(loso, o);
  add_model_flags(loso, o);
  loso->add_flag("--save_checkpoints", o.save_checkpoints, "save each fold's model");

  auto* cross = app.add_subcommand("cross", "train on one corpus, test on another");
  add_run_flags(cross, o, false);
  cross->add_option("--train_manifest", o.train_manifest)->required();
  cross->add_option("--test_manifest", o.test_manifest)->required();
  add_pipeline_flags(cross, o);
  add_model_flags(cross, o);

  auto* ablate = app.add_subcommand("ablate", "LOSO over a selection x k grid");
  add_run_flags(ablate, o);
  add_pipeline_flags(ablate, o);
  add_model_flags(ablate, o);
  ablate->add_option("--selections", o.selections)->delimiter(',')->capture_default_str();
  ablate->add_option("--ks", o.ks)->delimiter(',')->capture_default_str();

  auto* synth = app.add_subcommand("synth", "generate a seeded synthetic corpus");
  synth->add_option("--out", o.out, "corpus directory")->required();
  synth->add_option("--subjects", o.synth.subjects)->capture_default_str();
  synth->add_option("--samples_per_class", o.synth.samples_per_class)->capture_default_str();
  synth->add_option("--noise_sigma", o.synth.noise_sigma, "meters")->capture_default_str();
  synth->add_option("--width", o.synth.width)->capture_default_str();
  synth->add_option("--height", o.synth.height)->capture_default_str();
  synth->add_option("--depth_scale", o.synth.depth_scale, "raw units per meter")
      ->capture_default_str();
  synth->add_option("--subject_jitter", o.synth.subject_jitter)->capture_default_str();
  synth->add_option("--sample_jitter", o.synth.sample_jitter)->capture_default_str();
  synth->add_option("--rng_seed,--seed", o.synth.rng_seed)->capture_default_str();
  synth->add_option("--id_prefix", o.synth.id_prefix);
  synth->add_option("--amplitude_factor", o.amplitude_factor,
                    "multiply every class amplitude (noise unchanged)")
      ->capture_default_str();

  auto* ply = app.add_subcommand("export-ply", "write one sample's feature cloud as PLY");
  ply->add_option("--manifest", o.manifest)->required();
  ply->add_option("--sample", o.sample_id)->required();
  ply->add_option("--out", o.out, "output .ply file")->required();
  add_pipeline_flags(ply, o);
  ply->add_option("--seed", o.seed, "sets the pipeline seed when --rng_seed is absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const std::vector<std::string> args(argv, argv + argc);
  try {
    if (*extract) return cmd_extract(o, args);
    if (*loso) return cmd_loso(o, args);
    if (*cross) return cmd_cross(o, args);
    if (*ablate) return cmd_ablate(o, args);
    if (*synth) return cmd_synth(o, args);
    if (*ply) return cmd_export_ply(o, args);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kConfig;
}
