#include "depthmer/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "depthmer/seeding.hpp"

namespace depthmer {

// ------------------------------------------------------------ confusion matrix

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> names)
    : counts(decltype(counts)::Zero(Eigen::Index(names.size()), Eigen::Index(names.size()))),
      class_names(std::move(names)) {}

ConfusionMatrix ConfusionMatrix::from_counts(
    Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> counts) {
  if (counts.rows() != counts.cols()) throw ShapeError("confusion matrix must be square");
  if ((counts.array() < 0).any()) throw ValidationError("confusion counts must be >= 0");
  ConfusionMatrix cm;
  for (Eigen::Index c = 0; c < counts.rows(); ++c) cm.class_names.push_back(std::to_string(c));
  cm.counts = std::move(counts);
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted, long count) {
  if (truth < 0 || truth >= classes() || predicted < 0 || predicted >= classes())
    throw BoundsError("confusion matrix: class index out of range");
  if (count < 0) throw ValidationError("confusion matrix: negative count");
  counts(truth, predicted) += count;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.counts.rows() != counts.rows()) throw ShapeError("confusion matrix size mismatch");
  counts += other.counts;
  return *this;
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  std::vector<double> out;
  for (int c = 0; c < cm.classes(); ++c) {
    const long denom = 2 * cm.true_positives(c) + cm.false_positives(c) + cm.false_negatives(c);
    out.push_back(denom == 0 ? 0.0 : double(2 * cm.true_positives(c)) / double(denom));
  }
  return out;
}

std::vector<double> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<double> out;
  for (int c = 0; c < cm.classes(); ++c) {
    const long n = cm.support(c);
    if (n == 0) {
      const std::string name =
          std::size_t(c) < cm.class_names.size() ? cm.class_names[std::size_t(c)] : "";
      throw UndefinedClassError("recall undefined: class " + std::to_string(c) + " '" + name +
                                "' has no samples");
    }
    out.push_back(double(cm.true_positives(c)) / double(n));
  }
  return out;
}

namespace {

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

void require_classes(const ConfusionMatrix& cm) {
  if (cm.classes() < 2) throw ShapeError("metrics need at least 2 classes");
}

}  // namespace

double uf1(const ConfusionMatrix& cm) {
  require_classes(cm);
  return mean(per_class_f1(cm));
}

double uar(const ConfusionMatrix& cm) {
  require_classes(cm);
  return mean(per_class_recall(cm));
}

// ---------------------------------------------------------------------- splits

FoldPlan loso_splits(const std::vector<SampleKey>& samples) {
  if (samples.empty()) throw EmptyInputError("loso: no samples");
  std::map<std::string, std::vector<std::string>> by_subject;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (s.subject_id.empty())
      throw ValidationError("loso: sample '" + s.sample_id + "' has no subject id");
    if (!seen.insert(s.sample_id).second)
      throw ValidationError("loso: duplicate sample id '" + s.sample_id + "'");
    by_subject[s.subject_id].push_back(s.sample_id);
  }
  FoldPlan plan;
  for (auto& [subject, ids] : by_subject) {
    Fold fold;
    fold.held_out_subject = subject;
    std::sort(ids.begin(), ids.end());
    fold.test_ids = ids;
    for (const auto& [other, other_ids] : by_subject)
      if (other != subject)
        fold.train_ids.insert(fold.train_ids.end(), other_ids.begin(), other_ids.end());
    std::sort(fold.train_ids.begin(), fold.train_ids.end());
    plan.folds.push_back(std::move(fold));
  }
  if (plan.folds.size() == 1)
    plan.warnings.push_back("single subject '" + plan.folds.front().held_out_subject +
                            "': the only fold has an empty training set");
  return plan;
}

FoldPlan loso_splits(const Manifest& manifest) {
  std::vector<SampleKey> keys;
  for (const auto& e : manifest.entries) keys.push_back({e.sample_id, e.subject_id});
  return loso_splits(keys);
}

// ---------------------------------------------------------------------- report

MetricsReport assemble_report(std::string protocol, std::vector<std::string> class_names,
                              std::vector<FoldResult> folds, std::vector<std::string> warnings) {
  MetricsReport r;
  r.protocol = std::move(protocol);
  r.pooled = ConfusionMatrix(class_names);
  for (const auto& f : folds) r.pooled += f.matrix;
  r.per_fold = std::move(folds);
  r.warnings = std::move(warnings);
  r.per_class_f1 = per_class_f1(r.pooled);
  for (int c = 0; c < r.pooled.classes(); ++c) {
    const long n = r.pooled.support(c);
    r.per_class_recall.push_back(n == 0 ? 0.0 : double(r.pooled.true_positives(c)) / double(n));
    if (r.pooled.true_positives(c) + r.pooled.false_positives(c) + r.pooled.false_negatives(c) ==
        0)
      r.empty_classes.push_back(class_names[std::size_t(c)]);
    if (n == 0)
      r.warnings.push_back("class '" + class_names[std::size_t(c)] +
                           "' has no test samples; its recall is reported as 0");
  }
  r.uf1 = mean(r.per_class_f1);
  r.uar = mean(r.per_class_recall);
  return r;
}

namespace {

nlohmann::json matrix_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < cm.counts.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < cm.counts.cols(); ++j) row.push_back(cm.counts(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["protocol"] = r.protocol;
  j["uf1"] = r.uf1;
  j["uar"] = r.uar;
  j["class_names"] = r.pooled.class_names;
  j["per_class_f1"] = r.per_class_f1;
  j["per_class_recall"] = r.per_class_recall;
  j["confusion"] = matrix_json(r.pooled);
  j["empty_classes"] = r.empty_classes;
  j["warnings"] = r.warnings;
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.per_fold) {
    nlohmann::json fj;
    fj["subject_id"] = f.subject_id;
    fj["confusion"] = matrix_json(f.matrix);
    nlohmann::json preds = nlohmann::json::array();
    for (const auto& p : f.predictions)
      preds.push_back({{"sample_id", p.sample_id}, {"truth", p.truth}, {"predicted", p.predicted}});
    fj["predictions"] = std::move(preds);
    folds.push_back(std::move(fj));
  }
  j["per_fold"] = std::move(folds);
  return j;
}

std::string report_to_text(const MetricsReport& r) {
  std::ostringstream os;
  os << "protocol: " << r.protocol << "\n";
  os << "UF1: " << fixed(r.uf1) << "\n";
  os << "UAR: " << fixed(r.uar) << "\n\n";
  os << "class                 F1      recall  support\n";
  for (int c = 0; c < r.pooled.classes(); ++c) {
    char line[128];
    std::snprintf(line, sizeof line, "%-20s  %.4f  %.4f  %ld\n",
                  r.pooled.class_names[std::size_t(c)].c_str(), r.per_class_f1[std::size_t(c)],
                  r.per_class_recall[std::size_t(c)], r.pooled.support(c));
    os << line;
  }
  os << "\npooled confusion (rows = truth, columns = prediction):\n";
  for (Eigen::Index i = 0; i < r.pooled.counts.rows(); ++i) {
    os << "  ";
    for (Eigen::Index j = 0; j < r.pooled.counts.cols(); ++j) {
      char cell[24];
      std::snprintf(cell, sizeof cell, "%6ld", r.pooled.counts(i, j));
      os << cell;
    }
    os << "\n";
  }
  if (!r.per_fold.empty()) {
    os << "\nper fold:\n";
    for (const auto& f : r.per_fold) {
      long correct = f.matrix.counts.diagonal().sum();
      os << "  " << f.subject_id << ": " << correct << "/" << f.matrix.total() << " correct\n";
    }
  }
  for (const auto& name : r.empty_classes)
    os << "note: class '" << name << "' has TP = FP = FN = 0 and contributes 0 to UF1\n";
  for (const auto& w : r.warnings) os << "warning: " << w << "\n";
  return os.str();
}

// ------------------------------------------------------------------ execution

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, std::size_t(std::max(1, workers)));
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::uint64_t sample_seed(const PipelineConfig& cfg, const std::string& sample_id) {
  return derive_seed(cfg.rng_seed, std::string_view(sample_id));
}

ExtractionResult extract_manifest(const Manifest& manifest, const PipelineConfig& cfg,
                                  const EvaluationOptions& options) {
  cfg.validate();
  std::optional<FeatureCache> cache;
  if (options.cache_dir) cache.emplace(*options.cache_dir);

  const std::size_t n = manifest.entries.size();
  std::vector<std::optional<FeatureSet>> slots(n);
  std::vector<std::optional<std::string>> messages(n);
  std::vector<char> hit(n, 0);
  std::mutex log_mutex;

  parallel_for(n, options.workers, [&](std::size_t i) {
    const ManifestEntry& e = manifest.entries[i];
    const std::optional<int> label = manifest.label_index(e, options.label);
    if (!label) return;  // unlabeled for this protocol
    try {
      const CameraIntrinsicsd intr = manifest.intrinsics_for(e);
      // The key covers the depth bytes too, so regenerated files at the same
      // paths never hit stale records.
      const std::vector<std::uint8_t> onset_bytes = read_file(manifest.resolve(e.onset));
      const std::vector<std::uint8_t> apex_bytes = read_file(manifest.resolve(e.apex));
      const std::uint64_t hash =
          fnv1a64(apex_bytes, fnv1a64(onset_bytes, feature_config_hash(cfg, intr, e)));
      std::optional<FeatureSet> feats;
      if (cache) {
        try {
          feats = cache->load(e.sample_id, hash);
        } catch (const IntegrityError& err) {
          if (options.log) {
            std::lock_guard lock(log_mutex);
            options.log("cache record for '" + e.sample_id + "' discarded: " + err.what());
          }
        }
      }
      if (feats) {
        hit[i] = 1;
      } else {
        PipelineConfig local = cfg;
        local.rng_seed = sample_seed(cfg, e.sample_id);
        const DepthFrame onset = decode_depth(onset_bytes);
        const DepthFrame apex = decode_depth(apex_bytes);
        feats = extract_features(onset, apex, e.crop, intr, local);
        // Records store f32; rounding here makes a hit and a miss identical.
        feats->features = feats->features.cast<float>().cast<double>();
        feats->sample_id = e.sample_id;
        feats->subject_id = e.subject_id;
        if (cache) cache->store(*feats, hash);
      }
      // Labels come from the manifest, never from the cache record.
      feats->label = *label;
      feats->sample_id = e.sample_id;
      feats->subject_id = e.subject_id;
      slots[i] = std::move(feats);
    } catch (const std::exception& err) {
      messages[i] = err.what();
    }
  });

  ExtractionResult out;
  for (std::size_t i = 0; i < n; ++i) {
    if (slots[i]) out.samples.push_back(std::move(*slots[i]));
    if (messages[i]) out.failures.push_back({manifest.entries[i].sample_id, *messages[i]});
    out.cache_hits += hit[i];
  }
  return out;
}

namespace {

void check_vocabulary(const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw ConfigError("evaluation needs at least 2 classes");
}

ModelConfig resolved_model(ModelConfig cfg, const std::vector<FeatureSet>& samples,
                           int class_count) {
  cfg.class_count = class_count;
  if (!samples.empty()) cfg.input_points = samples.front().k();
  cfg.validate();
  return cfg;
}

void check_labels(const std::vector<FeatureSet>& samples, int class_count) {
  for (const auto& s : samples) {
    if (!s.label) throw LabelError("sample '" + s.sample_id + "' has no label");
    if (*s.label < 0 || *s.label >= class_count)
      throw LabelError("sample '" + s.sample_id + "' label out of range");
  }
}

std::string failure_summary(const std::vector<ExtractionFailure>& failures) {
  std::string msg = std::to_string(failures.size()) + " sample(s) failed extraction:";
  for (const auto& f : failures) msg += "\n  " + f.sample_id + ": " + f.message;
  return msg;
}

}  // namespace

MetricsReport run_loso(const std::vector<FeatureSet>& samples,
                       const std::vector<std::string>& class_names, const ModelConfig& model_cfg,
                       const TrainConfig& train_cfg, const EvaluationOptions& options) {
  check_vocabulary(class_names);
  const int classes = int(class_names.size());
  check_labels(samples, classes);
  train_cfg.validate();
  const ModelConfig cfg = resolved_model(model_cfg, samples, classes);

  std::vector<SampleKey> keys;
  std::map<std::string, const FeatureSet*> by_id;
  for (const auto& s : samples) {
    keys.push_back({s.sample_id, s.subject_id});
    by_id[s.sample_id] = &s;
  }
  const FoldPlan plan = loso_splits(keys);

  std::vector<FoldResult> results(plan.folds.size());
  parallel_for(plan.folds.size(), options.workers, [&](std::size_t f) {
    const Fold& fold = plan.folds[f];
    FoldResult& res = results[f];
    res.subject_id = fold.held_out_subject;
    res.matrix = ConfusionMatrix(class_names);
    if (fold.train_ids.empty()) return;  // flagged by loso_splits
    std::vector<FeatureSet> train;
    train.reserve(fold.train_ids.size());
    for (const auto& id : fold.train_ids) train.push_back(*by_id.at(id));
    const PointModel model = fit(init_model(cfg), train, train_cfg);
    if (options.checkpoint_dir)
      save_checkpoint(model, *options.checkpoint_dir / (fold.held_out_subject + ".dmck"));
    for (const auto& id : fold.test_ids) {
      const FeatureSet& s = *by_id.at(id);
      const int p = predict(model, s);
      res.matrix.add(*s.label, p);
      res.predictions.push_back({id, *s.label, p});
    }
    if (options.log) options.log("fold " + fold.held_out_subject + " done");
  });
  return assemble_report("loso", class_names, std::move(results), plan.warnings);
}

MetricsReport run_loso(const Manifest& manifest, const PipelineConfig& pipeline_cfg,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const EvaluationOptions& options) {
  manifest.validate(false);
  ExtractionResult ex = extract_manifest(manifest, pipeline_cfg, options);
  if (!ex.failures.empty()) throw ValidationError(failure_summary(ex.failures));
  if (ex.samples.empty()) throw EmptyInputError("loso: no labeled samples");
  return run_loso(ex.samples, manifest.vocabulary(options.label), model_cfg, train_cfg, options);
}

MetricsReport cross_corpus_eval(const std::vector<FeatureSet>& train,
                                const std::vector<FeatureSet>& test,
                                const std::vector<std::string>& class_names,
                                const ModelConfig& model_cfg, const TrainConfig& train_cfg) {
  check_vocabulary(class_names);
  const int classes = int(class_names.size());
  if (train.empty()) throw EmptyInputError("cross-corpus: empty training set");
  if (test.empty()) throw EmptyInputError("cross-corpus: empty test set");
  check_labels(train, classes);
  check_labels(test, classes);
  train_cfg.validate();
  const ModelConfig cfg = resolved_model(model_cfg, train, classes);

  const PointModel model = fit(init_model(cfg), train, train_cfg);
  FoldResult res;
  res.subject_id = "test";
  res.matrix = ConfusionMatrix(class_names);
  std::vector<const FeatureSet*> ordered;
  for (const auto& s : test) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(),
            [](const FeatureSet* a, const FeatureSet* b) { return a->sample_id < b->sample_id; });
  for (const FeatureSet* s : ordered) {
    const int p = predict(model, *s);
    res.matrix.add(*s->label, p);
    res.predictions.push_back({s->sample_id, *s->label, p});
  }
  std::vector<FoldResult> folds;
  folds.push_back(std::move(res));
  return assemble_report("cross", class_names, std::move(folds));
}

std::vector<std::string> check_cross_corpus(const Manifest& train_manifest,
                                            const Manifest& test_manifest, LabelKind label) {
  train_manifest.validate(false);
  test_manifest.validate(false);
  if (train_manifest.vocabulary(label) != test_manifest.vocabulary(label))
    throw ValidationError("cross-corpus: train and test class vocabularies differ");

  // The same corpus on both sides is the smoke configuration; otherwise a
  // shared id would leak training samples into the test set.
  if (train_manifest.entries == test_manifest.entries)
    return {"train and test corpora are identical; this is a training-set report"};
  std::set<std::string> ids;
  for (const auto& e : train_manifest.entries) ids.insert(e.sample_id);
  for (const auto& e : test_manifest.entries)
    if (ids.count(e.sample_id))
      throw ValidationError("cross-corpus: sample id '" + e.sample_id +
                            "' appears in both corpora");
  return {};
}

MetricsReport cross_corpus_eval(const Manifest& train_manifest, const Manifest& test_manifest,
                                const PipelineConfig& pipeline_cfg, const ModelConfig& model_cfg,
                                const TrainConfig& train_cfg, const EvaluationOptions& options) {
  const std::vector<std::string> warnings =
      check_cross_corpus(train_manifest, test_manifest, options.label);
  ExtractionResult train = extract_manifest(train_manifest, pipeline_cfg, options);
  if (!train.failures.empty()) throw ValidationError(failure_summary(train.failures));
  ExtractionResult test = extract_manifest(test_manifest, pipeline_cfg, options);
  if (!test.failures.empty()) throw ValidationError(failure_summary(test.failures));
  MetricsReport r = cross_corpus_eval(train.samples, test.samples,
                                      train_manifest.vocabulary(options.label), model_cfg,
                                      train_cfg);
  r.warnings.insert(r.warnings.begin(), warnings.begin(), warnings.end());
  return r;
}

}  // namespace depthmer
