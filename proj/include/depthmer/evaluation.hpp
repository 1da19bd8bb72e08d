#pragma once

// Leave-one-subject-out and cross-corpus protocols, and the unweighted F1 /
// unweighted average recall metrics.

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthmer/dataset_io.hpp"
#include "depthmer/motion_features.hpp"
#include "depthmer/point_network.hpp"

namespace depthmer {

/// Rows are true classes, columns predictions.
struct ConfusionMatrix {
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> counts;
  std::vector<std::string> class_names;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> names);
  static ConfusionMatrix from_counts(Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> counts);

  int classes() const { return static_cast<int>(counts.rows()); }
  void add(int truth, int predicted, long count = 1);
  long true_positives(int c) const { return counts(c, c); }
  long false_positives(int c) const { return counts.col(c).sum() - counts(c, c); }
  long false_negatives(int c) const { return counts.row(c).sum() - counts(c, c); }
  long support(int c) const { return counts.row(c).sum(); }
  long total() const { return counts.sum(); }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    return a.class_names == b.class_names && a.counts.rows() == b.counts.rows() &&
           a.counts == b.counts;
  }
};

/// 2 TP / (2 TP + FP + FN) per class; a class with no TP, FP or FN scores 0.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);
/// TP / n per class. Throws UndefinedClassError for a class with no samples.
std::vector<double> per_class_recall(const ConfusionMatrix& cm);
double uf1(const ConfusionMatrix& cm);
double uar(const ConfusionMatrix& cm);

struct SampleKey {
  std::string sample_id;
  std::string subject_id;
};

struct Fold {
  std::string held_out_subject;
  std::vector<std::string> train_ids;  // sorted
  std::vector<std::string> test_ids;   // sorted
};

struct FoldPlan {
  std::vector<Fold> folds;  // ordered by subject id
  std::vector<std::string> warnings;
};

FoldPlan loso_splits(const std::vector<SampleKey>& samples);
FoldPlan loso_splits(const Manifest& manifest);

struct Prediction {
  std::string sample_id;
  int truth = 0;
  int predicted = 0;
};

struct FoldResult {
  std::string subject_id;
  ConfusionMatrix matrix;
  std::vector<Prediction> predictions;
};

struct MetricsReport {
  std::string protocol;  // "loso" or "cross"
  double uf1 = 0;
  double uar = 0;
  std::vector<double> per_class_f1;
  std::vector<double> per_class_recall;
  ConfusionMatrix pooled;
  std::vector<FoldResult> per_fold;
  std::vector<std::string> empty_classes;  // TP = FP = FN = 0
  std::vector<std::string> warnings;
};

/// Pools per-fold matrices and computes the metrics on the pooled matrix.
MetricsReport assemble_report(std::string protocol, std::vector<std::string> class_names,
                              std::vector<FoldResult> folds,
                              std::vector<std::string> warnings = {});

nlohmann::json report_to_json(const MetricsReport& report);
std::string report_to_text(const MetricsReport& report);

struct EvaluationOptions {
  LabelKind label = LabelKind::emotion;
  std::optional<fs::path> cache_dir;
  int workers = 1;  // extraction and fold-level threads
  std::function<void(const std::string&)> log;
  /// When set, each fold's trained model is saved as <dir>/<subject>.dmck.
  std::optional<fs::path> checkpoint_dir;
};

struct ExtractionFailure {
  std::string sample_id;
  std::string message;
};

struct ExtractionResult {
  std::vector<FeatureSet> samples;  // manifest order, failures omitted
  std::vector<ExtractionFailure> failures;
  std::size_t cache_hits = 0;
};

/// Seed used for one sample's random selection: derived from the pipeline
/// seed and the sample id so that every sample draws independently.
std::uint64_t sample_seed(const PipelineConfig& cfg, const std::string& sample_id);

/// Runs the feature pipeline over every manifest entry (optionally through
/// the cache). Entries without a label of `options.label` are skipped.
ExtractionResult extract_manifest(const Manifest& manifest, const PipelineConfig& cfg,
                                  const EvaluationOptions& options);

/// LOSO on already extracted features.
MetricsReport run_loso(const std::vector<FeatureSet>& samples,
                       const std::vector<std::string>& class_names, const ModelConfig& model_cfg,
                       const TrainConfig& train_cfg, const EvaluationOptions& options = {});
MetricsReport run_loso(const Manifest& manifest, const PipelineConfig& pipeline_cfg,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const EvaluationOptions& options = {});

/// One fit on the training set and evaluation on the whole test set.
MetricsReport cross_corpus_eval(const std::vector<FeatureSet>& train,
                                const std::vector<FeatureSet>& test,
                                const std::vector<std::string>& class_names,
                                const ModelConfig& model_cfg, const TrainConfig& train_cfg);
/// Vocabulary agreement and train/test id disjointness. Identical corpora
/// pass with a warning, which is returned.
std::vector<std::string> check_cross_corpus(const Manifest& train_manifest,
                                            const Manifest& test_manifest, LabelKind label);
MetricsReport cross_corpus_eval(const Manifest& train_manifest, const Manifest& test_manifest,
                                const PipelineConfig& pipeline_cfg, const ModelConfig& model_cfg,
                                const TrainConfig& train_cfg,
                                const EvaluationOptions& options = {});

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first
/// exception in index order.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace depthmer
