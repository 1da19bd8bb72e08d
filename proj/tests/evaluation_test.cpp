#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "depthmer/evaluation.hpp"

using namespace depthmer;

namespace {

using Counts = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>;

ConfusionMatrix matrix(std::initializer_list<std::initializer_list<long>> rows) {
  const auto n = Eigen::Index(rows.size());
  Counts c(n, n);
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (long v : r) c(i, j++) = v;
    ++i;
  }
  return ConfusionMatrix::from_counts(c);
}

/// Metrics straight from (truth, prediction) pairs, with no confusion matrix.
struct Oracle {
  double uf1 = 0, uar = 0;
};

Oracle oracle(const std::vector<std::pair<int, int>>& pairs, int classes) {
  Oracle o;
  for (int c = 0; c < classes; ++c) {
    long tp = 0, fp = 0, fn = 0, n = 0;
    for (auto [t, p] : pairs) {
      if (t == c && p == c) ++tp;
      if (t != c && p == c) ++fp;
      if (t == c && p != c) ++fn;
      if (t == c) ++n;
    }
    o.uf1 += (2 * tp + fp + fn) == 0 ? 0.0 : double(2 * tp) / double(2 * tp + fp + fn);
    o.uar += double(tp) / double(n);
  }
  o.uf1 /= classes;
  o.uar /= classes;
  return o;
}

FeatureSet sample(const std::string& id, const std::string& subject, int label, double shift) {
  FeatureSet f;
  f.sample_id = id;
  f.subject_id = subject;
  f.label = label;
  f.features = FeatureSet::Rows::Zero(32, 6);
  for (int i = 0; i < 32; ++i) {
    f.features(i, 0) = shift + 0.01 * i;
    f.features(i, 1) = 0.02 * (i % 5);
    f.features(i, 3) = label == 0 ? 1.0 : 0.0;
  }
  return f;
}

}  // namespace

TEST_CASE("confusion matrix bookkeeping") {
  ConfusionMatrix cm({"a", "b", "c"});
  cm.add(0, 0);
  cm.add(0, 2);
  cm.add(1, 1, 3);
  cm.add(2, 0);
  CHECK(cm.true_positives(1) == 3);
  CHECK(cm.false_positives(0) == 1);
  CHECK(cm.false_negatives(0) == 1);
  CHECK(cm.support(2) == 1);
  CHECK(cm.total() == 6);
  CHECK_THROWS_AS(cm.add(3, 0), BoundsError);
  CHECK_THROWS_AS(cm.add(0, 0, -1), ValidationError);
  CHECK_THROWS_AS(ConfusionMatrix::from_counts(Counts::Constant(2, 2, -1)), ValidationError);
  CHECK_THROWS_AS(ConfusionMatrix::from_counts(Counts::Zero(2, 3)), ShapeError);
}

TEST_CASE("uf1 and uar hand cases") {
  CHECK(uf1(matrix({{3, 0}, {0, 2}})) == 1.0);
  CHECK(uar(matrix({{3, 0, 0}, {0, 1, 0}, {0, 0, 4}})) == 1.0);

  // TP = (1, 1), FP = (1, 0), FN = (0, 1)
  CHECK(uf1(matrix({{1, 0}, {1, 1}})) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(uar(matrix({{1, 1}, {0, 2}})) == 0.75);
  CHECK(uar(matrix({{5, 0}, {5, 0}})) == 0.5);

  SUBCASE("empty classes") {
    // Class 2 never appears and is never predicted: F1 contributes 0.
    const ConfusionMatrix cm = matrix({{2, 0, 0}, {0, 2, 0}, {0, 0, 0}});
    CHECK(uf1(cm) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(uar(cm), UndefinedClassError);
    CHECK_THROWS_AS(uf1(matrix({{1}})), ShapeError);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const int classes = 2 + int(rng() % 5);
    Counts c(classes, classes);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = long(rng() % 6);
    for (int k = 0; k < classes; ++k) c(k, (k + 1) % classes) += 1;  // every row non-empty
    const ConfusionMatrix cm = ConfusionMatrix::from_counts(c);
    const double f = uf1(cm), r = uar(cm);
    CHECK(f >= 0);
    CHECK(f <= 1);
    CHECK(r >= 0);
    CHECK(r <= 1);
    CHECK(f < 1);  // an off-diagonal count exists in every row
    CHECK(r < 1);

    const long scale = 1 + long(rng() % 7);
    const ConfusionMatrix scaled = ConfusionMatrix::from_counts(c * scale);
    CHECK(uar(scaled) == doctest::Approx(r).epsilon(1e-15));
  }
  const ConfusionMatrix diag = ConfusionMatrix::from_counts(Counts(Eigen::Vector3<long>(1, 4, 2).asDiagonal()));
  CHECK(uf1(diag) == 1.0);
  CHECK(uar(diag) == 1.0);
}

TEST_CASE("metrics match the pairwise oracle") {
  std::mt19937_64 rng(4242);
  for (int trial = 0; trial < 1000; ++trial) {
    const int classes = 2 + int(rng() % 4);
    const int n = classes + int(rng() % 60);
    std::vector<std::pair<int, int>> pairs;
    for (int c = 0; c < classes; ++c) pairs.emplace_back(c, int(rng() % classes));
    while (int(pairs.size()) < n) pairs.emplace_back(int(rng() % classes), int(rng() % classes));
    ConfusionMatrix cm(std::vector<std::string>(std::size_t(classes), "x"));
    for (auto [t, p] : pairs) cm.add(t, p);
    const Oracle o = oracle(pairs, classes);
    CHECK(uf1(cm) == doctest::Approx(o.uf1).epsilon(1e-14));
    CHECK(uar(cm) == doctest::Approx(o.uar).epsilon(1e-14));
  }
}

TEST_CASE("loso splits") {
  const std::vector<SampleKey> keys{{"s3", "c"}, {"s1", "a"}, {"s2", "b"}, {"s4", "a"}};
  const FoldPlan plan = loso_splits(keys);
  REQUIRE(plan.folds.size() == 3);
  CHECK(plan.folds[0].held_out_subject == "a");
  CHECK(plan.folds[1].held_out_subject == "b");
  CHECK(plan.folds[2].held_out_subject == "c");
  CHECK(plan.folds[0].test_ids == std::vector<std::string>{"s1", "s4"});
  CHECK(plan.folds[0].train_ids == std::vector<std::string>{"s2", "s3"});
  CHECK(plan.warnings.empty());

  for (const Fold& f : plan.folds) {
    std::set<std::string> train(f.train_ids.begin(), f.train_ids.end());
    for (const auto& id : f.test_ids) CHECK(train.count(id) == 0);
    CHECK(f.train_ids.size() + f.test_ids.size() == keys.size());
  }

  SUBCASE("order of the input does not matter") {
    std::vector<SampleKey> shuffled = keys;
    std::reverse(shuffled.begin(), shuffled.end());
    const FoldPlan again = loso_splits(shuffled);
    for (std::size_t i = 0; i < plan.folds.size(); ++i) {
      CHECK(again.folds[i].train_ids == plan.folds[i].train_ids);
      CHECK(again.folds[i].test_ids == plan.folds[i].test_ids);
    }
  }
  SUBCASE("single subject is flagged") {
    const FoldPlan one = loso_splits(std::vector<SampleKey>{{"x", "only"}, {"y", "only"}});
    REQUIRE(one.folds.size() == 1);
    CHECK(one.folds[0].train_ids.empty());
    CHECK(one.warnings.size() == 1);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(loso_splits(std::vector<SampleKey>{}), EmptyInputError);
    CHECK_THROWS_AS(loso_splits(std::vector<SampleKey>{{"x", ""}}), ValidationError);
    CHECK_THROWS_AS(loso_splits(std::vector<SampleKey>{{"x", "a"}, {"x", "b"}}), ValidationError);
  }
}

TEST_CASE("report assembly pools fold matrices") {
  const std::vector<std::string> names{"p", "n"};
  std::vector<FoldResult> folds(2);
  folds[0] = {"a", ConfusionMatrix(names), {}};
  folds[0].matrix.add(0, 0);
  folds[0].matrix.add(1, 0);
  folds[1] = {"b", ConfusionMatrix(names), {}};
  folds[1].matrix.add(1, 1, 2);
  const MetricsReport r = assemble_report("loso", names, folds);
  CHECK(r.pooled.counts == folds[0].matrix.counts + folds[1].matrix.counts);
  CHECK(r.uf1 == doctest::Approx(uf1(r.pooled)));
  CHECK(r.uar == doctest::Approx(uar(r.pooled)));
  double f1_mean = 0, rec_mean = 0;
  for (double v : r.per_class_f1) f1_mean += v / 2;
  for (double v : r.per_class_recall) rec_mean += v / 2;
  CHECK(r.uf1 == f1_mean);
  CHECK(r.uar == rec_mean);
  CHECK(r.empty_classes.empty());

  const std::string text = report_to_text(r);
  CHECK(text.find("UF1: ") != std::string::npos);
  const nlohmann::json j = report_to_json(r);
  CHECK(j["per_fold"].size() == 2);
  CHECK(j["confusion"][1][1] == 2);

  SUBCASE("an unseen class is flagged, not fatal") {
    std::vector<FoldResult> f(1);
    f[0] = {"a", ConfusionMatrix({"p", "n", "s"}), {}};
    f[0].matrix.add(0, 0);
    f[0].matrix.add(1, 1);
    const MetricsReport e = assemble_report("loso", {"p", "n", "s"}, f);
    CHECK(e.empty_classes == std::vector<std::string>{"s"});
    CHECK(e.uf1 == doctest::Approx(2.0 / 3.0));
    CHECK_FALSE(e.warnings.empty());
  }
}

TEST_CASE("run_loso and cross-corpus on separable toy features") {
  // Two classes told apart by one channel, three subjects.
  std::vector<FeatureSet> samples;
  for (int s = 0; s < 3; ++s)
    for (int c = 0; c < 2; ++c)
      for (int r = 0; r < 2; ++r)
        samples.push_back(sample("s" + std::to_string(s) + "_" + std::to_string(c) + "_" +
                                     std::to_string(r),
                                 "subj" + std::to_string(s), c, 0.1 * s));
  const std::vector<std::string> names{"still", "moving"};
  ModelConfig mc = ModelConfig::pointnet_default(2);
  mc.global_widths = {16, 32};
  mc.head_widths = {16};
  TrainConfig tc;
  tc.epochs = 60;
  tc.batch_size = 4;
  tc.learning_rate = 0.01;

  const MetricsReport a = run_loso(samples, names, mc, tc);
  CHECK(a.per_fold.size() == 3);
  CHECK(a.pooled.total() == 12);
  CHECK(a.uf1 == 1.0);

  SUBCASE("row order and worker count do not change the report") {
    std::vector<FeatureSet> shuffled = samples;
    std::mt19937_64 rng(2);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EvaluationOptions opt;
    opt.workers = 3;
    const MetricsReport b = run_loso(shuffled, names, mc, tc, opt);
    CHECK(report_to_json(a).dump() == report_to_json(b).dump());
  }

  SUBCASE("cross-corpus smoke: train on everything, test on everything") {
    const MetricsReport x = cross_corpus_eval(samples, samples, names, mc, tc);
    CHECK(x.protocol == "cross");
    CHECK(x.pooled.total() == 12);
    CHECK(x.uf1 == 1.0);
  }

  SUBCASE("bad labels") {
    std::vector<FeatureSet> bad = samples;
    bad[0].label = 5;
    CHECK_THROWS_AS(run_loso(bad, names, mc, tc), LabelError);
    CHECK_THROWS_AS(run_loso(samples, {"one"}, mc, tc), ConfigError);
  }
}

TEST_CASE("parallel_for rethrows the first failure by index") {
  std::vector<int> hits(10, 0);
  parallel_for(10, 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::count(hits.begin(), hits.end(), 1) == 10);
  try {
    parallel_for(6, 3, [](std::size_t i) {
      if (i == 2) throw LabelError("two");
      if (i == 4) throw ShapeError("four");
    });
    FAIL("expected an exception");
  } catch (const LabelError& e) {
    CHECK(std::string(e.what()) == "two");
  }
}

TEST_CASE("sample seeds differ per sample and follow the pipeline seed") {
  PipelineConfig cfg;
  CHECK(sample_seed(cfg, "a") != sample_seed(cfg, "b"));
  CHECK(sample_seed(cfg, "a") == sample_seed(cfg, "a"));
  PipelineConfig other = cfg;
  other.rng_seed = 1;
  CHECK(sample_seed(other, "a") != sample_seed(cfg, "a"));
}
