// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
// if any criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <random>

#include "depthmer/dataset_io.hpp"
#include "depthmer/evaluation.hpp"
#include "depthmer/synthetic_faces.hpp"

using namespace depthmer;

namespace {

// Training length for the synthetic LOSO runs. The library default is sized
// for real corpora; this is the largest round count whose sorted and random
// runs (plus their repeats) fit the per-run time budget with margin on one
// core.
constexpr int kSyntheticEpochs = 20;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<int> failed;

void report(int id, const std::string& name, const Outcome& o) {
  std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << name << ": "
            << o.detail << std::endl;
  if (!o.pass) failed.push_back(id);
}

// ---------------------------------------------------------------- 1

Outcome geometry_round_trip() {
  Clock clock;
  std::mt19937_64 rng(101);
  int worst = 0;
  long cells = 0, mismatched_validity = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int w = 64 + int(rng() % 577), h = 48 + int(rng() % 433);
    std::uniform_int_distribution<int> value(250, 8000);
    std::bernoulli_distribution hole(0.15);
    DepthGrid raw(h, w);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) raw(v, u) = hole(rng) ? 0 : std::uint16_t(value(rng));
    const DepthFrame f = DepthFrame::from_raw(std::move(raw));
    std::uniform_real_distribution<double> offset(-20, 20);
    const CameraIntrinsicsd intr{kDefaultFocalLength, kDefaultFocalLength,
                                 (w - 1) / 2.0 + offset(rng), (h - 1) / 2.0 + offset(rng),
                                 kDefaultDepthScale};
    const DepthFrame back = project(backproject(f, intr), intr, w, h);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        if (back.valid(v, u) != f.valid(v, u)) ++mismatched_validity;
        if (!f.valid(v, u)) continue;
        worst = std::max(worst, std::abs(int(back.raw(v, u)) - int(f.raw(v, u))));
        ++cells;
      }
  }
  const double t = clock.seconds();
  return {worst <= 1 && mismatched_validity == 0 && t < 5.0,
          fmt("100 frames, %ld valid cells, max |error| %d raw unit(s), %ld validity "
              "mismatches, %.2f s (limit 5 s)",
              cells, worst, mismatched_validity, t)};
}

// ---------------------------------------------------------------- 2

Outcome spherical_inverse() {
  Clock clock;
  std::mt19937_64 rng(202);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> log_scale(-7, 0);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    Eigen::Vector3d d(g(rng), g(rng), g(rng));
    // Axis-aligned and planar directions exercise the atan2 edge cases.
    if (i % 10 == 0) d(int(rng() % 3)) = 0;
    if (i % 50 == 0) d.head<2>().setZero();
    if (d.norm() == 0) d.z() = 1;
    d *= std::pow(10.0, log_scale(rng));
    const Eigen::RowVector3d s = spherical_of(d.x(), d.y(), d.z());
    const double r = s(0), theta = s(1), phi = s(2);
    const Eigen::Vector3d back(r * std::cos(phi) * std::cos(theta),
                               r * std::cos(phi) * std::sin(theta), r * std::sin(phi));
    worst = std::max(worst, (back - d).norm() / d.norm());
  }
  const Eigen::RowVector3d zero = spherical_of(0.0, 0.0, 0.0);
  const double t = clock.seconds();
  return {worst <= 1e-9 && zero.isZero(0) && t < 1.0,
          fmt("10000 vectors, max relative error %.3g (limit 1e-9), zero -> (%g, %g, %g), "
              "%.3f s (limit 1 s)",
              worst, zero(0), zero(1), zero(2), t)};
}

// ---------------------------------------------------------------- 3

Outcome selection_optimality() {
  std::mt19937_64 rng(303);
  int order_violations = 0, oracle_disagreements = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + int(rng() % 400);
    const int k = 1 + int(rng() % std::uint64_t(n));
    // A third of the sets draw from a handful of levels so ties are common.
    const int levels = trial % 3 == 0 ? 1 + int(rng() % 6) : 0;
    SphericalMotion<double> sm;
    sm.positions = Points3<double>::Random(n, 3);
    sm.channels = (Points3<double>::Random(n, 3).array() + 1.0) / 2.0;
    sm.amplitude.resize(n);
    std::uniform_real_distribution<double> amp(0, 0.01);
    for (int i = 0; i < n; ++i) {
      sm.amplitude(i) = levels ? 0.001 * double(rng() % std::uint64_t(levels)) : amp(rng);
      sm.pixel_index.push_back({i, 0});
    }
    sm.normalized = true;
    PipelineConfig cfg;
    cfg.k = k;
    const FeatureSet f = rank_and_select(sm, cfg);

    std::vector<char> chosen(std::size_t(n), 0);
    double min_selected = INFINITY, max_unselected = -INFINITY;
    for (const auto& p : f.pixel_index) chosen[std::size_t(p.u)] = 1;
    for (int i = 0; i < n; ++i) {
      if (chosen[std::size_t(i)])
        min_selected = std::min(min_selected, sm.amplitude(i));
      else
        max_unselected = std::max(max_unselected, sm.amplitude(i));
    }
    if (min_selected < max_unselected) ++order_violations;

    std::vector<int> oracle(static_cast<std::size_t>(n));
    std::iota(oracle.begin(), oracle.end(), 0);
    std::stable_sort(oracle.begin(), oracle.end(),
                     [&](int a, int b) { return sm.amplitude(a) > sm.amplitude(b); });
    for (int i = 0; i < k; ++i)
      if (f.pixel_index[std::size_t(i)].u != oracle[std::size_t(i)]) {
        ++oracle_disagreements;
        break;
      }
  }
  return {order_violations == 0 && oracle_disagreements == 0,
          fmt("1000 sets, %d order violations, %d disagreements with the stable-sort oracle",
              order_violations, oracle_disagreements)};
}

// ---------------------------------------------------------------- 4

Outcome gradient_check() {
  Clock clock;
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> pos(-1, 1), ch(0, 1);
  auto cloud = [&](int label) {
    FeatureSet f;
    f.features.resize(3, 6);
    for (int i = 0; i < 3; ++i) {
      for (int c = 0; c < 3; ++c) f.features(i, c) = pos(rng);
      for (int c = 3; c < 6; ++c) f.features(i, c) = ch(rng);
    }
    f.label = label;
    return f;
  };
  ModelConfig cfg;
  cfg.variant = Variant::pointnet2;
  cfg.sa_levels = {{2, 10.0, 3, {4, 4}}};
  cfg.head_widths = {4};
  cfg.class_count = 3;
  cfg.rng_seed = 9;
  PointModel model = init_model(cfg);
  // Random biases keep pre-activations off the ReLU kink, where the zero
  // initial biases would otherwise pin a dead layer's outputs.
  std::uniform_real_distribution<double> bias(-0.1, 0.1);
  for (auto& layer : model.layers)
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = bias(rng);
  const std::vector<FeatureSet> batch{cloud(0), cloud(2)};
  const LossAndGradients lg = loss_and_gradients(model, batch);

  const double h = 1e-5;
  double worst = 0;
  long checked = 0, failed = 0;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto probe = [&](double& param, double analytic) {
      const double keep = param;
      param = keep + h;
      const double up = loss_and_gradients(model, batch).loss;
      param = keep - h;
      const double down = loss_and_gradients(model, batch).loss;
      param = keep;
      const double numeric = (up - down) / (2 * h);
      const double scale = std::max(std::abs(numeric), std::abs(analytic));
      const double err = std::abs(numeric - analytic);
      // Absolute floor only for components that are zero (inactive ReLUs).
      if (err > 1e-4 * scale + 1e-9) ++failed;
      if (scale > 1e-6) worst = std::max(worst, err / scale);
      ++checked;
    };
    DenseLayer& layer = model.layers[l];
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i)
      probe(layer.weight.data()[i], lg.gradients[l].weight.data()[i]);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
      probe(layer.bias.data()[i], lg.gradients[l].bias.data()[i]);
  }
  const double t = clock.seconds();
  return {failed == 0 && checked == long(model.parameter_count()) && t < 10.0,
          fmt("%ld parameters, %ld outside tolerance, max relative error %.3g (limit 1e-4), "
              "%.2f s (limit 10 s)",
              checked, failed, worst, t)};
}

// ---------------------------------------------------------------- 5

Outcome metric_oracle() {
  std::mt19937_64 rng(505);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int classes = 2 + int(rng() % 5);
    std::vector<std::pair<int, int>> pairs;
    for (int c = 0; c < classes; ++c) pairs.emplace_back(c, int(rng() % classes));
    const int extra = int(rng() % 80);
    for (int i = 0; i < extra; ++i) pairs.emplace_back(int(rng() % classes), int(rng() % classes));
    ConfusionMatrix cm(std::vector<std::string>(std::size_t(classes), "c"));
    for (auto [t, p] : pairs) cm.add(t, p);

    double f1_sum = 0, recall_sum = 0;
    for (int c = 0; c < classes; ++c) {
      long tp = 0, fp = 0, fn = 0, n = 0;
      for (auto [t, p] : pairs) {
        tp += t == c && p == c;
        fp += t != c && p == c;
        fn += t == c && p != c;
        n += t == c;
      }
      f1_sum += 2 * tp + fp + fn == 0 ? 0.0 : double(2 * tp) / double(2 * tp + fp + fn);
      recall_sum += double(tp) / double(n);
    }
    if (uf1(cm) != f1_sum / classes || uar(cm) != recall_sum / classes) ++mismatches;
  }
  using Counts = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>;
  Counts a(2, 2), b(2, 2);
  a << 1, 0, 1, 1;  // TP = (1, 1), FP = (1, 0), FN = (0, 1)
  b << 1, 1, 0, 2;
  const double hand_uf1 = uf1(ConfusionMatrix::from_counts(a));
  const double hand_uar = uar(ConfusionMatrix::from_counts(b));
  return {mismatches == 0 && hand_uf1 == 2.0 / 3.0 && hand_uar == 0.75,
          fmt("1000 settings, %d inexact; hand cases UF1 = %.17g, UAR = %.17g", mismatches,
              hand_uf1, hand_uar)};
}

// ---------------------------------------------------------------- 6

struct Localization {
  Outcome outcome;
  std::string report;  // per-sample fractions, compared for determinism
};

Localization synthetic_localization() {
  const SyntheticSpec noisy = SyntheticSpec::standard();
  SyntheticSpec clean = noisy;
  clean.noise_sigma = 0;
  const PipelineConfig cfg;
  double clean_worst = 1, noisy_worst = 1;
  std::string text = "sample_id\tclean_in_mask\tnoisy_in_dilated_mask\n";
  auto fraction = [&](const SyntheticSpec& spec, int s, int c, int r, int dilation) {
    const SyntheticSample x = generate_sample(spec, s, c, r);
    const CameraIntrinsicsd intr{spec.focal_length, spec.focal_length,
                                 x.crop.left + (x.crop.width - 1) / 2.0,
                                 x.crop.top + (x.crop.height - 1) / 2.0, spec.depth_scale};
    PipelineConfig local = cfg;
    local.rng_seed = sample_seed(cfg, x.truth.sample_id);
    const FeatureSet f = extract_features(x.onset, x.apex, x.crop, intr, local);
    const MaskGrid mask = dilation ? dilate(x.truth.moved, dilation) : x.truth.moved;
    long inside = 0;
    for (const auto& p : f.pixel_index) inside += mask(p.v + x.crop.top, p.u + x.crop.left);
    return std::pair{x.truth.sample_id, double(inside) / double(f.k())};
  };
  for (int s = 0; s < noisy.subjects; ++s)
    for (int c = 0; c < int(noisy.classes.size()); ++c)
      for (int r = 0; r < noisy.samples_per_class; ++r) {
        const auto [id, a] = fraction(clean, s, c, r, 0);
        const auto [id2, b] = fraction(noisy, s, c, r, 2);
        clean_worst = std::min(clean_worst, a);
        noisy_worst = std::min(noisy_worst, b);
        text += fmt("%s\t%.17g\t%.17g\n", id.c_str(), a, b);
      }
  return {{clean_worst == 1.0 && noisy_worst >= 0.9,
           fmt("48 samples, worst noise-free fraction inside mask %.4f (need 1), worst noisy "
               "fraction inside 2-px dilated mask %.4f (need >= 0.90)",
               clean_worst, noisy_worst)},
          text};
}

// ------------------------------------------------------------- 7 and 8

struct LosoRun {
  MetricsReport report;
  std::string bytes;  // report JSON followed by the text form
  double seconds = 0;
  std::size_t cache_hits = 0;
};

LosoRun synthetic_loso(const fs::path& corpus, const fs::path& cache, Selection selection) {
  Clock clock;
  const Manifest m = load_manifest(corpus / "manifest.json");
  PipelineConfig pipeline;
  pipeline.selection = selection;
  EvaluationOptions opts;
  opts.cache_dir = cache;
  const ExtractionResult ex = extract_manifest(m, pipeline, opts);
  if (!ex.failures.empty()) throw ValidationError("extraction failed: " + ex.failures[0].message);
  TrainConfig train;
  train.epochs = kSyntheticEpochs;
  const MetricsReport r =
      run_loso(ex.samples, m.class_vocabulary, ModelConfig::pointnet2_lite(3), train, opts);
  return {r, report_to_json(r).dump(2) + "\n" + report_to_text(r), clock.seconds(),
          ex.cache_hits};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path work = fs::temp_directory_path() / "depthmer-acceptance";
  std::vector<int> expected_fail;
  app.add_option("--work-dir", work, "scratch directory, wiped at start");
  // Strict: the exit status is 0 only when the failing criteria are exactly
  // this list, so a criterion that starts passing gets noticed.
  app.add_option("--expected-fail", expected_fail, "criteria known to fail")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  fs::remove_all(work);
  fs::create_directories(work);
  report(1, "geometry round trip", geometry_round_trip());
  report(2, "spherical inverse", spherical_inverse());
  report(3, "selection optimality", selection_optimality());
  report(4, "gradient check", gradient_check());
  report(5, "metric oracle", metric_oracle());

  const Localization loc = synthetic_localization();
  report(6, "synthetic localization", loc.outcome);

  // Criterion 7 times everything from writing the corpus to the report.
  Clock c7;
  const fs::path corpus = work / "corpus";
  const fs::path cache = work / "cache";
  generate_corpus(SyntheticSpec::standard(), corpus);
  LosoRun sorted = synthetic_loso(corpus, cache, Selection::sorted);
  const double t7 = c7.seconds();
  report(7, "synthetic LOSO",
               {sorted.report.uf1 >= 0.9 && sorted.report.uar >= 0.9 && t7 < 300,
                fmt("8 subjects x 3 classes x 2, pointnet2-lite, %d epochs: UF1 %.4f, UAR %.4f "
                    "(need >= 0.90), %.1f s (limit 300 s)",
                    kSyntheticEpochs, sorted.report.uf1, sorted.report.uar, t7)});

  const LosoRun random = synthetic_loso(corpus, cache, Selection::random);
  const double gap = sorted.report.uf1 - random.report.uf1;
  report(8, "ablation direction",
               {gap >= 0.05, fmt("sorted-2048 UF1 %.4f, random-2048 UF1 %.4f, gap %.4f "
                                 "(need >= 0.05)",
                                 sorted.report.uf1, random.report.uf1, gap)});

  // Repeat 6 to 8 with the same seeds. The LOSO repeats read the features
  // back from the cache written by the first pass.
  const Localization loc2 = synthetic_localization();
  const LosoRun sorted2 = synthetic_loso(corpus, cache, Selection::sorted);
  const LosoRun random2 = synthetic_loso(corpus, cache, Selection::random);
  write_text_atomic(work / "localization.txt", loc.report);
  write_text_atomic(work / "loso_sorted.txt", sorted.bytes);
  write_text_atomic(work / "loso_random.txt", random.bytes);
  const bool same6 = loc.report == loc2.report;
  const bool same7 = sorted.bytes == sorted2.bytes;
  const bool same8 = random.bytes == random2.bytes;
  report(9, "determinism",
               {same6 && same7 && same8,
                fmt("repeat identical: localization %s, sorted LOSO %s, random LOSO %s "
                    "(%zu + %zu cached records reused)",
                    same6 ? "yes" : "no", same7 ? "yes" : "no", same8 ? "yes" : "no",
                    sorted2.cache_hits, random2.cache_hits)});

  std::sort(expected_fail.begin(), expected_fail.end());
  expected_fail.erase(std::unique(expected_fail.begin(), expected_fail.end()), expected_fail.end());
  if (failed.empty()) {
    std::cout << "all criteria passed" << std::endl;
  } else {
    std::cout << "failed criteria:";
    for (int id : failed) std::cout << " " << id;
    std::cout << std::endl;
  }
  if (failed == expected_fail) {
    if (!failed.empty()) std::cout << "every failure is listed in --expected-fail" << std::endl;
    return 0;
  }
  for (int id : expected_fail)
    if (!std::binary_search(failed.begin(), failed.end(), id))
      std::cout << "criterion " << id << " passed but is listed in --expected-fail" << std::endl;
  return 1;
}
