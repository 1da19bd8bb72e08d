#include "depthmer/point_network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace depthmer {

namespace {

void check_widths(const std::vector<int>& widths, const char* what) {
  for (int w : widths)
    if (w < 1) throw ConfigError(std::string(what) + " widths must be >= 1");
}

}  // namespace

ModelConfig ModelConfig::pointnet2_default(int class_count) {
  ModelConfig c;
  c.variant = Variant::pointnet2;
  c.sa_levels = {{256, 0.2, 32, {64, 64, 128}}, {64, 0.4, 64, {128, 128, 256}}};
  c.global_widths = {256, 512, 1024};
  c.head_widths = {512, 256};
  c.class_count = class_count;
  return c;
}

ModelConfig ModelConfig::pointnet2_lite(int class_count) {
  ModelConfig c;
  c.variant = Variant::pointnet2;
  c.sa_levels = {{128, 0.2, 16, {32, 32, 64}}, {32, 0.4, 32, {64, 64, 128}}};
  c.global_widths = {128, 256};
  c.head_widths = {128, 64};
  c.class_count = class_count;
  return c;
}

ModelConfig ModelConfig::pointnet_default(int class_count) {
  ModelConfig c;
  c.variant = Variant::pointnet;
  c.global_widths = {64, 128, 256};
  c.head_widths = {128, 64};
  c.class_count = class_count;
  return c;
}

void ModelConfig::validate() const {
  if (class_count < 2) throw ConfigError("class_count must be >= 2");
  if (input_points < 0) throw ConfigError("input_points must be >= 0");
  check_widths(global_widths, "global");
  check_widths(head_widths, "head");
  if (variant == Variant::pointnet) {
    if (!sa_levels.empty()) throw ConfigError("pointnet variant takes no set-abstraction levels");
    if (global_widths.empty()) throw ConfigError("pointnet variant needs a non-empty shared MLP");
    return;
  }
  if (sa_levels.empty()) throw ConfigError("pointnet2 variant needs at least one SA level");
  for (std::size_t i = 0; i < sa_levels.size(); ++i) {
    const auto& level = sa_levels[i];
    if (level.centroids < 1) throw ConfigError("SA centroid count must be >= 1");
    if (!(level.radius > 0)) throw ConfigError("SA radius must be > 0");
    if (level.group_size < 1) throw ConfigError("SA group size must be >= 1");
    if (level.widths.empty()) throw ConfigError("SA MLP widths must be non-empty");
    check_widths(level.widths, "SA");
    if (i > 0 && level.centroids >= sa_levels[i - 1].centroids)
      throw ConfigError("SA centroid counts must decrease strictly across levels");
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
}

std::vector<std::pair<int, int>> layer_shapes(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<int, int>> shapes;
  auto chain = [&](int in, const std::vector<int>& widths) {
    for (int w : widths) {
      shapes.emplace_back(w, in);
      in = w;
    }
    return in;
  };
  int width = 0;
  if (config.variant == Variant::pointnet) {
    width = chain(6, config.global_widths);
  } else {
    width = 3;  // input channels
    for (const auto& level : config.sa_levels) width = chain(3 + width, level.widths);
    if (!config.global_widths.empty()) width = chain(3 + width, config.global_widths);
  }
  width = chain(width, config.head_widths);
  shapes.emplace_back(config.class_count, width);
  return shapes;
}

std::size_t PointModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += std::size_t(l.weight.size() + l.bias.size());
  return n;
}

bool PointModel::finite() const {
  return std::all_of(layers.begin(), layers.end(), [](const DenseLayer& l) {
    return l.weight.allFinite() && l.bias.allFinite();
  });
}

PointModel zero_model(const ModelConfig& config) {
  PointModel model;
  model.config = config;
  for (auto [out, in] : layer_shapes(config))
    model.layers.push_back({Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)});
  return model;
}

PointModel init_model(const ModelConfig& config) {
  PointModel model = zero_model(config);
  std::mt19937_64 rng(config.rng_seed);
  for (auto& layer : model.layers) {
    const double limit =
        std::sqrt(6.0 / double(layer.weight.rows() + layer.weight.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    // Column-major fill order is part of the seeded contract.
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
  }
  return model;
}

std::vector<Eigen::Index> farthest_point_sample(const Points3<double>& points, int count,
                                                Eigen::Index start) {
  const Eigen::Index n = points.rows();
  if (count < 1 || count > n)
    throw ShapeError("farthest_point_sample: requested " + std::to_string(count) +
                     " of " + std::to_string(n) + " points");
  if (start < 0 || start >= n) throw ShapeError("farthest_point_sample: bad start index");
  std::vector<Eigen::Index> picked;
  picked.reserve(std::size_t(count));
  picked.push_back(start);
  Eigen::VectorXd nearest = (points.rowwise() - points.row(start)).rowwise().squaredNorm();
  while (int(picked.size()) < count) {
    Eigen::Index best = 0;
    double best_dist = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (nearest(i) > best_dist) {
        best_dist = nearest(i);
        best = i;
      }
    }
    picked.push_back(best);
    nearest = nearest.cwiseMin((points.rowwise() - points.row(best)).rowwise().squaredNorm());
  }
  return picked;
}

std::vector<Eigen::Index> farthest_point_sample(const Points3<double>& points, int count) {
  if (points.rows() == 0) throw ShapeError("farthest_point_sample: no points");
  const Eigen::VectorXd norms = points.rowwise().squaredNorm();
  Eigen::Index start = 0;
  for (Eigen::Index i = 1; i < norms.size(); ++i)
    if (norms(i) > norms(start)) start = i;
  return farthest_point_sample(points, count, start);
}

std::vector<std::vector<Eigen::Index>> ball_query(const Points3<double>& points,
                                                  std::span<const Eigen::Index> centroids,
                                                  double radius, int group_size) {
  if (!(radius > 0)) throw ConfigError("ball_query: radius must be > 0");
  if (group_size < 1) throw ConfigError("ball_query: group_size must be >= 1");
  const double r2 = radius * radius;
  std::vector<std::vector<Eigen::Index>> groups;
  groups.reserve(centroids.size());
  for (Eigen::Index c : centroids) {
    std::vector<Eigen::Index> group;
    group.reserve(std::size_t(group_size));
    for (Eigen::Index i = 0; i < points.rows() && int(group.size()) < group_size; ++i)
      if ((points.row(i) - points.row(c)).squaredNorm() <= r2) group.push_back(i);
    if (group.empty()) group.push_back(c);
    const Eigen::Index first = group.front();
    group.resize(std::size_t(group_size), first);
    groups.push_back(std::move(group));
  }
  return groups;
}

GroupingPlan plan_grouping(const ModelConfig& config, const FeatureSet& feats) {
  GroupingPlan plan;
  if (config.variant == Variant::pointnet) return plan;
  Points3<double> xyz = feats.features.leftCols(3);
  for (const auto& level : config.sa_levels) {
    GroupingPlan::Level lp;
    lp.centroids = farthest_point_sample(xyz, level.centroids);
    const auto groups = ball_query(xyz, lp.centroids, level.radius, level.group_size);
    lp.members.reserve(lp.centroids.size() * std::size_t(level.group_size));
    lp.relative.resize(3, Eigen::Index(lp.centroids.size()) * level.group_size);
    Eigen::Index col = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (Eigen::Index m : groups[g]) {
        lp.members.push_back(m);
        lp.relative.col(col++) = (xyz.row(m) - xyz.row(lp.centroids[g])).transpose();
      }
    }
    xyz = detail::take_rows(xyz, lp.centroids);
    plan.levels.push_back(std::move(lp));
  }
  plan.final_xyz = xyz.transpose();
  return plan;
}

namespace {

/// Activations of one shared MLP: input and the post-ReLU output of each layer.
struct MlpTrace {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> outputs;
};

/// Column-wise max over consecutive blocks of `group` columns.
struct PoolTrace {
  std::vector<Eigen::Index> argmax;  // rows * blocks, column-major over (row, block)
};

struct Trace {
  std::vector<MlpTrace> levels;
  std::vector<PoolTrace> level_pools;
  MlpTrace global;
  PoolTrace global_pool;
  bool has_global = false;
  std::vector<Eigen::VectorXd> head_inputs;
};

std::size_t layer_offset_global(const ModelConfig& c) {
  std::size_t n = 0;
  for (const auto& l : c.sa_levels) n += l.widths.size();
  return n;
}

Eigen::MatrixXd run_mlp(const PointModel& model, std::size_t first, std::size_t count,
                        Eigen::MatrixXd input, MlpTrace* trace) {
  Eigen::MatrixXd act = std::move(input);
  if (trace) trace->input = act;
  for (std::size_t l = first; l < first + count; ++l) {
    const auto& layer = model.layers[l];
    Eigen::MatrixXd next = layer.weight * act;
    next.colwise() += layer.bias;
    next = next.cwiseMax(0.0);
    if (trace) trace->outputs.push_back(next);
    act = std::move(next);
  }
  return act;
}

Eigen::MatrixXd max_pool(const Eigen::MatrixXd& act, Eigen::Index group, PoolTrace* trace) {
  const Eigen::Index blocks = act.cols() / group;
  Eigen::MatrixXd pooled(act.rows(), blocks);
  if (trace) trace->argmax.resize(std::size_t(act.rows() * blocks));
  for (Eigen::Index b = 0; b < blocks; ++b) {
    for (Eigen::Index r = 0; r < act.rows(); ++r) {
      Eigen::Index best = b * group;
      double value = act(r, best);
      for (Eigen::Index c = best + 1; c < (b + 1) * group; ++c) {
        if (act(r, c) > value) {
          value = act(r, c);
          best = c;
        }
      }
      pooled(r, b) = value;
      if (trace) trace->argmax[std::size_t(b * act.rows() + r)] = best;
    }
  }
  return pooled;
}

Eigen::MatrixXd unpool(const Eigen::MatrixXd& grad, const PoolTrace& trace, Eigen::Index cols) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(grad.rows(), cols);
  for (Eigen::Index b = 0; b < grad.cols(); ++b)
    for (Eigen::Index r = 0; r < grad.rows(); ++r)
      out(r, trace.argmax[std::size_t(b * grad.rows() + r)]) += grad(r, b);
  return out;
}

/// Backpropagates through an MLP, accumulating parameter gradients.
/// Returns the gradient with respect to the MLP input when `need_input`.
Eigen::MatrixXd backprop_mlp(const PointModel& model, std::size_t first, const MlpTrace& trace,
                             Eigen::MatrixXd grad, Gradients& grads, bool need_input) {
  for (std::size_t i = trace.outputs.size(); i-- > 0;) {
    const Eigen::MatrixXd& out = trace.outputs[i];
    const Eigen::MatrixXd& in = i == 0 ? trace.input : trace.outputs[i - 1];
    grad = (out.array() > 0.0).select(grad, 0.0);
    auto& g = grads[first + i];
    g.weight.noalias() += grad * in.transpose();
    g.bias += grad.rowwise().sum();
    if (i == 0 && !need_input) return {};
    grad = model.layers[first + i].weight.transpose() * grad;
  }
  return grad;
}

void check_input(const ModelConfig& config, const FeatureSet& feats) {
  if (feats.features.cols() != 6) throw ShapeError("feature rows must have 6 columns");
  if (feats.features.rows() == 0) throw ShapeError("feature set has no rows");
  if (config.input_points != 0 && feats.features.rows() != config.input_points)
    throw ShapeError("model expects " + std::to_string(config.input_points) +
                     " input points, got " + std::to_string(feats.features.rows()));
}

Eigen::VectorXd run(const PointModel& model, const FeatureSet& feats, const GroupingPlan& plan,
                    Trace* trace) {
  const ModelConfig& c = model.config;
  check_input(c, feats);
  if (c.variant == Variant::pointnet2 && plan.levels.size() != c.sa_levels.size())
    throw ShapeError("grouping plan does not match the model's SA levels");
  Eigen::VectorXd global;
  const std::size_t g0 = layer_offset_global(c);

  if (c.variant == Variant::pointnet) {
    MlpTrace* t = trace ? &trace->global : nullptr;
    Eigen::MatrixXd act =
        run_mlp(model, 0, c.global_widths.size(), feats.features.transpose(), t);
    global = max_pool(act, act.cols(), trace ? &trace->global_pool : nullptr).col(0);
    if (trace) trace->has_global = true;
  } else {
    Eigen::MatrixXd level_features = feats.features.rightCols(3).transpose();
    std::size_t layer = 0;
    if (trace) {
      trace->levels.resize(c.sa_levels.size());
      trace->level_pools.resize(c.sa_levels.size());
    }
    for (std::size_t l = 0; l < c.sa_levels.size(); ++l) {
      const auto& lp = plan.levels[l];
      const Eigen::Index d = level_features.rows();
      Eigen::MatrixXd grouped(3 + d, Eigen::Index(lp.members.size()));
      grouped.topRows(3) = lp.relative;
      for (std::size_t j = 0; j < lp.members.size(); ++j)
        grouped.block(3, Eigen::Index(j), d, 1) = level_features.col(lp.members[j]);
      const std::size_t width_count = c.sa_levels[l].widths.size();
      Eigen::MatrixXd act = run_mlp(model, layer, width_count, std::move(grouped),
                                    trace ? &trace->levels[l] : nullptr);
      level_features = max_pool(act, c.sa_levels[l].group_size,
                                trace ? &trace->level_pools[l] : nullptr);
      layer += width_count;
    }
    if (!c.global_widths.empty()) {
      Eigen::MatrixXd input(3 + level_features.rows(), level_features.cols());
      input << plan.final_xyz, level_features;
      Eigen::MatrixXd act = run_mlp(model, g0, c.global_widths.size(), std::move(input),
                                    trace ? &trace->global : nullptr);
      global = max_pool(act, act.cols(), trace ? &trace->global_pool : nullptr).col(0);
      if (trace) trace->has_global = true;
    } else {
      // Pool the last level directly; reuse global_pool for its argmax.
      global = max_pool(level_features, level_features.cols(),
                        trace ? &trace->global_pool : nullptr)
                   .col(0);
    }
  }

  std::size_t layer = g0 + c.global_widths.size();
  Eigen::VectorXd h = std::move(global);
  for (; layer < model.layers.size(); ++layer) {
    if (trace) trace->head_inputs.push_back(h);
    const auto& dense = model.layers[layer];
    Eigen::VectorXd next = dense.weight * h + dense.bias;
    if (layer + 1 < model.layers.size()) next = next.cwiseMax(0.0);
    h = std::move(next);
  }
  return h;
}

void backward(const PointModel& model, const GroupingPlan& plan, const Trace& trace,
              const Eigen::VectorXd& dlogits, Gradients& grads) {
  const ModelConfig& c = model.config;
  const std::size_t g0 = layer_offset_global(c);
  const std::size_t head0 = g0 + c.global_widths.size();

  Eigen::VectorXd grad = dlogits;
  for (std::size_t i = model.layers.size(); i-- > head0;) {
    if (i + 1 < model.layers.size()) {
      // grad is w.r.t. this layer's post-ReLU output, which feeds layer i + 1
      const Eigen::VectorXd& out = trace.head_inputs[i - head0 + 1];
      grad = (out.array() > 0.0).select(grad, 0.0);
    }
    grads[i].weight.noalias() += grad * trace.head_inputs[i - head0].transpose();
    grads[i].bias += grad;
    grad = model.layers[i].weight.transpose() * grad;
  }
  // grad is now w.r.t. the global feature vector.

  if (c.variant == Variant::pointnet) {
    const Eigen::Index cols = trace.global.outputs.back().cols();
    backprop_mlp(model, 0, trace.global, unpool(grad, trace.global_pool, cols), grads, false);
    return;
  }

  Eigen::MatrixXd level_grad;
  if (trace.has_global) {
    const Eigen::Index cols = trace.global.outputs.back().cols();
    Eigen::MatrixXd din =
        backprop_mlp(model, g0, trace.global, unpool(grad, trace.global_pool, cols), grads, true);
    level_grad = din.bottomRows(din.rows() - 3);
  } else {
    const Eigen::Index cols = Eigen::Index(plan.levels.back().centroids.size());
    level_grad = unpool(grad, trace.global_pool, cols);
  }

  std::size_t layer = g0;
  for (std::size_t l = c.sa_levels.size(); l-- > 0;) {
    layer -= c.sa_levels[l].widths.size();
    const MlpTrace& mt = trace.levels[l];
    const Eigen::Index cols = mt.outputs.back().cols();
    Eigen::MatrixXd din = backprop_mlp(model, layer, mt,
                                       unpool(level_grad, trace.level_pools[l], cols), grads,
                                       l > 0);
    if (l == 0) break;
    // Scatter the feature rows of the grouped-input gradient back onto the
    // previous level's pooled features.
    const auto& members = plan.levels[l].members;
    const Eigen::Index d = din.rows() - 3;
    const Eigen::Index prev_cols = Eigen::Index(plan.levels[l - 1].centroids.size());
    Eigen::MatrixXd prev = Eigen::MatrixXd::Zero(d, prev_cols);
    for (std::size_t j = 0; j < members.size(); ++j)
      prev.col(members[j]) += din.block(3, Eigen::Index(j), d, 1);
    level_grad = std::move(prev);
  }
}

Gradients zero_like(const PointModel& model) {
  Gradients g;
  g.reserve(model.layers.size());
  for (const auto& l : model.layers)
    g.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                 Eigen::VectorXd::Zero(l.bias.size())});
  return g;
}

/// Cross-entropy of one sample; writes softmax - onehot into `dlogits`.
double cross_entropy(const Eigen::VectorXd& logits, int label, Eigen::VectorXd& dlogits) {
  const double top = logits.maxCoeff();
  const Eigen::VectorXd shifted = logits.array() - top;
  const Eigen::VectorXd e = shifted.array().exp();
  const double sum = e.sum();
  dlogits = e / sum;
  dlogits(label) -= 1.0;
  return std::log(sum) - shifted(label);
}

}  // namespace

Eigen::VectorXd forward(const PointModel& model, const FeatureSet& feats,
                        const GroupingPlan& plan) {
  return run(model, feats, plan, nullptr);
}

Eigen::VectorXd forward(const PointModel& model, const FeatureSet& feats) {
  check_input(model.config, feats);
  return run(model, feats, plan_grouping(model.config, feats), nullptr);
}

LossAndGradients loss_and_gradients(const PointModel& model,
                                    std::span<const FeatureSet* const> batch,
                                    std::span<const GroupingPlan* const> plans) {
  if (batch.empty()) throw EmptyInputError("loss_and_gradients: empty batch");
  if (plans.size() != batch.size()) throw ShapeError("one grouping plan per sample required");
  LossAndGradients out;
  out.gradients = zero_like(model);
  const double scale = 1.0 / double(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FeatureSet& feats = *batch[i];
    if (!feats.label || *feats.label < 0 || *feats.label >= model.config.class_count)
      throw LabelError("sample '" + feats.sample_id + "' has no label in [0, " +
                       std::to_string(model.config.class_count) + ")");
    Trace trace;
    const Eigen::VectorXd logits = run(model, feats, *plans[i], &trace);
    Eigen::VectorXd dlogits;
    out.loss += scale * cross_entropy(logits, *feats.label, dlogits);
    backward(model, *plans[i], trace, scale * dlogits, out.gradients);
  }
  return out;
}

LossAndGradients loss_and_gradients(const PointModel& model,
                                    std::span<const FeatureSet> batch) {
  std::vector<GroupingPlan> plans;
  std::vector<const FeatureSet*> ptrs;
  std::vector<const GroupingPlan*> plan_ptrs;
  plans.reserve(batch.size());
  for (const auto& f : batch) {
    check_input(model.config, f);
    plans.push_back(plan_grouping(model.config, f));
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ptrs.push_back(&batch[i]);
    plan_ptrs.push_back(&plans[i]);
  }
  return loss_and_gradients(model, ptrs, plan_ptrs);
}

AdamState adam_init(const PointModel& model) {
  AdamState s;
  s.first_moment = zero_like(model);
  s.second_moment = zero_like(model);
  return s;
}

void adam_step(PointModel& model, const Gradients& gradients, AdamState& state,
               const TrainConfig& cfg) {
  if (gradients.size() != model.layers.size() ||
      state.first_moment.size() != model.layers.size())
    throw ShapeError("adam_step: gradient/state layout does not match the model");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v, double decay) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    auto step = (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
    param.array() -= cfg.learning_rate * (step + decay * param.array());
  };
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    update(model.layers[l].weight, gradients[l].weight, state.first_moment[l].weight,
           state.second_moment[l].weight, cfg.weight_decay);
    // Biases are not decayed.
    update(model.layers[l].bias, gradients[l].bias, state.first_moment[l].bias,
           state.second_moment[l].bias, 0.0);
  }
}

PointModel fit(PointModel model, std::span<const FeatureSet> train_set,
               const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw EmptyInputError("fit: empty training set");
  std::vector<GroupingPlan> plans;
  plans.reserve(train_set.size());
  for (const auto& f : train_set) {
    check_input(model.config, f);
    plans.push_back(plan_grouping(model.config, f));
  }
  AdamState state = adam_init(model);
  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::vector<const FeatureSet*> batch;
  std::vector<const GroupingPlan*> batch_plans;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(cfg.batch_size));
      batch.clear();
      batch_plans.clear();
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(&train_set[order[i]]);
        batch_plans.push_back(&plans[order[i]]);
      }
      const LossAndGradients lg = loss_and_gradients(model, batch, batch_plans);
      adam_step(model, lg.gradients, state, cfg);
    }
  }
  return model;
}

int argmax_class(const Eigen::VectorXd& logits) {
  if (logits.size() == 0) throw ShapeError("argmax of empty logits");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i)
    if (logits(i) > logits(best)) best = i;
  return int(best);
}

int predict(const PointModel& model, const FeatureSet& feats) {
  return argmax_class(forward(model, feats));
}

}  // namespace depthmer
