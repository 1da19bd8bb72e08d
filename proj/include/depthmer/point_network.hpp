#pragma once

// Set-abstraction point classifier (PointNet and a two-level PointNet++-lite)
// with hand-written backpropagation and Adam.
//
// Activations are stored feature-major: a matrix of shape (channels x points),
// so every shared per-point MLP layer is a single GEMM.

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

#include "depthmer/motion_features.hpp"

namespace depthmer {

enum class Variant { pointnet, pointnet2 };

struct SetAbstractionLevel {
  int centroids = 0;
  double radius = 0;
  int group_size = 0;
  std::vector<int> widths;

  friend bool operator==(const SetAbstractionLevel&, const SetAbstractionLevel&) = default;
};

/// Topology of the classifier.
///
/// pointnet: a shared MLP (`global_widths`) over every input row of
/// (x, y, z, c1, c2, c3), a global max-pool, then the head.
///
/// pointnet2: each `sa_levels` entry samples centroids by farthest point
/// sampling, groups neighbours by ball query, runs a shared MLP on
/// (relative xyz, features) and max-pools per group. `global_widths` is then
/// applied to (xyz, features) of the last level's centroids before the global
/// max-pool; when empty, the last level's features are pooled directly.
///
/// `head_widths` lists the hidden fully connected widths; the final
/// class_count-wide layer is implied.
struct ModelConfig {
  Variant variant = Variant::pointnet2;
  std::vector<SetAbstractionLevel> sa_levels;
  std::vector<int> global_widths;
  std::vector<int> head_widths;
  int class_count = 3;
  int input_points = 0;  // required row count at inference; 0 = unchecked
  std::uint64_t rng_seed = 0;

  /// SA(256, 0.2, 32, [64,64,128]) -> SA(64, 0.4, 64, [128,128,256]) ->
  /// global [256,512,1024] -> head [512,256].
  static ModelConfig pointnet2_default(int class_count);
  /// Desk-scale topology: SA(128, 0.2, 16, [32,32,64]) ->
  /// SA(32, 0.4, 32, [64,64,128]) -> global [128,256] -> head [128,64].
  static ModelConfig pointnet2_lite(int class_count);
  /// Shared MLP [64,128,256] -> head [128,64].
  static ModelConfig pointnet_default(int class_count);

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  friend bool operator==(const DenseLayer& a, const DenseLayer& b) {
    return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
           a.weight == b.weight && a.bias == b.bias;
  }
};

/// Parameters in network order: every SA level's MLP, the global MLP, the head.
struct PointModel {
  ModelConfig config;
  std::vector<DenseLayer> layers;

  std::size_t parameter_count() const;
  bool finite() const;
  friend bool operator==(const PointModel&, const PointModel&) = default;
};

/// Layer shapes (out, in) implied by a config.
std::vector<std::pair<int, int>> layer_shapes(const ModelConfig& config);

/// Glorot-uniform weights, zero biases, seeded by config.rng_seed.
PointModel init_model(const ModelConfig& config);
/// Same shapes as the config with every parameter zero.
PointModel zero_model(const ModelConfig& config);

struct TrainConfig {
  double learning_rate = 0.001;
  double weight_decay = 0.0001;
  int batch_size = 24;
  int epochs = 40;
  std::uint64_t rng_seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

using Gradients = std::vector<DenseLayer>;

struct LossAndGradients {
  double loss = 0;
  Gradients gradients;
};

/// Greedy farthest point sampling. Starts at the point of largest norm and
/// always takes the point farthest from the chosen set; ties go to the lowest
/// index.
std::vector<Eigen::Index> farthest_point_sample(const Points3<double>& points, int count);
/// Same, from an explicit first index.
std::vector<Eigen::Index> farthest_point_sample(const Points3<double>& points, int count,
                                                Eigen::Index start);

/// Per centroid, up to group_size indices within radius in ascending order,
/// padded with the first hit; a centroid with no neighbours groups itself.
std::vector<std::vector<Eigen::Index>> ball_query(const Points3<double>& points,
                                                  std::span<const Eigen::Index> centroids,
                                                  double radius, int group_size);

/// Sampling and grouping of one input, fixed by its xyz rows alone.
struct GroupingPlan {
  struct Level {
    std::vector<Eigen::Index> centroids;  // into the previous level's points
    std::vector<Eigen::Index> members;    // centroids * group_size, group-major
    Eigen::MatrixXd relative;             // 3 x members: member xyz - centroid xyz
  };
  std::vector<Level> levels;
  Eigen::Matrix3Xd final_xyz;  // xyz of the last level's centroids
};

GroupingPlan plan_grouping(const ModelConfig& config, const FeatureSet& feats);

Eigen::VectorXd forward(const PointModel& model, const FeatureSet& feats);
Eigen::VectorXd forward(const PointModel& model, const FeatureSet& feats,
                        const GroupingPlan& plan);

/// Mean softmax cross-entropy over the batch and its exact gradient.
LossAndGradients loss_and_gradients(const PointModel& model,
                                    std::span<const FeatureSet> batch);
LossAndGradients loss_and_gradients(const PointModel& model,
                                    std::span<const FeatureSet* const> batch,
                                    std::span<const GroupingPlan* const> plans);

struct AdamState {
  Gradients first_moment;
  Gradients second_moment;
  long step = 0;
};

AdamState adam_init(const PointModel& model);
/// One Adam update with decoupled weight decay on the weight matrices.
void adam_step(PointModel& model, const Gradients& gradients, AdamState& state,
               const TrainConfig& cfg);

PointModel fit(PointModel model, std::span<const FeatureSet> train_set,
               const TrainConfig& cfg);

/// Argmax of the logits, lowest index on ties.
int argmax_class(const Eigen::VectorXd& logits);
int predict(const PointModel& model, const FeatureSet& feats);

}  // namespace depthmer
