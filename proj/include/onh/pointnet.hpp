#pragma once

#include "onh/cloud.hpp"
#include "onh/tensor.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

namespace onh {

struct PointNetArch {
  int in_channels = 4;
  std::vector<int> mlp1{64, 64};
  std::vector<int> mlp2{64, 128, 256};
  std::vector<int> head{128, 64};
  int classes = 2;
  double dropout = 0.3;
  bool input_tnet = false;
  bool feature_tnet = false;
  std::vector<int> tnet_mlp{64, 128, 256};
  std::vector<int> tnet_head{128, 64};
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  int global_dim() const { return mlp2.empty() ? (mlp1.empty() ? in_channels : mlp1.back()) : mlp2.back(); }
  bool operator==(const PointNetArch&) const = default;
};

/// Shared dense layer; batchnorm and ReLU follow unless disabled.
struct DenseLayer {
  tensor::Parameter W, b, gamma, beta;
  tensor::BatchNormState bn;
  bool use_bn = true;
  bool use_relu = true;
};

struct TNet {
  int k = 0;
  std::vector<DenseLayer> mlp, fc;
  DenseLayer out;  // k*k outputs, added to the identity
};

struct Inference {
  std::vector<double> logits;
  std::vector<tensor::Index> argmax;  // winning input row per global-feature dimension
};

class PointNetModel {
 public:
  PointNetModel() = default;
  PointNetModel(const PointNetArch& arch, std::uint64_t seed);

  const PointNetArch& arch() const { return arch_; }
  std::vector<tensor::Parameter*> parameters();
  /// Every named array, parameters and batchnorm statistics, in file order.
  std::vector<std::pair<std::string, tensor::Matrix*>> named_arrays();
  std::size_t parameter_count();

  /// Training-graph forward over a stacked batch. `reg` receives the feature
  /// transform orthogonality penalty when that T-Net is enabled.
  tensor::Var forward(tensor::Tape& tape, const tensor::Matrix& x, const tensor::Segments& seg, tensor::Mode mode,
                      std::mt19937_64& rng, std::optional<tensor::Var>* reg = nullptr);

  /// Inference-mode forward. Every per-point feature is computed by the same
  /// row-wise arithmetic, so logits are exactly invariant to point order and
  /// duplication.
  Inference infer(const FeatureMatrix& points) const;

  /// Probability of class 1.
  double score(const FeatureMatrix& points) const;

  nlohmann::json metadata;  // hyperparameters and provenance recorded in the model file

 private:
  PointNetArch arch_;
  std::optional<TNet> input_tnet_, feature_tnet_;
  std::vector<DenseLayer> mlp1_, mlp2_, head_;
};

struct TrainConfig {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999;
  int batch_size = 16;
  int epochs = 60;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  double train_fraction = 0.70, val_fraction = 0.15, test_fraction = 0.15;
  int folds = 5;
  bool cross_validate = true;
  double ortho_weight = 1e-3;
  std::size_t eval_points = 1024;  // points sampled per eye for evaluation, 0 = all
  unsigned threads = 1;            // evaluation fan-out across eyes
  PointNetArch arch;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct Confusion {
  int tp = 0, fp = 0, tn = 0, fn = 0;
};

struct EvalReport {
  double auc_mean = kNaN, auc_sd = kNaN;
  std::vector<double> fold_aucs;
  double test_auc = kNaN;
  Confusion confusion;
  int best_epoch = -1;
  std::vector<double> epoch_loss;     // final model, mean training loss per epoch
  std::vector<double> epoch_val_auc;  // final model, validation AUC per epoch
  std::vector<std::string> train_ids, val_ids, test_ids;
};

nlohmann::json to_json(const EvalReport& r);

struct LabeledCloud {
  const PointCloud* cloud = nullptr;
  int label = 0;  // 0 or 1
};

struct TrainResult {
  PointNetModel model;
  EvalReport report;
};

TrainResult train(const std::vector<LabeledCloud>& data, const TrainConfig& cfg);

/// Mann-Whitney AUC with ties counted one half.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Cloud as fed at evaluation time: a fixed per-eye subsample when eval_points > 0.
PointCloud evaluation_cloud(const PointCloud& cloud, std::size_t eval_points, std::uint64_t seed);

/// Scores for many clouds, fanned out across threads.
std::vector<double> score_all(const PointNetModel& model, const std::vector<const PointCloud*>& clouds,
                              std::size_t eval_points, std::uint64_t seed, unsigned threads);

void save_model(const PointNetModel& model, const std::filesystem::path& path);
PointNetModel load_model(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_model(const PointNetModel& model);
PointNetModel decode_model(const std::vector<std::uint8_t>& bytes);

}  // namespace onh
