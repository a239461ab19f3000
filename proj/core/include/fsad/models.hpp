#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "fsad/archive.hpp"
#include "fsad/autograd.hpp"
#include "fsad/data.hpp"
#include "fsad/ops.hpp"
#include "fsad/stats.hpp"

namespace fsad::models {

enum class HeadKind { relation, cross_attention };

std::string to_string(HeadKind kind);
HeadKind head_from_string(const std::string& name);

enum class Mode { train, eval };

struct ModelConfig {
  HeadKind head = HeadKind::relation;
  Shape input_shape{3, 16, 16};
  int channels = 16;       // encoder width d_f
  int pooled_blocks = 2;   // leading encoder blocks followed by 2x2 max-pool
  int relation_channels = 32;
  int relation_hidden = 8;
  double init_temperature = 10.0;
  double init_attention_scale = 5.0;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct NamedVar {
  std::string name;
  ag::Var var;
};

/// conv3x3 -> batch norm -> ReLU -> optional 2x2 max-pool.
struct ConvBlock {
  ag::Var weight, bias, gamma, beta;
  mutable ag::NormStats stats;
  bool pool = false;

  /// Training mode normalises with batch statistics and updates `stats`.
  ag::Var apply(const ag::Var& x, bool training) const;
};

/// Metric-based few-shot classifier: a 4-block convolutional encoder shared
/// by support and query images, followed by a relation or cross-attention
/// head comparing per-class mean features with each query feature.
class FewShotModel {
 public:
  explicit FewShotModel(const ModelConfig& config);
  // Copies are deep: parameters are never shared between instances.
  FewShotModel(const FewShotModel& other);
  FewShotModel& operator=(const FewShotModel& other);
  FewShotModel(FewShotModel&&) noexcept = default;
  FewShotModel& operator=(FewShotModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  HeadKind head() const { return config_.head; }
  /// (d_f, h_f, w_f)
  const Shape& feature_shape() const { return feature_shape_; }

  /// images: (B, C, H, W) -> features (B, d_f, h_f, w_f).
  ag::Var encode(const ag::Var& images, Mode mode);
  ag::Var encode(const ag::Var& images) const;
  Tensor encode(const Tensor& images) const;

  /// Logits (Q, K) from support features (K*N, ...) and query features (Q, ...).
  ag::Var head_logits(const ag::Var& support_features, int ways, int shots, const ag::Var& query_features,
                      Mode mode);
  ag::Var head_logits(const ag::Var& support_features, int ways, int shots, const ag::Var& query_features) const;

  /// support: (K*N, C, H, W) class-major, queries: (Q, C, H, W) -> (Q, K).
  ag::Var classify(const ag::Var& support, int ways, int shots, const ag::Var& queries, Mode mode);
  ag::Var classify(const ag::Var& support, int ways, int shots, const ag::Var& queries) const;
  Tensor classify(const Tensor& support, int ways, int shots, const Tensor& queries) const;

  std::vector<NamedVar> parameters() const;
  /// Toggles gradient tracking on every trainable parameter. Frozen models
  /// only propagate gradients to their inputs.
  void set_trainable(bool trainable);
  /// True when no parameter tracks gradients.
  bool frozen() const;

  /// Hash of the training configuration that produced the parameters.
  const std::string& train_config_hash() const { return train_config_hash_; }
  void set_train_config_hash(std::string h) { train_config_hash_ = std::move(h); }

  Archive to_archive() const;
  static FewShotModel from_archive(const Archive& archive);
  /// Content hash over configuration, parameters and normalisation state.
  std::string hash() const;

 private:
  ag::Var encode_impl(const ag::Var& images, bool training) const;
  ag::Var head_impl(const ag::Var& support_features, int ways, int shots, const ag::Var& query_features,
                    bool training) const;
  void check_support(const ag::Var& support, int ways, int shots) const;
  std::vector<std::pair<std::string, const ConvBlock*>> blocks() const;

  ModelConfig config_;
  Shape feature_shape_;
  std::string train_config_hash_;
  std::vector<ConvBlock> encoder_;
  // relation head
  std::vector<ConvBlock> relation_blocks_;
  ag::Var fc1_w_, fc1_b_, fc2_w_, fc2_b_;
  // cross-attention head
  ag::Var attention_scale_, temperature_;
};

struct TrainConfig {
  int episodes_per_epoch = 20;
  int epochs = 30;
  int ways = 5;
  int shots = 5;
  int queries_per_class = 15;
  double learning_rate = 1e-3;
  int val_episodes = 20;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  std::string hash() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  FewShotModel model;
  std::vector<EpochRecord> history;
  int best_epoch = -1;  // -1 when no epoch ran
  double best_val_accuracy = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Episodic cross-entropy training with Adam; the returned model carries the
/// parameters of the epoch with the best validation accuracy and is frozen.
TrainResult train_episodic(FewShotModel model, const data::Dataset& train, const data::Dataset& val,
                           const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct AccuracyReport {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 * sd / sqrt(n)
  std::vector<double> per_episode;
};

using EpisodeLogits = std::function<Tensor(const data::Episode&)>;

/// Mean query accuracy over seeded episodes for any logits producer.
AccuracyReport evaluate_accuracy(const EpisodeLogits& logits, const data::Dataset& ds, int n_episodes, int ways,
                                 int shots, int queries, std::uint64_t seed);
AccuracyReport evaluate_accuracy(const FewShotModel& model, const data::Dataset& ds, int n_episodes, int ways,
                                 int shots, int queries, std::uint64_t seed);

/// Row-wise argmax of (B, K) logits.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace fsad::models
