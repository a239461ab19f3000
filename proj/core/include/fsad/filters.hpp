#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "fsad/archive.hpp"
#include "fsad/autograd.hpp"
#include "fsad/data.hpp"
#include "fsad/models.hpp"

namespace fsad::filters {

// `autoencoder` is the plain reconstruction autoencoder the FPA variants are
// fine-tuned from.
enum class FilterKind { identity, noise, median_2x2, autoencoder, fpa, fpa_prime };

std::string to_string(FilterKind kind);
FilterKind filter_from_string(const std::string& name);
bool needs_weights(FilterKind kind);

enum class LossVariant { standard_ae, fpa, fpa_prime };

std::string to_string(LossVariant variant);
LossVariant variant_from_string(const std::string& name);
FilterKind filter_kind(LossVariant variant);

/// Median of each 2x2 window anchored at the pixel, extending past the
/// bottom/right border by symmetric reflection. Even-count medians are the
/// mean of the two middle values. image: (C, H, W) or (B, C, H, W).
Tensor median_filter_2x2(const Tensor& image);

/// Adds zero-mean Gaussian noise whose variance per channel is that
/// channel's empirical variance over the whole support set, then clips to
/// [0, 1]. support: (B, C, H, W).
Tensor channel_noise(const Tensor& support, std::uint64_t seed);

struct AutoencoderConfig {
  Shape input_shape{3, 16, 16};
  int hidden = 32;
  int bottleneck = 16;
  int levels = 1;  // 2x2 pooling stages, 1 or 2
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static AutoencoderConfig from_json(const nlohmann::json& j);
};

/// Two conv-relu encoder layers and two conv decoder layers with a sigmoid
/// output; `levels` of them pool (encoder) or upsample (decoder). Height
/// and width must be divisible by 2^levels.
class Autoencoder {
 public:
  explicit Autoencoder(const AutoencoderConfig& config);
  Autoencoder(const Autoencoder& other);
  Autoencoder& operator=(const Autoencoder& other);
  Autoencoder(Autoencoder&&) noexcept = default;
  Autoencoder& operator=(Autoencoder&&) noexcept = default;

  const AutoencoderConfig& config() const { return config_; }
  LossVariant variant() const { return variant_; }
  void set_variant(LossVariant v) { variant_ = v; }
  /// Hash of the few-shot model whose features the loss preserved.
  const std::string& paired_model_hash() const { return paired_model_hash_; }
  void set_paired_model_hash(std::string h) { paired_model_hash_ = std::move(h); }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  /// (B, C, H, W) -> (B, C, H, W) in (0, 1).
  ag::Var reconstruct(const ag::Var& images) const;
  Tensor reconstruct(const Tensor& images) const;

  std::vector<models::NamedVar> parameters() const;
  void set_trainable(bool trainable);

  Archive to_archive() const;
  static Autoencoder from_archive(const Archive& archive);
  std::string hash() const;

 private:
  AutoencoderConfig config_;
  LossVariant variant_ = LossVariant::standard_ae;
  std::string paired_model_hash_;
  bool trained_ = false;
  ag::Var enc1_w_, enc1_b_, enc2_w_, enc2_b_, dec1_w_, dec1_b_, dec2_w_, dec2_b_;
};

/// Filter function r(.) mapping a support subset (B, C, H, W) to a subset
/// of identical shape with values in [0, 1].
class Filter {
 public:
  static Filter identity();
  static Filter noise();
  static Filter median();
  /// Wraps a trained autoencoder; the kind follows its loss variant.
  static Filter autoencoder(std::shared_ptr<const Autoencoder> model);

  FilterKind kind() const { return kind_; }
  /// `seed` only affects the noise filter.
  Tensor apply(const Tensor& support, std::uint64_t seed = 0) const;

 private:
  Filter(FilterKind kind, std::shared_ptr<const Autoencoder> ae) : kind_(kind), ae_(std::move(ae)) {}
  FilterKind kind_;
  std::shared_ptr<const Autoencoder> ae_;
};

class FilterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-sample reconstruction objective averaged over the batch:
///   0.01 * |x - x^|^2 / sqrt(dim x) + |f - f^|^2 / sqrt(dim f)
/// plus |z - z^|^2 / sqrt(dim z) when logits are given. Every argument has
/// a leading batch axis; `x`, `f` and `z` are treated as constants.
ag::Var fpa_objective(const ag::Var& x, const ag::Var& x_hat, const ag::Var& f, const ag::Var& f_hat,
                      const ag::Var* z = nullptr, const ag::Var* z_hat = nullptr);

/// Mean squared pixel error.
ag::Var reconstruction_mse(const ag::Var& x, const ag::Var& x_hat);

struct AutoencoderTrainConfig {
  int pretrain_epochs = 30;
  int finetune_epochs = 20;
  int batch_size = 25;
  double pretrain_lr = 1e-3;
  double finetune_lr = 1e-3;
  double weight_decay = 1e-4;
  int lr_step = 10;
  double lr_gamma = 0.1;
  // reference episode for the logits term
  int ways = 5;
  int shots = 5;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
};

struct AeEpochRecord {
  std::string phase;  // "pretrain" or "finetune"
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double best_val_loss = 0.0;
  bool improved = false;
};

struct AeTrainResult {
  Autoencoder model;
  std::vector<AeEpochRecord> history;
};

class AeTrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AeEpochCallback = std::function<void(const AeEpochRecord&)>;

/// Trains a plain autoencoder on pixel MSE (skipped when `pretrained` is
/// given), then fine-tunes it with the feature-preserving objective of
/// `variant`. Each phase keeps the weights with the lowest validation loss.
/// The few-shot model is used frozen and must be trained.
AeTrainResult train_autoencoder(const data::Dataset& train, const data::Dataset& val,
                                const models::FewShotModel& few_shot, LossVariant variant,
                                const AutoencoderConfig& ae_config, const AutoencoderTrainConfig& cfg,
                                const Autoencoder* pretrained = nullptr, const AeEpochCallback& on_epoch = {});

}  // namespace fsad::filters
