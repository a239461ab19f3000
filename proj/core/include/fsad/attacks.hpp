#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "fsad/archive.hpp"
#include "fsad/data.hpp"
#include "fsad/models.hpp"

namespace fsad::attacks {

enum class AttackKind { pgd, cw_sgd };

std::string to_string(AttackKind kind);
AttackKind attack_from_string(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 12.0 / 255.0;  // l_inf bound (PGD) / initial noise range (CW-SGD), pixel units in [0, 1]
  double eta = 0.05;              // step size
  int iterations = 100;
  double kappa = 0.1;     // CW confidence margin
  double cw_const = 1.0;  // CW trade-off weight
  int queries_per_class = 15;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

/// Adversarial support of one target class together with everything needed
/// to replay it.
struct PerturbationRecord {
  int target_class = -1;
  std::string target_class_name;
  int ways = 0;
  int shots = 0;
  Tensor deltas;        // (N, C, H, W)
  Tensor base_support;  // (N, C, H, W) clean images the attack started from
  std::vector<int> base_sources;
  AttackConfig config;
  std::string model_hash;
  std::string dataset_hash;

  /// clip(base_support + deltas, 0, 1)
  Tensor adversarial_support() const;
  Archive to_archive() const;
  static PerturbationRecord from_archive(const Archive& archive);
};

/// Everything in an attack episode except the target support: the other
/// K-1 class supports and the target-class queries. The target occupies
/// slot 0.
struct AttackContext {
  int ways = 0;
  int shots = 0;
  Tensor other_support;   // ((K-1)*N, C, H, W)
  Tensor target_queries;  // (Q_t, C, H, W)
};

/// Splits an episode whose slot 0 is the target class.
AttackContext context_from_episode(const data::Episode& episode);

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // w.r.t. the target support only, (N, C, H, W)
};

/// PGD: mean cross-entropy of the target queries (to be ascended).
/// CW-SGD: mean untargeted margin max(-kappa, z_t - max_{i!=t} z_i) with t
/// the true class (to be descended).
LossAndGrad attack_loss(const models::FewShotModel& model, const Tensor& adv_support, const AttackContext& context,
                        AttackKind kind, double kappa);

/// Margin term max(-kappa, max_{i!=t} z_i - z_t) for one logit vector.
double cw_margin(std::span<const double> logits, int target, double kappa);

/// Episode used by gradient step `iteration` (1-based): the target support
/// `x` in slot 0, every other class and all queries drawn afresh.
data::Episode attack_episode(const data::Dataset& ds, int target_class, int ways, int shots, const Tensor& x,
                             const std::vector<int>& sources, const AttackConfig& cfg, int iteration);

/// Called with (iteration, current adversarial support); iteration 0 is the
/// initial point.
using IterateObserver = std::function<void(int, const Tensor&)>;

/// Draws a clean target support from `ds` and perturbs it, redrawing the
/// other classes and all queries in every iteration.
PerturbationRecord run_pgd(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                           int shots, const AttackConfig& cfg, const IterateObserver& observer = {});
PerturbationRecord run_cw_sgd(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                              int shots, const AttackConfig& cfg, const IterateObserver& observer = {});
PerturbationRecord run_attack(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                              int shots, const AttackConfig& cfg, const IterateObserver& observer = {});

/// Record with zero deltas; its ASR is the clean target-class error rate.
PerturbationRecord zero_record(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                               int shots, std::uint64_t seed);

enum class Scenario { fixed_supports, new_supports };

std::string to_string(Scenario scenario);
Scenario scenario_from_string(const std::string& name);

struct AsrReport {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_episode;
};

/// Fraction of target-class queries not predicted as the target, averaged
/// over freshly drawn episodes.
AsrReport evaluate_asr(const models::FewShotModel& model, const PerturbationRecord& record, const data::Dataset& ds,
                       Scenario scenario, int n_episodes, int queries_per_class, std::uint64_t seed);

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fsad::attacks
