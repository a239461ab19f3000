#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fsad/data.hpp"
#include "fsad/filters.hpp"
#include "fsad/models.hpp"

namespace fsad::detection {

/// One leave-one-out partition of a class support: shots - 1 pseudo
/// supports and one pseudo query.
struct AuxiliarySplit {
  int split_index = 0;
  int held_out = 0;
  std::vector<int> aux;

  /// (N-1, C, H, W) rows of `support` listed in `aux`.
  Tensor aux_support(const Tensor& support) const;
  /// (1, C, H, W)
  Tensor held_out_query(const Tensor& support) const;
};

/// The N leave-one-out splits, split i holding out sample i. Requires N >= 2.
std::vector<AuxiliarySplit> enumerate_splits(int shots);

/// Supports of the K-1 other classes used to form a full K-way episode with
/// the (N-1)-shot auxiliary support in slot 0.
struct EpisodeContext {
  int ways = 0;
  int shots = 0;          // per class, equals N - 1
  Tensor other_support;   // ((K-1)*shots, C, H, W), class-major
};

using ContextSampler = std::function<EpisodeContext(std::uint64_t seed)>;

/// Draws K-1 classes other than `target_class` and `shots` images of each.
ContextSampler random_context(const data::Dataset& ds, int target_class, int ways, int shots);

/// (support (K*n, C, H, W), ways, shots, queries) -> logits (Q, K).
using Classifier = std::function<Tensor(const Tensor&, int, int, const Tensor&)>;

Classifier as_classifier(const models::FewShotModel& model);

double l1_distance(std::span<const double> a, std::span<const double> b);

/// |h(r(S_aux), Q_aux) - h(S_aux, Q_aux)|_1 on raw logits.
double u_adv(const Classifier& h, const filters::Filter& r, const Tensor& support, const EpisodeContext& context,
             const AuxiliarySplit& split, std::uint64_t filter_seed = 0);
double u_adv(const models::FewShotModel& model, const filters::Filter& r, const Tensor& support,
             const EpisodeContext& context, const AuxiliarySplit& split, std::uint64_t filter_seed = 0);

/// 1 when the held-out sample of `split` is not assigned to slot 0 under
/// the filtered auxiliary support, else 0.
double mismatch(const Classifier& h, const filters::Filter& r, const Tensor& support, const EpisodeContext& context,
                const AuxiliarySplit& split, std::uint64_t filter_seed = 0);

/// Mean of `mismatch` over every split.
double u_adv_prime(const Classifier& h, const filters::Filter& r, const Tensor& support,
                   const EpisodeContext& context, std::uint64_t filter_seed = 0);
double u_adv_prime(const models::FewShotModel& model, const filters::Filter& r, const Tensor& support,
                   const EpisodeContext& context, std::uint64_t filter_seed = 0);

enum class Statistic { logits_l1, hard_label };
enum class SplitMode { single_random, all_splits_mean };
enum class GroundTruth { clean, adversarial };

std::string to_string(Statistic s);
std::string to_string(SplitMode m);
std::string to_string(GroundTruth g);
Statistic statistic_from_string(const std::string& name);
SplitMode split_mode_from_string(const std::string& name);
GroundTruth ground_truth_from_string(const std::string& name);

/// Split mode used by default for each statistic.
SplitMode default_split_mode(Statistic s);

struct DetectionScore {
  double value = 0.0;
  Statistic statistic = Statistic::logits_l1;
  filters::FilterKind filter = filters::FilterKind::identity;
  SplitMode split_mode = SplitMode::single_random;
  GroundTruth truth = GroundTruth::clean;
  int class_id = -1;
  std::uint64_t seed = 0;
};

/// Scores one class support. The episode context, the random split and the
/// filter noise are all derived from `seed`; a single context is shared by
/// every split.
DetectionScore score_support_set(const Classifier& h, const filters::Filter& r, const Tensor& support,
                                 const ContextSampler& context, Statistic statistic, SplitMode mode,
                                 std::uint64_t seed);
DetectionScore score_support_set(const models::FewShotModel& model, const filters::Filter& r, const Tensor& support,
                                 const ContextSampler& context, Statistic statistic, SplitMode mode,
                                 std::uint64_t seed);

enum class Verdict { clean, adversarial };

/// Adversarial iff score > threshold.
Verdict flag(const DetectionScore& score, double threshold);
Verdict flag(double value, double threshold);

/// P(adv > clean) + 0.5 P(adv == clean) via mid-rank sums.
double auroc(std::span<const double> clean, std::span<const double> adversarial);

/// Smallest clean-score order statistic T such that at most a fraction
/// `fpr` of the clean scores exceed T.
double threshold_at_fpr(std::span<const double> clean, double fpr);

/// Fraction of scores strictly above the threshold.
double flagged_fraction(std::span<const double> scores, double threshold);

/// CSV with header class,seed,filter_kind,statistic_kind,split_mode,value,ground_truth.
void write_scores_csv(const std::filesystem::path& path, std::span<const DetectionScore> scores);
std::string scores_csv(std::span<const DetectionScore> scores);
std::vector<DetectionScore> read_scores_csv(const std::filesystem::path& path);

class DetectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fsad::detection
