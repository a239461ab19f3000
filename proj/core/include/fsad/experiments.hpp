#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "fsad/attacks.hpp"
#include "fsad/data.hpp"
#include "fsad/detection.hpp"
#include "fsad/filters.hpp"
#include "fsad/models.hpp"

namespace fsad::experiments {

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One aggregated result. Columns that do not apply hold "-".
struct ResultRow {
  std::string model = "-";
  std::string dataset = "-";
  std::string attack = "-";
  std::string scenario = "-";
  std::string filter = "-";
  std::string statistic = "-";
  std::string metric;  // accuracy, asr or auroc
  double mean = 0.0;
  double dispersion = 0.0;  // CI half-width for accuracy, std for asr, 0 for auroc
  int n = 0;
  std::string plan_hash;

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

class ResultsTable {
 public:
  void add(ResultRow row);
  void append(const ResultsTable& other);
  const std::vector<ResultRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  std::vector<ResultRow> select(const std::string& metric) const;

  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
  static ResultsTable parse_csv(const std::string& text);
  static ResultsTable read_csv(const std::filesystem::path& path);

  friend bool operator==(const ResultsTable&, const ResultsTable&) = default;

 private:
  std::vector<ResultRow> rows_;
};

/// A trained few-shot model with the autoencoder filters paired to it.
struct ModelBundle {
  std::string name;
  std::shared_ptr<const models::FewShotModel> model;
  std::map<filters::FilterKind, std::shared_ptr<const filters::Autoencoder>> autoencoders;
};

struct ExperimentPlan {
  std::string dataset_name = "synthetic";
  std::shared_ptr<const data::Dataset> test;
  std::vector<ModelBundle> models;
  std::vector<int> target_classes;  // empty: every class of `test`
  std::vector<attacks::AttackConfig> attacks;
  std::vector<filters::FilterKind> filters;
  std::vector<detection::Statistic> statistics{detection::Statistic::logits_l1, detection::Statistic::hard_label};
  int perturbation_sets = 10;
  int eval_episodes = 200;
  int asr_episodes = 20;
  int ways = 5;
  int shots = 5;
  int queries_per_class = 15;
  std::uint64_t seed = 0;

  /// Checks references and sizes; throws ExperimentError.
  void validate() const;
  std::vector<int> classes() const;
  /// Includes content hashes of the dataset and every model.
  nlohmann::json to_json() const;
  std::string hash() const;
};

// Raw measurements, persisted so that every table row can be recomputed.

struct AccuracyRaw {
  std::string model;
  int episode = 0;
  double accuracy = 0.0;
};

struct RecordEntry {
  std::string model;
  std::string attack;  // attack label, "none" for zero-delta controls
  int set = 0;
  attacks::PerturbationRecord record;
};

struct AsrRaw {
  std::string model;
  std::string attack;
  int target_class = 0;
  int set = 0;
  attacks::Scenario scenario = attacks::Scenario::fixed_supports;
  double asr = 0.0;
};

struct ScoreRaw {
  std::string model;
  std::string attack;  // "none" for clean supports
  int set = 0;
  detection::DetectionScore score;
};

/// Label of an attack within a plan: its kind, suffixed with the index when
/// the plan holds several attacks of one kind.
std::string attack_label(const ExperimentPlan& plan, std::size_t attack_index);

/// Accuracy rows with 95% CI half-widths.
ResultsTable aggregate_accuracy(const std::vector<AccuracyRaw>& raw, const std::string& dataset,
                                const std::string& plan_hash);
/// ASR mean and std across records per (model, attack, scenario).
ResultsTable aggregate_asr(const std::vector<AsrRaw>& raw, const std::string& dataset, const std::string& plan_hash);
/// AUROC per (model, attack, filter, statistic) against the clean scores of
/// the same (model, filter, statistic).
ResultsTable aggregate_detection(const std::vector<ScoreRaw>& raw, const std::string& dataset,
                                 const std::string& plan_hash);

struct BaselineResult {
  ResultsTable table;
  std::vector<AccuracyRaw> raw;
};
BaselineResult run_baseline(const ExperimentPlan& plan);

/// Perturbation records for every model, attack, class and set; with
/// `controls` also zero-delta records labelled "none".
std::vector<RecordEntry> generate_records(const ExperimentPlan& plan, bool controls = true);

struct TransferResult {
  ResultsTable table;
  std::vector<AsrRaw> raw;
};
TransferResult run_transferability(const ExperimentPlan& plan, const std::vector<RecordEntry>& records);

struct DetectionResult {
  ResultsTable table;
  std::vector<ScoreRaw> raw;
};
/// Scores the adversarial support of every non-control record and an equal
/// number of fresh clean supports of the same classes.
DetectionResult run_detection_suite(const ExperimentPlan& plan, const std::vector<RecordEntry>& records);

std::string accuracy_raw_csv(const std::vector<AccuracyRaw>& raw);
std::vector<AccuracyRaw> parse_accuracy_raw(const std::string& text);
std::string asr_raw_csv(const std::vector<AsrRaw>& raw);
std::vector<AsrRaw> parse_asr_raw(const std::string& text);
std::string score_raw_csv(const std::vector<ScoreRaw>& raw);
std::vector<ScoreRaw> parse_score_raw(const std::string& text);

/// Writes bar charts (SVG) with dispersion whiskers plus a CSV of the
/// plotted rows next to each figure. Returns the written paths in order.
std::vector<std::filesystem::path> render_report(const ResultsTable& table, const std::filesystem::path& out_dir);

}  // namespace fsad::experiments
