#include "fsad/detection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fsad/random.hpp"

namespace fsad::detection {
namespace {

constexpr std::uint64_t kContextTag = 0xc0;
constexpr std::uint64_t kSplitTag = 0x5b;
constexpr std::uint64_t kFilterTag = 0xf1;

void check_support(const Tensor& support) {
  if (support.rank() != 4) throw DetectionError("class support must be (N, C, H, W), got " + fsad::to_string(support.shape()));
  if (support.dim(0) < 2) {
    throw DetectionError("self-similarity needs at least 2 support samples; auxiliary splits are undefined for N = 1");
  }
}

// Logits of the held-out sample with `aux` in slot 0 of the context episode.
Tensor held_out_logits(const Classifier& h, const Tensor& aux, const Tensor& query, const EpisodeContext& ctx) {
  const std::vector<Tensor> parts{aux, ctx.other_support};
  return h(concat(parts), ctx.ways, ctx.shots, query);
}

void check_context(const EpisodeContext& ctx, const Tensor& support) {
  const int n_aux = support.dim(0) - 1;
  if (ctx.ways < 2 || ctx.shots != n_aux || ctx.other_support.rank() != 4 ||
      ctx.other_support.dim(0) != (ctx.ways - 1) * ctx.shots) {
    throw DetectionError("episode context must hold " + std::to_string(ctx.ways - 1) + " other classes with " +
                         std::to_string(n_aux) + " supports each, got " + fsad::to_string(ctx.other_support.shape()));
  }
}

std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Tensor AuxiliarySplit::aux_support(const Tensor& support) const {
  std::vector<Tensor> rows;
  rows.reserve(aux.size());
  for (int i : aux) rows.push_back(support.item(i));
  return stack(rows);
}

Tensor AuxiliarySplit::held_out_query(const Tensor& support) const { return support.slice(held_out, held_out + 1); }

std::vector<AuxiliarySplit> enumerate_splits(int shots) {
  if (shots < 2) {
    throw DetectionError("auxiliary splits need N >= 2 support samples, got N = " + std::to_string(shots));
  }
  std::vector<AuxiliarySplit> out;
  for (int i = 0; i < shots; ++i) {
    AuxiliarySplit s;
    s.split_index = i;
    s.held_out = i;
    for (int j = 0; j < shots; ++j) {
      if (j != i) s.aux.push_back(j);
    }
    out.push_back(std::move(s));
  }
  return out;
}

ContextSampler random_context(const data::Dataset& ds, int target_class, int ways, int shots) {
  if (ways < 2 || ways > ds.num_classes()) {
    throw DetectionError("cannot form a " + std::to_string(ways) + "-way context from " +
                         std::to_string(ds.num_classes()) + " classes");
  }
  if (target_class < 0 || target_class >= ds.num_classes()) {
    throw DetectionError("context target class " + std::to_string(target_class) + " is out of range");
  }
  if (shots < 1 || shots > ds.min_count()) throw DetectionError("context shots out of range");
  return [&ds, target_class, ways, shots](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> others = sample_without_replacement(ds.num_classes() - 1, ways - 1, rng);
    std::vector<Tensor> parts;
    for (int o : others) {
      const int cls = o >= target_class ? o + 1 : o;
      parts.push_back(ds.batch(cls, sample_without_replacement(ds.count(cls), shots, rng)));
    }
    return EpisodeContext{ways, shots, concat(parts)};
  };
}

Classifier as_classifier(const models::FewShotModel& model) {
  return [&model](const Tensor& support, int ways, int shots, const Tensor& queries) {
    return model.classify(support, ways, shots, queries);
  };
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DetectionError("l1 distance between vectors of different length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

double u_adv(const Classifier& h, const filters::Filter& r, const Tensor& support, const EpisodeContext& context,
             const AuxiliarySplit& split, std::uint64_t filter_seed) {
  check_support(support);
  check_context(context, support);
  const Tensor aux = split.aux_support(support);
  const Tensor query = split.held_out_query(support);
  const Tensor plain = held_out_logits(h, aux, query, context);
  const Tensor filtered = held_out_logits(h, r.apply(aux, filter_seed), query, context);
  return l1_distance(filtered.values(), plain.values());
}

double u_adv(const models::FewShotModel& model, const filters::Filter& r, const Tensor& support,
             const EpisodeContext& context, const AuxiliarySplit& split, std::uint64_t filter_seed) {
  return u_adv(as_classifier(model), r, support, context, split, filter_seed);
}

double mismatch(const Classifier& h, const filters::Filter& r, const Tensor& support, const EpisodeContext& context,
                const AuxiliarySplit& split, std::uint64_t filter_seed) {
  check_support(support);
  check_context(context, support);
  const Tensor aux = r.apply(split.aux_support(support), filter_seed);
  const Tensor logits = held_out_logits(h, aux, split.held_out_query(support), context);
  return models::argmax_rows(logits).at(0) != 0 ? 1.0 : 0.0;
}

double u_adv_prime(const Classifier& h, const filters::Filter& r, const Tensor& support,
                   const EpisodeContext& context, std::uint64_t filter_seed) {
  check_support(support);
  const auto splits = enumerate_splits(support.dim(0));
  double total = 0.0;
  for (const auto& s : splits) {
    total += mismatch(h, r, support, context, s, derive_seed(filter_seed, {static_cast<std::uint64_t>(s.split_index)}));
  }
  return total / static_cast<double>(splits.size());
}

double u_adv_prime(const models::FewShotModel& model, const filters::Filter& r, const Tensor& support,
                   const EpisodeContext& context, std::uint64_t filter_seed) {
  return u_adv_prime(as_classifier(model), r, support, context, filter_seed);
}

std::string to_string(Statistic s) { return s == Statistic::logits_l1 ? "logits_l1" : "hard_label"; }
std::string to_string(SplitMode m) { return m == SplitMode::single_random ? "single_random" : "all_splits_mean"; }
std::string to_string(GroundTruth g) { return g == GroundTruth::clean ? "clean" : "adversarial"; }

Statistic statistic_from_string(const std::string& name) {
  if (name == "logits_l1" || name == "u_adv") return Statistic::logits_l1;
  if (name == "hard_label" || name == "u_adv_prime") return Statistic::hard_label;
  throw std::invalid_argument("unknown statistic '" + name + "' (expected logits_l1 or hard_label)");
}

SplitMode split_mode_from_string(const std::string& name) {
  if (name == "single_random") return SplitMode::single_random;
  if (name == "all_splits_mean") return SplitMode::all_splits_mean;
  throw std::invalid_argument("unknown split mode '" + name + "' (expected single_random or all_splits_mean)");
}

GroundTruth ground_truth_from_string(const std::string& name) {
  if (name == "clean") return GroundTruth::clean;
  if (name == "adversarial") return GroundTruth::adversarial;
  throw std::invalid_argument("unknown ground truth '" + name + "' (expected clean or adversarial)");
}

SplitMode default_split_mode(Statistic s) {
  return s == Statistic::logits_l1 ? SplitMode::single_random : SplitMode::all_splits_mean;
}

DetectionScore score_support_set(const Classifier& h, const filters::Filter& r, const Tensor& support,
                                 const ContextSampler& context, Statistic statistic, SplitMode mode,
                                 std::uint64_t seed) {
  check_support(support);
  const EpisodeContext ctx = context(derive_seed(seed, {kContextTag}));
  const auto splits = enumerate_splits(support.dim(0));
  auto one = [&](const AuxiliarySplit& s) {
    const std::uint64_t fs = derive_seed(seed, {kFilterTag, static_cast<std::uint64_t>(s.split_index)});
    return statistic == Statistic::logits_l1 ? u_adv(h, r, support, ctx, s, fs) : mismatch(h, r, support, ctx, s, fs);
  };
  DetectionScore out;
  out.statistic = statistic;
  out.filter = r.kind();
  out.split_mode = mode;
  out.seed = seed;
  if (mode == SplitMode::single_random) {
    Rng rng(derive_seed(seed, {kSplitTag}));
    std::uniform_int_distribution<int> pick(0, static_cast<int>(splits.size()) - 1);
    out.value = one(splits[static_cast<std::size_t>(pick(rng))]);
  } else {
    double total = 0.0;
    for (const auto& s : splits) total += one(s);
    out.value = total / static_cast<double>(splits.size());
  }
  return out;
}

DetectionScore score_support_set(const models::FewShotModel& model, const filters::Filter& r, const Tensor& support,
                                 const ContextSampler& context, Statistic statistic, SplitMode mode,
                                 std::uint64_t seed) {
  return score_support_set(as_classifier(model), r, support, context, statistic, mode, seed);
}

Verdict flag(double value, double threshold) {
  if (!std::isfinite(threshold)) throw DetectionError("detection threshold must be finite");
  return value > threshold ? Verdict::adversarial : Verdict::clean;
}

Verdict flag(const DetectionScore& score, double threshold) { return flag(score.value, threshold); }

double auroc(std::span<const double> clean, std::span<const double> adversarial) {
  if (clean.empty() || adversarial.empty()) throw DetectionError("auroc needs non-empty clean and adversarial scores");
  struct Item {
    double v;
    bool adv;
  };
  std::vector<Item> all;
  all.reserve(clean.size() + adversarial.size());
  for (double v : clean) all.push_back({v, false});
  for (double v : adversarial) all.push_back({v, true});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
  // Mid-ranks (1-based) over tie groups.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].adv) rank_sum += mid;
    }
    i = j;
  }
  const double na = static_cast<double>(adversarial.size());
  const double nc = static_cast<double>(clean.size());
  return (rank_sum - na * (na + 1.0) / 2.0) / (na * nc);
}

double threshold_at_fpr(std::span<const double> clean, double fpr) {
  if (clean.empty()) throw DetectionError("threshold calibration needs clean scores");
  if (!(fpr >= 0.0 && fpr < 1.0)) throw DetectionError("target false positive rate must lie in [0, 1)");
  std::vector<double> sorted(clean.begin(), clean.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  const auto allowed = static_cast<std::size_t>(std::floor(fpr * static_cast<double>(n)));
  return sorted[n - 1 - allowed];
}

double flagged_fraction(std::span<const double> scores, double threshold) {
  if (scores.empty()) throw DetectionError("flagged fraction of an empty score list");
  const auto n = std::count_if(scores.begin(), scores.end(), [&](double v) { return v > threshold; });
  return static_cast<double>(n) / static_cast<double>(scores.size());
}

std::string scores_csv(std::span<const DetectionScore> scores) {
  std::ostringstream out;
  out << "class,seed,filter_kind,statistic_kind,split_mode,value,ground_truth\n";
  for (const auto& s : scores) {
    out << s.class_id << ',' << s.seed << ',' << filters::to_string(s.filter) << ',' << to_string(s.statistic) << ','
        << to_string(s.split_mode) << ',' << csv_double(s.value) << ',' << to_string(s.truth) << '\n';
  }
  return out.str();
}

void write_scores_csv(const std::filesystem::path& path, std::span<const DetectionScore> scores) {
  write_file_exclusive(path, scores_csv(scores));
}

std::vector<DetectionScore> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DetectionError("cannot open scores file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "class,seed,filter_kind,statistic_kind,split_mode,value,ground_truth") {
    throw DetectionError("unexpected header in scores file " + path.string());
  }
  std::vector<DetectionScore> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) {
      throw DetectionError(path.string() + ":" + std::to_string(line_no) + ": expected 7 fields");
    }
    try {
      DetectionScore s;
      s.class_id = std::stoi(f[0]);
      s.seed = std::stoull(f[1]);
      s.filter = filters::filter_from_string(f[2]);
      s.statistic = statistic_from_string(f[3]);
      s.split_mode = split_mode_from_string(f[4]);
      s.value = std::stod(f[5]);
      s.truth = ground_truth_from_string(f[6]);
      out.push_back(s);
    } catch (const std::exception& e) {
      throw DetectionError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fsad::detection
