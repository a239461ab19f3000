#include "fsad/experiments.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "fsad/archive.hpp"
#include "fsad/random.hpp"
#include "fsad/stats.hpp"

namespace fsad::experiments {
namespace {

constexpr std::uint64_t kAttackTag = 0xa7;
constexpr std::uint64_t kAsrTag = 0xa5;
constexpr std::uint64_t kCleanTag = 0xc1;
constexpr std::uint64_t kScoreTag = 0x5c;
constexpr std::uint64_t kBaselineTag = 0xb1;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Rows of a CSV text after checking the header.
std::vector<std::vector<std::string>> parse_rows(const std::string& text, const std::string& header, std::size_t cols,
                                                 const std::string& what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header) throw ExperimentError(what + ": unexpected CSV header");
  std::vector<std::vector<std::string>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != cols) {
      throw ExperimentError(what + ": line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                            " fields, expected " + std::to_string(cols));
    }
    rows.push_back(std::move(f));
  }
  return rows;
}

void check_field(const std::string& v, const char* column) {
  if (v.empty() || v.find_first_of(",\n\r") != std::string::npos) {
    throw ExperimentError(std::string("results column ") + column + " holds an empty or comma-containing value '" + v +
                          "'");
  }
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed(double v, int digits = 4) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Bar {
  std::string series;
  double mean;
  double dispersion;
};

struct Group {
  std::string label;
  std::vector<Bar> bars;
};

// Grouped bar chart on a [0, 1] axis with whiskers at mean +- dispersion.
std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<Group>& groups,
                          const std::vector<std::string>& series) {
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3",
                                  "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd"};
  const double bar_w = 18.0, gap = 24.0, left = 70.0, top = 40.0, plot_h = 260.0;
  const double group_w = bar_w * static_cast<double>(series.size()) + gap;
  const double plot_w = std::max(200.0, group_w * static_cast<double>(groups.size()));
  const double legend_h = 18.0 * static_cast<double>(series.size());
  const double width = left + plot_w + 30.0;
  const double height = top + plot_h + 90.0 + legend_h;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << fixed(width / 2, 1) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  s << "<text transform=\"translate(16," << fixed(top + plot_h / 2, 1) << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(y_label) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = 0.25 * t;
    const double y = y_of(v);
    s << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(y, 1) << "\" x2=\"" << fixed(left + plot_w, 1)
      << "\" y2=\"" << fixed(y, 1) << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << fixed(left - 6, 1) << "\" y=\"" << fixed(y + 4, 1) << "\" text-anchor=\"end\">" << fixed(v, 2)
      << "</text>\n";
  }
  s << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(top, 1) << "\" x2=\"" << fixed(left, 1) << "\" y2=\""
    << fixed(top + plot_h, 1) << "\" stroke=\"black\"/>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + gap / 2 + group_w * static_cast<double>(g);
    for (const Bar& b : groups[g].bars) {
      const auto it = std::find(series.begin(), series.end(), b.series);
      const auto si = static_cast<std::size_t>(it - series.begin());
      const double x = gx + bar_w * static_cast<double>(si);
      const double y = y_of(b.mean);
      s << "<rect x=\"" << fixed(x, 1) << "\" y=\"" << fixed(y, 1) << "\" width=\"" << fixed(bar_w - 2, 1)
        << "\" height=\"" << fixed(top + plot_h - y, 1) << "\" fill=\"" << palette[si % 10] << "\"><title>"
        << xml_escape(groups[g].label + " / " + b.series) << ": " << fixed(b.mean) << " +- " << fixed(b.dispersion)
        << "</title></rect>\n";
      if (b.dispersion > 0.0) {
        const double cx = x + (bar_w - 2) / 2;
        const double y0 = y_of(b.mean - b.dispersion), y1 = y_of(b.mean + b.dispersion);
        s << "<line x1=\"" << fixed(cx, 1) << "\" y1=\"" << fixed(y0, 1) << "\" x2=\"" << fixed(cx, 1) << "\" y2=\""
          << fixed(y1, 1) << "\" stroke=\"black\"/>\n";
        for (double yy : {y0, y1}) {
          s << "<line x1=\"" << fixed(cx - 4, 1) << "\" y1=\"" << fixed(yy, 1) << "\" x2=\"" << fixed(cx + 4, 1)
            << "\" y2=\"" << fixed(yy, 1) << "\" stroke=\"black\"/>\n";
        }
      }
    }
    s << "<text x=\"" << fixed(gx + bar_w * static_cast<double>(series.size()) / 2, 1) << "\" y=\""
      << fixed(top + plot_h + 16, 1) << "\" text-anchor=\"middle\">" << xml_escape(groups[g].label) << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = top + plot_h + 40 + 18.0 * static_cast<double>(i);
    s << "<rect x=\"" << fixed(left, 1) << "\" y=\"" << fixed(y, 1) << "\" width=\"12\" height=\"12\" fill=\""
      << palette[i % 10] << "\"/>\n";
    s << "<text x=\"" << fixed(left + 18, 1) << "\" y=\"" << fixed(y + 10, 1) << "\">" << xml_escape(series[i])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// Orders labels by first appearance.
void note(std::vector<std::string>& seen, const std::string& v) {
  if (std::find(seen.begin(), seen.end(), v) == seen.end()) seen.push_back(v);
}

Tensor clean_support(const data::Dataset& ds, int cls, int shots, std::uint64_t seed) {
  Rng rng(seed);
  return ds.batch(cls, sample_without_replacement(ds.count(cls), shots, rng));
}

const ModelBundle& bundle_named(const ExperimentPlan& plan, const std::string& name) {
  for (const auto& b : plan.models) {
    if (b.name == name) return b;
  }
  throw ExperimentError("record refers to model '" + name + "' which is not in the plan");
}

std::size_t model_index(const ExperimentPlan& plan, const std::string& name) {
  for (std::size_t i = 0; i < plan.models.size(); ++i) {
    if (plan.models[i].name == name) return i;
  }
  throw ExperimentError("model '" + name + "' is not in the plan");
}

filters::Filter make_filter(const ModelBundle& bundle, filters::FilterKind kind) {
  switch (kind) {
    case filters::FilterKind::identity: return filters::Filter::identity();
    case filters::FilterKind::noise: return filters::Filter::noise();
    case filters::FilterKind::median_2x2: return filters::Filter::median();
    default: break;
  }
  const auto it = bundle.autoencoders.find(kind);
  if (it == bundle.autoencoders.end() || !it->second) {
    throw ExperimentError("model '" + bundle.name + "' has no trained " + filters::to_string(kind) + " filter");
  }
  return filters::Filter::autoencoder(it->second);
}

}  // namespace

void ResultsTable::add(ResultRow row) {
  for (const auto& [v, c] : std::initializer_list<std::pair<const std::string&, const char*>>{
           {row.model, "model"},
           {row.dataset, "dataset"},
           {row.attack, "attack"},
           {row.scenario, "scenario"},
           {row.filter, "filter"},
           {row.statistic, "statistic"},
           {row.metric, "metric"},
           {row.plan_hash, "plan_hash"}}) {
    check_field(v, c);
  }
  if (row.metric != "accuracy" && row.metric != "asr" && row.metric != "auroc") {
    throw ExperimentError("unknown metric '" + row.metric + "'");
  }
  if (!(row.mean >= 0.0 && row.mean <= 1.0)) {
    throw ExperimentError(row.metric + " value " + fmt_double(row.mean) + " outside [0, 1]");
  }
  rows_.push_back(std::move(row));
}

void ResultsTable::append(const ResultsTable& other) {
  for (const auto& r : other.rows_) add(r);
}

std::vector<ResultRow> ResultsTable::select(const std::string& metric) const {
  std::vector<ResultRow> out;
  std::copy_if(rows_.begin(), rows_.end(), std::back_inserter(out), [&](const ResultRow& r) { return r.metric == metric; });
  return out;
}

static const char* kTableHeader = "model,dataset,attack,scenario,filter,statistic,metric,mean,dispersion,n,plan_hash";

std::string ResultsTable::csv() const {
  std::ostringstream out;
  out << kTableHeader << '\n';
  for (const auto& r : rows_) {
    out << r.model << ',' << r.dataset << ',' << r.attack << ',' << r.scenario << ',' << r.filter << ','
        << r.statistic << ',' << r.metric << ',' << fmt_double(r.mean) << ',' << fmt_double(r.dispersion) << ','
        << r.n << ',' << r.plan_hash << '\n';
  }
  return out.str();
}

void ResultsTable::write_csv(const std::filesystem::path& path) const { write_file_exclusive(path, csv()); }

ResultsTable ResultsTable::parse_csv(const std::string& text) {
  ResultsTable t;
  for (const auto& f : parse_rows(text, kTableHeader, 11, "results table")) {
    ResultRow r;
    r.model = f[0];
    r.dataset = f[1];
    r.attack = f[2];
    r.scenario = f[3];
    r.filter = f[4];
    r.statistic = f[5];
    r.metric = f[6];
    r.mean = std::stod(f[7]);
    r.dispersion = std::stod(f[8]);
    r.n = std::stoi(f[9]);
    r.plan_hash = f[10];
    t.add(std::move(r));
  }
  return t;
}

ResultsTable ResultsTable::read_csv(const std::filesystem::path& path) { return parse_csv(read_file(path)); }

void ExperimentPlan::validate() const {
  if (!test) throw ExperimentError("plan has no test dataset");
  if (models.empty()) throw ExperimentError("plan has no models");
  std::set<std::string> names;
  for (const auto& b : models) {
    if (!b.model) throw ExperimentError("plan model '" + b.name + "' is not loaded");
    if (!names.insert(b.name).second) throw ExperimentError("duplicate model name '" + b.name + "'");
    for (const auto& [kind, ae] : b.autoencoders) {
      if (ae && ae->paired_model_hash() != b.model->hash()) {
        throw ExperimentError(filters::to_string(kind) + " filter of model '" + b.name +
                              "' was trained against a different model (hash mismatch)");
      }
    }
  }
  if (perturbation_sets < 1 || eval_episodes < 1 || asr_episodes < 1) {
    throw ExperimentError("plan counts (perturbation_sets, eval_episodes, asr_episodes) must be >= 1");
  }
  if (ways < 2 || shots < 2 || queries_per_class < 1) throw ExperimentError("plan needs ways >= 2, shots >= 2");
  if (ways > test->num_classes()) throw ExperimentError("plan ways exceed the number of test classes");
  for (int c : target_classes) {
    if (c < 0 || c >= test->num_classes()) throw ExperimentError("target class " + std::to_string(c) + " not in test");
  }
  for (const auto& a : attacks) a.validate();
}

std::vector<int> ExperimentPlan::classes() const {
  if (!target_classes.empty()) return target_classes;
  std::vector<int> all(static_cast<std::size_t>(test->num_classes()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return all;
}

nlohmann::json ExperimentPlan::to_json() const {
  nlohmann::json j;
  j["dataset"] = {{"name", dataset_name}, {"hash", test ? test->hash() : ""}};
  j["models"] = nlohmann::json::array();
  for (const auto& b : models) {
    nlohmann::json m{{"name", b.name}, {"hash", b.model ? b.model->hash() : ""}};
    for (const auto& [kind, ae] : b.autoencoders) m["filters"][filters::to_string(kind)] = ae ? ae->hash() : "";
    j["models"].push_back(m);
  }
  j["target_classes"] = target_classes;
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : attacks) j["attacks"].push_back(a.to_json());
  j["filters"] = nlohmann::json::array();
  for (auto f : filters) j["filters"].push_back(filters::to_string(f));
  j["statistics"] = nlohmann::json::array();
  for (auto s : statistics) j["statistics"].push_back(detection::to_string(s));
  j["perturbation_sets"] = perturbation_sets;
  j["eval_episodes"] = eval_episodes;
  j["asr_episodes"] = asr_episodes;
  j["ways"] = ways;
  j["shots"] = shots;
  j["queries_per_class"] = queries_per_class;
  j["seed"] = seed;
  return j;
}

std::string ExperimentPlan::hash() const { return sha256_hex(to_json().dump()); }

std::string attack_label(const ExperimentPlan& plan, std::size_t i) {
  const auto kind = plan.attacks.at(i).kind;
  const auto same = std::count_if(plan.attacks.begin(), plan.attacks.end(),
                                  [&](const attacks::AttackConfig& a) { return a.kind == kind; });
  return same > 1 ? attacks::to_string(kind) + "#" + std::to_string(i) : attacks::to_string(kind);
}

ResultsTable aggregate_accuracy(const std::vector<AccuracyRaw>& raw, const std::string& dataset,
                                const std::string& plan_hash) {
  std::vector<std::string> order;
  for (const auto& r : raw) note(order, r.model);
  ResultsTable t;
  for (const auto& m : order) {
    std::vector<double> v;
    for (const auto& r : raw) {
      if (r.model == m) v.push_back(r.accuracy);
    }
    const Summary s = summarize(v);
    ResultRow row;
    row.model = m;
    row.dataset = dataset;
    row.metric = "accuracy";
    row.mean = s.mean;
    row.dispersion = s.ci95_half_width();
    row.n = s.count;
    row.plan_hash = plan_hash;
    t.add(row);
  }
  return t;
}

ResultsTable aggregate_asr(const std::vector<AsrRaw>& raw, const std::string& dataset, const std::string& plan_hash) {
  std::vector<std::string> keys;
  for (const auto& r : raw) note(keys, r.model + "\n" + r.attack + "\n" + attacks::to_string(r.scenario));
  ResultsTable t;
  for (const auto& k : keys) {
    std::vector<double> v;
    const AsrRaw* first = nullptr;
    for (const auto& r : raw) {
      if (r.model + "\n" + r.attack + "\n" + attacks::to_string(r.scenario) == k) {
        v.push_back(r.asr);
        if (!first) first = &r;
      }
    }
    const Summary s = summarize(v);
    ResultRow row;
    row.model = first->model;
    row.dataset = dataset;
    row.attack = first->attack;
    row.scenario = attacks::to_string(first->scenario);
    row.metric = "asr";
    row.mean = s.mean;
    row.dispersion = s.std;
    row.n = s.count;
    row.plan_hash = plan_hash;
    t.add(row);
  }
  return t;
}

ResultsTable aggregate_detection(const std::vector<ScoreRaw>& raw, const std::string& dataset,
                                 const std::string& plan_hash) {
  std::vector<std::string> keys;
  for (const auto& r : raw) {
    if (r.score.truth == detection::GroundTruth::adversarial) {
      note(keys, r.model + "\n" + r.attack + "\n" + filters::to_string(r.score.filter) + "\n" +
                     detection::to_string(r.score.statistic));
    }
  }
  ResultsTable t;
  for (const auto& k : keys) {
    std::vector<double> adv, clean;
    const ScoreRaw* first = nullptr;
    for (const auto& r : raw) {
      if (r.score.truth != detection::GroundTruth::adversarial) continue;
      if (r.model + "\n" + r.attack + "\n" + filters::to_string(r.score.filter) + "\n" +
              detection::to_string(r.score.statistic) ==
          k) {
        adv.push_back(r.score.value);
        if (!first) first = &r;
      }
    }
    for (const auto& r : raw) {
      if (r.score.truth == detection::GroundTruth::clean && r.model == first->model &&
          r.score.filter == first->score.filter && r.score.statistic == first->score.statistic) {
        clean.push_back(r.score.value);
      }
    }
    if (clean.empty()) throw ExperimentError("no clean scores for " + first->model + " / " + filters::to_string(first->score.filter));
    ResultRow row;
    row.model = first->model;
    row.dataset = dataset;
    row.attack = first->attack;
    row.filter = filters::to_string(first->score.filter);
    row.statistic = detection::to_string(first->score.statistic);
    row.metric = "auroc";
    row.mean = detection::auroc(clean, adv);
    row.dispersion = 0.0;
    row.n = static_cast<int>(adv.size() + clean.size());
    row.plan_hash = plan_hash;
    t.add(row);
  }
  return t;
}

BaselineResult run_baseline(const ExperimentPlan& plan) {
  plan.validate();
  const std::string h = plan.hash();
  BaselineResult out;
  for (std::size_t m = 0; m < plan.models.size(); ++m) {
    const auto& b = plan.models[m];
    const auto rep = models::evaluate_accuracy(*b.model, *plan.test, plan.eval_episodes, plan.ways, plan.shots,
                                               plan.queries_per_class * plan.ways,
                                               derive_seed(plan.seed, {kBaselineTag}));
    for (std::size_t e = 0; e < rep.per_episode.size(); ++e) {
      out.raw.push_back({b.name, static_cast<int>(e), rep.per_episode[e]});
    }
  }
  out.table = aggregate_accuracy(out.raw, plan.dataset_name, h);
  return out;
}

std::vector<RecordEntry> generate_records(const ExperimentPlan& plan, bool controls) {
  plan.validate();
  std::vector<RecordEntry> out;
  for (std::size_t m = 0; m < plan.models.size(); ++m) {
    const auto& b = plan.models[m];
    for (int cls : plan.classes()) {
      for (int set = 0; set < plan.perturbation_sets; ++set) {
        const std::uint64_t base =
            derive_seed(plan.seed, {kAttackTag, m, static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(set)});
        for (std::size_t a = 0; a < plan.attacks.size(); ++a) {
          attacks::AttackConfig cfg = plan.attacks[a];
          cfg.seed = derive_seed(base, {a});
          out.push_back({b.name, attack_label(plan, a), set,
                         attacks::run_attack(*b.model, *plan.test, cls, plan.ways, plan.shots, cfg)});
        }
        if (controls) {
          out.push_back({b.name, "none", set,
                         attacks::zero_record(*b.model, *plan.test, cls, plan.ways, plan.shots, base)});
        }
      }
      spdlog::debug("attacked class {} of model {}", cls, b.name);
    }
  }
  return out;
}

TransferResult run_transferability(const ExperimentPlan& plan, const std::vector<RecordEntry>& records) {
  plan.validate();
  if (records.empty()) throw ExperimentError("transferability needs perturbation records");
  const std::string h = plan.hash();
  const std::string dataset_hash = plan.test->hash();
  TransferResult out;
  for (const auto& e : records) {
    const auto& b = bundle_named(plan, e.model);
    if (e.record.dataset_hash != dataset_hash) {
      throw ExperimentError("perturbation record was generated on a different dataset (hash mismatch)");
    }
    for (auto scenario : {attacks::Scenario::fixed_supports, attacks::Scenario::new_supports}) {
      const std::uint64_t seed = derive_seed(plan.seed, {kAsrTag, model_index(plan, e.model),
                                                          static_cast<std::uint64_t>(e.record.target_class),
                                                          static_cast<std::uint64_t>(e.set)});
      const auto rep = attacks::evaluate_asr(*b.model, e.record, *plan.test, scenario, plan.asr_episodes,
                                             plan.queries_per_class, seed);
      out.raw.push_back({e.model, e.attack, e.record.target_class, e.set, scenario, rep.mean});
    }
  }
  out.table = aggregate_asr(out.raw, plan.dataset_name, h);
  return out;
}

DetectionResult run_detection_suite(const ExperimentPlan& plan, const std::vector<RecordEntry>& records) {
  plan.validate();
  if (plan.filters.empty() || plan.statistics.empty()) throw ExperimentError("detection needs filters and statistics");
  const std::string h = plan.hash();
  const std::string dataset_hash = plan.test->hash();
  DetectionResult out;
  // Clean supports are keyed by (model, class, set) and shared across attacks.
  std::set<std::tuple<std::string, int, int>> clean_done;
  for (const auto& e : records) {
    if (e.attack == "none") continue;
    const auto& b = bundle_named(plan, e.model);
    if (e.record.model_hash != b.model->hash() || e.record.dataset_hash != dataset_hash) {
      throw ExperimentError("perturbation record does not match the plan's model or dataset (hash mismatch)");
    }
    const std::size_t mi = model_index(plan, e.model);
    const int cls = e.record.target_class;
    const auto ctx = detection::random_context(*plan.test, cls, plan.ways, plan.shots - 1);
    const Tensor adv = e.record.adversarial_support();
    const bool need_clean = clean_done.insert({e.model, cls, e.set}).second;
    const Tensor clean =
        clean_support(*plan.test, cls, plan.shots,
                      derive_seed(plan.seed, {kCleanTag, mi, static_cast<std::uint64_t>(cls),
                                              static_cast<std::uint64_t>(e.set)}));
    for (auto kind : plan.filters) {
      const filters::Filter f = make_filter(b, kind);
      for (auto stat : plan.statistics) {
        const auto mode = detection::default_split_mode(stat);
        const std::uint64_t s = derive_seed(plan.seed, {kScoreTag, mi, static_cast<std::uint64_t>(cls),
                                                        static_cast<std::uint64_t>(e.set)});
        auto score = detection::score_support_set(*b.model, f, adv, ctx, stat, mode, derive_seed(s, {1}));
        score.truth = detection::GroundTruth::adversarial;
        score.class_id = cls;
        out.raw.push_back({e.model, e.attack, e.set, score});
        if (need_clean) {
          auto cs = detection::score_support_set(*b.model, f, clean, ctx, stat, mode, derive_seed(s, {2}));
          cs.truth = detection::GroundTruth::clean;
          cs.class_id = cls;
          out.raw.push_back({e.model, "none", e.set, cs});
        }
      }
    }
  }
  if (out.raw.empty()) throw ExperimentError("detection needs at least one adversarial record");
  out.table = aggregate_detection(out.raw, plan.dataset_name, h);
  return out;
}

std::string accuracy_raw_csv(const std::vector<AccuracyRaw>& raw) {
  std::ostringstream o;
  o << "model,episode,accuracy\n";
  for (const auto& r : raw) o << r.model << ',' << r.episode << ',' << fmt_double(r.accuracy) << '\n';
  return o.str();
}

std::vector<AccuracyRaw> parse_accuracy_raw(const std::string& text) {
  std::vector<AccuracyRaw> out;
  for (const auto& f : parse_rows(text, "model,episode,accuracy", 3, "accuracy scores")) {
    out.push_back({f[0], std::stoi(f[1]), std::stod(f[2])});
  }
  return out;
}

std::string asr_raw_csv(const std::vector<AsrRaw>& raw) {
  std::ostringstream o;
  o << "model,attack,class,set,scenario,asr\n";
  for (const auto& r : raw) {
    o << r.model << ',' << r.attack << ',' << r.target_class << ',' << r.set << ',' << attacks::to_string(r.scenario)
      << ',' << fmt_double(r.asr) << '\n';
  }
  return o.str();
}

std::vector<AsrRaw> parse_asr_raw(const std::string& text) {
  std::vector<AsrRaw> out;
  for (const auto& f : parse_rows(text, "model,attack,class,set,scenario,asr", 6, "asr scores")) {
    out.push_back({f[0], f[1], std::stoi(f[2]), std::stoi(f[3]), attacks::scenario_from_string(f[4]), std::stod(f[5])});
  }
  return out;
}

std::string score_raw_csv(const std::vector<ScoreRaw>& raw) {
  std::ostringstream o;
  o << "model,attack,set,class,seed,filter_kind,statistic_kind,split_mode,value,ground_truth\n";
  for (const auto& r : raw) {
    o << r.model << ',' << r.attack << ',' << r.set << ',' << r.score.class_id << ',' << r.score.seed << ','
      << filters::to_string(r.score.filter) << ',' << detection::to_string(r.score.statistic) << ','
      << detection::to_string(r.score.split_mode) << ',' << fmt_double(r.score.value) << ','
      << detection::to_string(r.score.truth) << '\n';
  }
  return o.str();
}

std::vector<ScoreRaw> parse_score_raw(const std::string& text) {
  std::vector<ScoreRaw> out;
  for (const auto& f : parse_rows(text,
                                  "model,attack,set,class,seed,filter_kind,statistic_kind,split_mode,value,ground_truth",
                                  10, "detection scores")) {
    ScoreRaw r;
    r.model = f[0];
    r.attack = f[1];
    r.set = std::stoi(f[2]);
    r.score.class_id = std::stoi(f[3]);
    r.score.seed = std::stoull(f[4]);
    r.score.filter = filters::filter_from_string(f[5]);
    r.score.statistic = detection::statistic_from_string(f[6]);
    r.score.split_mode = detection::split_mode_from_string(f[7]);
    r.score.value = std::stod(f[8]);
    r.score.truth = detection::ground_truth_from_string(f[9]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::filesystem::path> render_report(const ResultsTable& table, const std::filesystem::path& out_dir) {
  if (table.empty()) throw ExperimentError("nothing to report: the results table is empty");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& stem, const std::vector<ResultRow>& rows, const std::string& svg) {
    ResultsTable sub;
    for (const auto& r : rows) sub.add(r);
    const auto csv_path = out_dir / (stem + ".csv");
    const auto svg_path = out_dir / (stem + ".svg");
    write_file_exclusive(svg_path, svg);
    write_file_exclusive(csv_path, sub.csv());
    written.push_back(svg_path);
    written.push_back(csv_path);
  };

  if (const auto rows = table.select("accuracy"); !rows.empty()) {
    std::vector<Group> groups;
    for (const auto& r : rows) groups.push_back({r.model, {{"accuracy", r.mean, r.dispersion}}});
    emit("baseline_accuracy", rows, bar_chart_svg("Baseline 5-way accuracy (95% CI)", "accuracy", groups, {"accuracy"}));
  }

  if (const auto rows = table.select("asr"); !rows.empty()) {
    std::vector<std::string> group_order, series;
    for (const auto& r : rows) {
      note(group_order, r.model + " " + r.attack);
      note(series, r.scenario);
    }
    std::vector<Group> groups;
    for (const auto& g : group_order) {
      Group grp{g, {}};
      for (const auto& r : rows) {
        if (r.model + " " + r.attack == g) grp.bars.push_back({r.scenario, r.mean, r.dispersion});
      }
      groups.push_back(std::move(grp));
    }
    emit("transferability_asr", rows, bar_chart_svg("Attack success rate by transfer scenario (std)", "ASR", groups, series));
  }

  const auto auroc_rows = table.select("auroc");
  std::vector<std::string> stats;
  for (const auto& r : auroc_rows) note(stats, r.statistic);
  for (const auto& stat : stats) {
    std::vector<ResultRow> rows;
    std::copy_if(auroc_rows.begin(), auroc_rows.end(), std::back_inserter(rows),
                 [&](const ResultRow& r) { return r.statistic == stat; });
    std::vector<std::string> filter_order, series;
    for (const auto& r : rows) {
      note(filter_order, r.filter);
      note(series, r.model + " " + r.attack);
    }
    std::vector<Group> groups;
    for (const auto& f : filter_order) {
      Group grp{f, {}};
      for (const auto& r : rows) {
        if (r.filter == f) grp.bars.push_back({r.model + " " + r.attack, r.mean, r.dispersion});
      }
      groups.push_back(std::move(grp));
    }
    emit("detection_auroc_" + stat, rows, bar_chart_svg("Detection AUROC by filter (" + stat + ")", "AUROC", groups, series));
  }
  return written;
}

}  // namespace fsad::experiments
