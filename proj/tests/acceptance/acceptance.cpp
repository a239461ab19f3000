// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsad/attacks.hpp"
#include "fsad/config.hpp"
#include "fsad/detection.hpp"
#include "fsad/experiments.hpp"
#include "fsad/filters.hpp"
#include "fsad/pipeline.hpp"
#include "fsad/random.hpp"

namespace fs = std::filesystem;
using namespace fsad;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string cfmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Suite {
 public:
  void run(int id, const std::string& name, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
    failed_ += o.pass ? 0 : 1;
  }
  int failed() const { return failed_; }

 private:
  int failed_ = 0;
};

config::RunConfig load(const fs::path& file, config::Command c, const fs::path& root) {
  config::ParseInput in;
  in.command = c;
  in.config_file = file;
  in.overrides = {{"output_root", root.string()}};
  return config::parse_config(in);
}

// Runs every command; returns an error message or "".
std::string run_pipeline(const fs::path& file, const fs::path& root, std::map<std::string, std::string>* hashes) {
  for (auto c : config::all_commands()) {
    const auto res = pipeline::execute(load(file, c, root));
    if (res.exit_code != 0) return config::to_string(c) + ": " + res.error;
    if (hashes) {
      for (const auto& [rel, h] : pipeline::artifact_hashes(res.manifest_path)) (*hashes)[rel] = h;
    }
  }
  return "";
}

double brute_auroc(const std::vector<double>& clean, const std::vector<double>& adv) {
  double s = 0.0;
  for (double a : adv)
    for (double c : clean) s += a > c ? 1.0 : (a == c ? 0.5 : 0.0);
  return s / static_cast<double>(clean.size() * adv.size());
}

const experiments::ResultRow* row(const experiments::ResultsTable& t, const std::string& metric,
                                  const std::string& model, const std::string& attack, const std::string& scenario,
                                  const std::string& filter, const std::string& statistic) {
  for (const auto& r : t.rows()) {
    if (r.metric == metric && r.model == model && r.attack == attack && r.scenario == scenario &&
        r.filter == filter && r.statistic == statistic) {
      return &r;
    }
  }
  return nullptr;
}

double require(const experiments::ResultRow* r, const std::string& what) {
  if (!r) throw std::runtime_error("missing table row: " + what);
  return r->mean;
}

Tensor tagged(const std::vector<double>& tags) {
  Tensor t({static_cast<int>(tags.size()), 1, 2, 2});
  for (std::size_t i = 0; i < tags.size(); ++i)
    for (int k = 0; k < 4; ++k) t[i * 4 + k] = tags[i];
  return t;
}

// Everything the pipeline produced that later criteria inspect.
struct Run {
  fs::path dir;
  config::RunConfig cfg;
  experiments::ExperimentPlan plan;
  std::vector<experiments::RecordEntry> records;
  experiments::ResultsTable tables;
  std::vector<experiments::ScoreRaw> scores;
  nlohmann::json train_manifest;
};

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const fs::path work = FSAD_ACCEPTANCE_WORK_DIR;
  const fs::path e2e_config = FSAD_ACCEPTANCE_CONFIG;
  const fs::path smoke_config = FSAD_SMOKE_CONFIG;
  fs::remove_all(work);
  fs::create_directories(work);
  Suite suite;

  suite.run(1, "AUROC rank-sum equals pairwise oracle on 100 random pairs", [] {
    Rng rng(1);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      std::uniform_int_distribution<int> size(1, 300);
      std::normal_distribution<double> g;
      std::vector<double> clean(static_cast<std::size_t>(size(rng))), adv(static_cast<std::size_t>(size(rng)));
      const double grid = t % 2 ? 0.25 : 0.0;  // every other pair quantised to force ties
      auto draw = [&](double shift) {
        const double v = g(rng) + shift;
        return grid > 0 ? std::round(v / grid) * grid : v;
      };
      for (auto& v : clean) v = draw(0.0);
      for (auto& v : adv) v = draw(0.05 * (t % 20));
      worst = std::max(worst, std::abs(detection::auroc(clean, adv) - brute_auroc(clean, adv)));
    }
    return Outcome{worst <= 1e-12, cfmt("max |rank-sum - pairwise| = %.3g (tol 1e-12)", worst)};
  });

  suite.run(2, "statistics match hand-computed fixtures", [] {
    using detection::Classifier;
    // U_adv: logits (0.2, 0.5, 0.3) before and (0.1, 0.7, 0.2) after filtering
    const Classifier h = [](const Tensor& s, int, int, const Tensor&) {
      return s[0] == 0.1 ? Tensor({1, 3}, {0.2, 0.5, 0.3}) : Tensor({1, 3}, {0.1, 0.7, 0.2});
    };
    const detection::EpisodeContext ctx3{3, 2, tagged({0.9, 0.9, 0.9, 0.9})};
    const double u = detection::u_adv(h, filters::Filter::noise(), tagged({0.5, 0.1, 0.9}), ctx3,
                                      detection::enumerate_splits(3)[0], 1);
    const double u_hand = std::abs(0.1 - 0.2) + std::abs(0.7 - 0.5) + std::abs(0.2 - 0.3);
    // U_adv': held-out images tagged 0.1..0.5, the classifier rejects the listed tags
    auto rejecting = [](std::set<double> wrong) -> Classifier {
      return [wrong](const Tensor&, int ways, int, const Tensor& q) {
        Tensor z({1, ways});
        z[wrong.count(q[0]) ? 1 : 0] = 1.0;
        return z;
      };
    };
    const Tensor s5 = tagged({0.1, 0.2, 0.3, 0.4, 0.5});
    const detection::EpisodeContext ctx5{3, 4, tagged(std::vector<double>(8, 0.9))};
    const double p0 = detection::u_adv_prime(rejecting({}), filters::Filter::identity(), s5, ctx5);
    const double p1 = detection::u_adv_prime(rejecting({0.1, 0.2, 0.3, 0.4, 0.5}), filters::Filter::identity(), s5, ctx5);
    const double p4 = detection::u_adv_prime(rejecting({0.2, 0.5}), filters::Filter::identity(), s5, ctx5);
    const std::vector<double> logits{2.0, 0.5, 1.0};
    const double margin = attacks::cw_margin(logits, 0, 0.1);
    const Tensor x({1, 1, 1, 2});
    const double fpa = filters::fpa_objective(ag::Var(x), ag::Var(x), ag::Var(Tensor({1, 2}, {3, 4})),
                                              ag::Var(Tensor({1, 2})))
                           .value()[0];
    const bool ok = u == u_hand && std::abs(u - 0.4) < 1e-15 && p0 == 0.0 && p1 == 1.0 && p4 == 0.4 &&
                    std::abs(margin - (-0.1)) <= 1e-9 && std::abs(fpa - 25.0 / std::sqrt(2.0)) <= 1e-9;
    return Outcome{ok, cfmt("U_adv %.17g (hand 0.4), U_adv' %g/%g/%g (0/1/0.4), margin %.12g (-0.1), "
                           "feature loss %.12g (25/sqrt2 = %.12g)",
                           u, p0, p1, p4, margin, fpa, 25.0 / std::sqrt(2.0))};
  });

  // End-to-end pipeline; criteria 3 to 7 use its trained models.
  const fs::path e2e_root = work / "e2e";
  std::optional<Run> run;
  std::string pipeline_error;
  {
    const auto t0 = std::chrono::steady_clock::now();
    pipeline_error = run_pipeline(e2e_config, e2e_root, nullptr);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("     toy pipeline finished in %.0f s%s\n", secs, pipeline_error.empty() ? "" : " with errors");
    if (pipeline_error.empty()) {
      Run r;
      r.cfg = load(e2e_config, config::Command::report, e2e_root);
      r.dir = r.cfg.run_dir();
      r.plan = pipeline::build_plan(r.cfg, r.dir);
      r.records = pipeline::load_perturbations(r.cfg, r.dir);
      r.tables = experiments::ResultsTable::read_csv(r.dir / "tables" / "report.csv");
      r.scores = experiments::parse_score_raw([&] {
        std::ifstream in(r.dir / "scores" / "detection.csv");
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
      }());
      std::ifstream in(r.dir / "manifests" / "train-model.json");
      r.train_manifest = nlohmann::json::parse(in);
      run = std::move(r);
    }
  }
  auto need_run = [&]() -> const Run& {
    if (!run) throw std::runtime_error("toy pipeline failed: " + pipeline_error);
    return *run;
  };

  suite.run(3, "attack input gradients match central differences (10 coordinates per head and loss)", [&] {
    const Run& r = need_run();
    double worst = 0.0;
    int checked = 0;
    for (const auto& b : r.plan.models) {
      const auto ep = data::sample_episode_with_fixed_target(*r.plan.test, 5, 5, 75, 1, std::nullopt, 77);
      const auto ctx = attacks::context_from_episode(ep);
      const Tensor x = ep.slot_support(0);
      for (auto kind : {attacks::AttackKind::pgd, attacks::AttackKind::cw_sgd}) {
        const auto lg = attacks::attack_loss(*b.model, x, ctx, kind, 0.1);
        Rng rng(derive_seed(5, {static_cast<std::uint64_t>(checked)}));
        std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
        for (int k = 0; k < 10; ++k, ++checked) {
          const std::size_t i = pick(rng);
          const double h = 1e-6;
          Tensor xp = x, xm = x;
          xp[i] += h;
          xm[i] -= h;
          const double fd =
              (attacks::attack_loss(*b.model, xp, ctx, kind, 0.1).loss -
               attacks::attack_loss(*b.model, xm, ctx, kind, 0.1).loss) / (2 * h);
          const double rel = std::abs(lg.grad[i] - fd) / std::max({std::abs(lg.grad[i]), std::abs(fd), 1e-5});
          worst = std::max(worst, rel);
        }
      }
    }
    return Outcome{worst < 1e-3 && checked >= 40,
                   cfmt("%d coordinates over %zu heads x 2 losses, max relative error %.3g (tol 1e-3)", checked,
                       r.plan.models.size(), worst)};
  });

  suite.run(4, "every PGD iterate stays in the 12/255 ball and in [0, 1]", [&] {
    const Run& r = need_run();
    const double eps = 12.0 / 255.0;
    double worst = 0.0;
    bool in_range = true;
    int iterates = 0;
    for (const auto& b : r.plan.models) {
      for (int cls : {0, 7, 13}) {
        attacks::AttackConfig c;
        c.epsilon = eps;
        c.eta = 0.05;
        c.iterations = 100;
        c.seed = 11;
        const Tensor base = attacks::zero_record(*b.model, *r.plan.test, cls, 5, 5, c.seed).base_support;
        const auto rec = attacks::run_pgd(*b.model, *r.plan.test, cls, 5, 5, c, [&](int, const Tensor& x) {
          ++iterates;
          for (std::size_t i = 0; i < x.size(); ++i) {
            worst = std::max(worst, std::abs(x[i] - base[i]));
            in_range = in_range && x[i] >= 0.0 && x[i] <= 1.0;
          }
        });
        for (double d : rec.deltas.values()) worst = std::max(worst, std::abs(d));
      }
    }
    return Outcome{worst <= eps && in_range,
                   cfmt("%d iterates, max |x - x_orig| = %.17g <= eps = %.17g, all pixels in [0,1]: %s", iterates,
                       worst, eps, in_range ? "yes" : "no")};
  });

  suite.run(5, "identity filter gives U_adv = 0 and AUROC = 0.5 exactly", [&] {
    const Run& r = need_run();
    std::size_t supports = 0, nonzero = 0;
    for (const auto& b : r.plan.models) {
      for (const auto& e : r.records) {
        if (e.model != b.name) continue;
        const Tensor s = e.record.adversarial_support();
        const auto ctx = detection::random_context(*r.plan.test, e.record.target_class, 5, 4)(supports);
        for (const auto& sp : detection::enumerate_splits(5)) {
          nonzero += detection::u_adv(*b.model, filters::Filter::identity(), s, ctx, sp) != 0.0 ? 1 : 0;
        }
        ++supports;
      }
    }
    std::vector<double> aurocs;
    for (const auto& t : r.tables.rows()) {
      if (t.metric == "auroc" && t.filter == "identity" && t.statistic == "logits_l1") aurocs.push_back(t.mean);
    }
    const bool ok = nonzero == 0 && !aurocs.empty() &&
                    std::all_of(aurocs.begin(), aurocs.end(), [](double a) { return a == 0.5; });
    return Outcome{ok, cfmt("%zu supports x 5 splits with nonzero U_adv: %zu; %zu identity AUROC rows, all 0.5: %s",
                           supports, nonzero, aurocs.size(), ok ? "yes" : "no")};
  });

  suite.run(6, "end-to-end toy pipeline reproduces the reported trends", [&] {
    const Run& r = need_run();
    std::vector<std::string> notes;
    bool ok = true;
    auto check = [&](bool cond, const std::string& text) {
      ok = ok && cond;
      notes.push_back(std::string(cond ? "" : "NOT ") + text);
    };
    for (const auto& b : r.plan.models) {
      const std::string& m = b.name;
      // (a)
      const double val = r.train_manifest.at("models").at(m).at("best_val_accuracy").get<double>();
      check(val > 0.8, cfmt("a:%s val acc %.3f > 0.8", m.c_str(), val));
      // (b)
      const double clean_err = require(row(r.tables, "asr", m, "none", "fixed_supports", "-", "-"), m + " control");
      const double pgd_fixed = require(row(r.tables, "asr", m, "pgd", "fixed_supports", "-", "-"), m + " pgd asr");
      check(pgd_fixed >= clean_err + 0.30,
            cfmt("b:%s PGD ASR(i) %.3f >= clean err %.3f + 0.30", m.c_str(), pgd_fixed, clean_err));
      // (c)
      for (const char* a : {"pgd", "cw_sgd"}) {
        const double fi = require(row(r.tables, "asr", m, a, "fixed_supports", "-", "-"), m + " asr (i)");
        const double fn = require(row(r.tables, "asr", m, a, "new_supports", "-", "-"), m + " asr (ii)");
        check(fi >= fn, cfmt("c:%s %s ASR(i) %.3f >= ASR(ii) %.3f", m.c_str(), a, fi, fn));
      }
      // (d) on the PGD supports; CW-SGD values are reported only
      {
        const double fpa = require(row(r.tables, "auroc", m, "pgd", "-", "fpa", "logits_l1"), m + " fpa auroc");
        const double noise = require(row(r.tables, "auroc", m, "pgd", "-", "noise", "logits_l1"), m + " noise auroc");
        check(fpa >= 0.8 && fpa > noise,
              cfmt("d:%s pgd FPA AUROC %.3f >= 0.8 and > noise %.3f", m.c_str(), fpa, noise));
        const double cw = require(row(r.tables, "auroc", m, "cw_sgd", "-", "fpa", "logits_l1"), m + " cw auroc");
        const double cw_noise = require(row(r.tables, "auroc", m, "cw_sgd", "-", "noise", "logits_l1"), m + " cw");
        notes.push_back(cfmt("info:%s cw_sgd FPA AUROC %.3f, noise %.3f", m.c_str(), cw, cw_noise));
      }
    }
    // (e) seeded repetitions of the FPA detection suite with fresh contexts, splits and clean supports
    experiments::ExperimentPlan plan = r.plan;
    plan.filters = {filters::FilterKind::fpa};
    plan.statistics = {detection::Statistic::logits_l1, detection::Statistic::hard_label};
    std::map<std::string, int> wins;
    const int reps = 5;
    for (int rep = 0; rep < reps; ++rep) {
      plan.seed = r.plan.seed + 1000 + static_cast<std::uint64_t>(rep);
      const auto det = experiments::run_detection_suite(plan, r.records);
      for (const auto& b : plan.models) {
        for (const char* a : {"pgd", "cw_sgd"}) {
          const double l1 = require(row(det.table, "auroc", b.name, a, "-", "fpa", "logits_l1"), "rep l1");
          const double hl = require(row(det.table, "auroc", b.name, a, "-", "fpa", "hard_label"), "rep hard");
          wins[b.name + " " + a] += l1 >= hl ? 1 : 0;
        }
      }
    }
    for (const auto& [key, w] : wins) {
      check(2 * w > reps, cfmt("e:%s AUROC(U_adv) >= AUROC(U_adv') in %d/%d", key.c_str(), w, reps));
    }
    std::string detail;
    for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
    return Outcome{ok, detail};
  });

  suite.run(7, "5% FPR threshold holds on held-out clean supports", [&] {
    const Run& r = need_run();
    const auto& test = *r.plan.test;
    bool ok = true;
    std::string detail;
    for (const auto& b : r.plan.models) {
      const auto ae = b.autoencoders.at(filters::FilterKind::fpa);
      const auto filter = filters::Filter::autoencoder(ae);
      auto clean_scores = [&](int n, std::uint64_t stream) {
        std::vector<double> out;
        for (int i = 0; i < n; ++i) {
          Rng rng(derive_seed(r.plan.seed, {0x7e57, stream, static_cast<std::uint64_t>(i)}));
          const int cls = std::uniform_int_distribution<int>(0, test.num_classes() - 1)(rng);
          const Tensor support = test.batch(cls, sample_without_replacement(test.count(cls), 5, rng));
          out.push_back(detection::score_support_set(*b.model, filter, support,
                                                     detection::random_context(test, cls, 5, 4),
                                                     detection::Statistic::logits_l1,
                                                     detection::SplitMode::single_random, rng())
                            .value);
        }
        return out;
      };
      const auto calibration = clean_scores(1000, 1);
      const auto held_out = clean_scores(500, 2);
      const double t = detection::threshold_at_fpr(calibration, 0.05);
      const double fpr = detection::flagged_fraction(held_out, t);
      ok = ok && fpr >= 0.02 && fpr <= 0.08;
      detail += cfmt("%s%s: T = %.4g from 1000 clean, held-out FPR %.3f on 500 (want [0.02, 0.08])",
                    detail.empty() ? "" : "; ", b.name.c_str(), t, fpr);
    }
    return Outcome{ok, detail};
  });

  suite.run(8, "every command is hash-identical when rerun", [&] {
    std::map<std::string, std::string> a, b;
    const std::string ea = run_pipeline(smoke_config, work / "rerun-a", &a);
    const std::string eb = run_pipeline(smoke_config, work / "rerun-b", &b);
    if (!ea.empty() || !eb.empty()) return Outcome{false, "pipeline failed: " + ea + eb};
    std::size_t differing = 0;
    for (const auto& [rel, h] : a) differing += b.count(rel) && b.at(rel) == h ? 0 : 1;
    differing += b.size() > a.size() ? b.size() - a.size() : 0;
    return Outcome{differing == 0 && a.size() > 20,
                   cfmt("%zu artifacts over 7 commands in two output roots, %zu differ", a.size(), differing)};
  });

  std::printf("%s: %d of 8 criteria failed\n", suite.failed() ? "FAILED" : "OK", suite.failed());
  return suite.failed() ? 1 : 0;
}
