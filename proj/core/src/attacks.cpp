#include "fsad/attacks.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "fsad/ops.hpp"
#include "fsad/random.hpp"
#include "fsad/stats.hpp"

namespace fsad::attacks {
namespace {

constexpr std::uint64_t kBaseTag = 0xba5e;
constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kStepTag = 0x57e9;

void check_range(bool ok, const std::string& field, const std::string& requirement) {
  if (!ok) throw std::invalid_argument("attack." + field + " " + requirement);
}

// Frozen view of the model: a deep copy only when the caller's model still
// tracks parameter gradients.
class FrozenModel {
 public:
  explicit FrozenModel(const models::FewShotModel& model) {
    if (model.frozen()) {
      ref_ = &model;
    } else {
      copy_.emplace(model);
      copy_->set_trainable(false);
      ref_ = &*copy_;
    }
  }
  const models::FewShotModel& get() const { return *ref_; }

 private:
  std::optional<models::FewShotModel> copy_;
  const models::FewShotModel* ref_ = nullptr;
};

void check_target(const data::Dataset& ds, int target_class, int ways, int shots) {
  if (target_class < 0 || target_class >= ds.num_classes()) {
    throw AttackError("target class " + std::to_string(target_class) + " is absent from the " +
                      data::to_string(ds.split()) + " split");
  }
  if (ways < 2 || shots < 1) throw AttackError("attacks need ways >= 2 and shots >= 1");
}

struct Start {
  Tensor base;
  std::vector<int> sources;
};

Start draw_base(const data::Dataset& ds, int target_class, int shots, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kBaseTag, static_cast<std::uint64_t>(target_class)}));
  Start s;
  s.sources = sample_without_replacement(ds.count(target_class), shots, rng);
  s.base = ds.batch(target_class, s.sources);
  return s;
}

// Projection onto [base - eps, base + eps] ∩ [0, 1] such that the computed
// difference x - base also respects the bound despite rounding.
double project(double v, double base, double epsilon) {
  v = std::clamp(v, base - epsilon, base + epsilon);
  while (v - base > epsilon) v = std::nextafter(v, -1.0);
  while (base - v > epsilon) v = std::nextafter(v, 2.0);
  return std::clamp(v, 0.0, 1.0);
}

// x0 = clip(base + U(-eps, eps), 0, 1)
Tensor initial_point(const Tensor& base, double epsilon, std::uint64_t seed, int target_class) {
  Tensor x = base;
  if (epsilon <= 0.0) return x;
  Rng rng(derive_seed(seed, {kInitTag, static_cast<std::uint64_t>(target_class)}));
  std::uniform_real_distribution<double> u(-epsilon, epsilon);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = project(base[i] + u(rng), base[i], epsilon);
  return x;
}

PerturbationRecord make_record(const models::FewShotModel& model, const data::Dataset& ds, int target_class,
                               int ways, int shots, const AttackConfig& cfg, Start start, const Tensor& x) {
  PerturbationRecord r;
  r.target_class = target_class;
  r.target_class_name = ds.class_name(target_class);
  r.ways = ways;
  r.shots = shots;
  r.deltas = x;
  for (std::size_t i = 0; i < x.size(); ++i) r.deltas[i] = x[i] - start.base[i];
  r.base_support = std::move(start.base);
  r.base_sources = std::move(start.sources);
  r.config = cfg;
  r.model_hash = model.hash();
  r.dataset_hash = ds.hash();
  return r;
}

}  // namespace

std::string to_string(AttackKind kind) { return kind == AttackKind::pgd ? "pgd" : "cw_sgd"; }

AttackKind attack_from_string(const std::string& name) {
  if (name == "pgd") return AttackKind::pgd;
  if (name == "cw_sgd" || name == "cw") return AttackKind::cw_sgd;
  throw std::invalid_argument("unknown attack kind '" + name + "' (expected pgd or cw_sgd)");
}

void AttackConfig::validate() const {
  check_range(std::isfinite(epsilon) && epsilon >= 0.0 && epsilon <= 1.0, "epsilon", "must lie in [0, 1]");
  check_range(std::isfinite(eta) && eta >= 0.0, "eta", "must be >= 0");
  check_range(iterations >= 1, "iterations", "must be >= 1");
  check_range(std::isfinite(kappa) && kappa >= 0.0, "kappa", "must be >= 0");
  check_range(std::isfinite(cw_const) && cw_const >= 0.0, "const", "must be >= 0");
  check_range(queries_per_class >= 1, "queries_per_class", "must be >= 1");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"kind", to_string(kind)}, {"epsilon", epsilon},     {"eta", eta},
          {"iterations", iterations}, {"kappa", kappa},        {"const", cw_const},
          {"queries_per_class", queries_per_class},            {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.kind = attack_from_string(j.at("kind").get<std::string>());
  c.epsilon = j.at("epsilon").get<double>();
  c.eta = j.at("eta").get<double>();
  c.iterations = j.at("iterations").get<int>();
  c.kappa = j.at("kappa").get<double>();
  c.cw_const = j.at("const").get<double>();
  c.queries_per_class = j.at("queries_per_class").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Tensor PerturbationRecord::adversarial_support() const {
  require_shape(deltas, base_support.shape(), "perturbation deltas");
  Tensor x = base_support;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] + deltas[i], 0.0, 1.0);
  return x;
}

Archive PerturbationRecord::to_archive() const {
  Archive a("fsad.perturbation");
  a.meta()["target_class"] = target_class;
  a.meta()["target_class_name"] = target_class_name;
  a.meta()["ways"] = ways;
  a.meta()["shots"] = shots;
  a.meta()["base_sources"] = base_sources;
  a.meta()["config"] = config.to_json();
  a.meta()["model_hash"] = model_hash;
  a.meta()["dataset_hash"] = dataset_hash;
  a.put("deltas", deltas);
  a.put("base_support", base_support);
  return a;
}

PerturbationRecord PerturbationRecord::from_archive(const Archive& a) {
  if (a.kind() != "fsad.perturbation") throw ArchiveError("archive is not a perturbation record: " + a.kind());
  PerturbationRecord r;
  const auto& m = a.meta();
  r.target_class = m.at("target_class").get<int>();
  r.target_class_name = m.at("target_class_name").get<std::string>();
  r.ways = m.at("ways").get<int>();
  r.shots = m.at("shots").get<int>();
  r.base_sources = m.at("base_sources").get<std::vector<int>>();
  r.config = AttackConfig::from_json(m.at("config"));
  r.model_hash = m.at("model_hash").get<std::string>();
  r.dataset_hash = m.at("dataset_hash").get<std::string>();
  r.deltas = a.get("deltas");
  r.base_support = a.get("base_support");
  require_shape(r.deltas, r.base_support.shape(), "perturbation deltas");
  return r;
}

data::Episode attack_episode(const data::Dataset& ds, int target_class, int ways, int shots, const Tensor& x,
                             const std::vector<int>& sources, const AttackConfig& cfg, int iteration) {
  const std::uint64_t seed =
      derive_seed(cfg.seed, {kStepTag, static_cast<std::uint64_t>(target_class), static_cast<std::uint64_t>(iteration)});
  return data::sample_episode_with_fixed_target(ds, ways, shots, cfg.queries_per_class * ways, target_class,
                                                data::FixedSupport{x, sources}, seed);
}

AttackContext context_from_episode(const data::Episode& ep) {
  if (ep.ways < 2) throw AttackError("attack episode needs at least two classes");
  AttackContext c;
  c.ways = ep.ways;
  c.shots = ep.shots;
  c.other_support = ep.support.slice(ep.shots, ep.ways * ep.shots);
  std::vector<Tensor> q;
  for (int i = 0; i < ep.num_queries(); ++i) {
    if (ep.query_labels[static_cast<std::size_t>(i)] == 0) q.push_back(ep.query.item(i));
  }
  if (q.empty()) throw AttackError("target class has no queries in the attack episode");
  c.target_queries = stack(q);
  return c;
}

double cw_margin(std::span<const double> logits, int target, double kappa) {
  if (target < 0 || target >= static_cast<int>(logits.size()) || logits.size() < 2) {
    throw std::invalid_argument("cw_margin: target outside the logit vector");
  }
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (static_cast<int>(i) != target) best_other = std::max(best_other, logits[i]);
  }
  return std::max(-kappa, best_other - logits[static_cast<std::size_t>(target)]);
}

LossAndGrad attack_loss(const models::FewShotModel& model, const Tensor& adv_support, const AttackContext& context,
                        AttackKind kind, double kappa) {
  if (context.target_queries.empty()) throw AttackError("target class queries missing from the attack episode");
  if (adv_support.rank() != 4 || adv_support.dim(0) != context.shots) {
    throw AttackError("adversarial support must hold " + std::to_string(context.shots) + " images, got shape " +
                      fsad::to_string(adv_support.shape()));
  }
  if (context.other_support.rank() != 4 || context.other_support.dim(0) != (context.ways - 1) * context.shots) {
    throw AttackError("attack context is missing supports for the other " + std::to_string(context.ways - 1) +
                      " classes");
  }
  FrozenModel frozen(model);
  ag::Var adv(adv_support, true);
  const std::vector<ag::Var> parts{adv, ag::Var(context.other_support)};
  ag::Var logits = frozen.get().classify(ag::concat(parts), context.ways, context.shots, ag::Var(context.target_queries));
  const std::vector<int> labels(static_cast<std::size_t>(logits.shape()[0]), 0);
  ag::Var loss = kind == AttackKind::pgd ? ag::cross_entropy(logits, labels) : ag::misclassification_margin_loss(logits, labels, kappa);
  ag::backward(loss);
  return {loss.value()[0], adv.grad()};
}

PerturbationRecord run_pgd(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                           int shots, const AttackConfig& cfg, const IterateObserver& observer) {
  if (cfg.kind != AttackKind::pgd) throw AttackError("run_pgd called with a " + to_string(cfg.kind) + " config");
  cfg.validate();
  check_target(ds, target_class, ways, shots);
  FrozenModel frozen(model);
  Start start = draw_base(ds, target_class, shots, cfg.seed);
  const Tensor& base = start.base;
  if (cfg.epsilon == 0.0) {
    spdlog::warn("pgd with epsilon = 0 on class {}: the record carries zero deltas", target_class);
    if (observer) observer(0, base);
    return make_record(frozen.get(), ds, target_class, ways, shots, cfg, std::move(start), base);
  }
  Tensor x = initial_point(base, cfg.epsilon, cfg.seed, target_class);
  if (observer) observer(0, x);
  for (int it = 1; it <= cfg.iterations; ++it) {
    const data::Episode ep = attack_episode(ds, target_class, ways, shots, x, start.sources, cfg, it);
    const LossAndGrad lg = attack_loss(frozen.get(), x, context_from_episode(ep), AttackKind::pgd, cfg.kappa);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double g = lg.grad[i];
      const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
      x[i] = project(x[i] + cfg.eta * s, base[i], cfg.epsilon);
      if (std::abs(x[i] - base[i]) > cfg.epsilon || x[i] < 0.0 || x[i] > 1.0) {
        throw std::logic_error("pgd iterate left the feasible set");
      }
    }
    if (observer) observer(it, x);
  }
  return make_record(frozen.get(), ds, target_class, ways, shots, cfg, std::move(start), x);
}

PerturbationRecord run_cw_sgd(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                              int shots, const AttackConfig& cfg, const IterateObserver& observer) {
  if (cfg.kind != AttackKind::cw_sgd) throw AttackError("run_cw_sgd called with a " + to_string(cfg.kind) + " config");
  cfg.validate();
  check_target(ds, target_class, ways, shots);
  FrozenModel frozen(model);
  Start start = draw_base(ds, target_class, shots, cfg.seed);
  const Tensor& base = start.base;
  Tensor x = initial_point(base, cfg.epsilon, cfg.seed, target_class);
  if (observer) observer(0, x);
  Tensor step(x.shape());
  for (int it = 1; it <= cfg.iterations; ++it) {
    double norm2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) norm2 += (x[i] - base[i]) * (x[i] - base[i]);
    const double norm = std::sqrt(norm2);
    for (std::size_t i = 0; i < x.size(); ++i) step[i] = norm > 0.0 ? (x[i] - base[i]) / norm : 0.0;
    if (cfg.cw_const != 0.0) {
      const data::Episode ep = attack_episode(ds, target_class, ways, shots, x, start.sources, cfg, it);
      const LossAndGrad lg = attack_loss(frozen.get(), x, context_from_episode(ep), AttackKind::cw_sgd, cfg.kappa);
      for (std::size_t i = 0; i < x.size(); ++i) step[i] += cfg.cw_const * lg.grad[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] - cfg.eta * step[i], 0.0, 1.0);
    if (observer) observer(it, x);
  }
  return make_record(frozen.get(), ds, target_class, ways, shots, cfg, std::move(start), x);
}

PerturbationRecord run_attack(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                              int shots, const AttackConfig& cfg, const IterateObserver& observer) {
  return cfg.kind == AttackKind::pgd ? run_pgd(model, ds, target_class, ways, shots, cfg, observer)
                                     : run_cw_sgd(model, ds, target_class, ways, shots, cfg, observer);
}

PerturbationRecord zero_record(const models::FewShotModel& model, const data::Dataset& ds, int target_class, int ways,
                               int shots, std::uint64_t seed) {
  check_target(ds, target_class, ways, shots);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  cfg.eta = 0.0;
  cfg.iterations = 1;
  cfg.seed = seed;
  Start start = draw_base(ds, target_class, shots, seed);
  Tensor x = start.base;
  return make_record(model, ds, target_class, ways, shots, cfg, std::move(start), x);
}

std::string to_string(Scenario s) { return s == Scenario::fixed_supports ? "fixed_supports" : "new_supports"; }

Scenario scenario_from_string(const std::string& name) {
  if (name == "fixed_supports" || name == "fixed") return Scenario::fixed_supports;
  if (name == "new_supports" || name == "new") return Scenario::new_supports;
  throw std::invalid_argument("unknown scenario '" + name + "' (expected fixed_supports or new_supports)");
}

AsrReport evaluate_asr(const models::FewShotModel& model, const PerturbationRecord& record, const data::Dataset& ds,
                       Scenario scenario, int n_episodes, int queries_per_class, std::uint64_t seed) {
  if (n_episodes < 1 || queries_per_class < 1) throw AttackError("evaluate_asr needs episodes and queries >= 1");
  if (record.model_hash != model.hash()) {
    throw AttackError("perturbation record was produced for model " + record.model_hash.substr(0, 12) +
                      ", not for the supplied model " + model.hash().substr(0, 12));
  }
  Shape expected = ds.image_shape();
  expected.insert(expected.begin(), record.shots);
  if (record.deltas.shape() != expected) {
    throw AttackError("deltas of shape " + fsad::to_string(record.deltas.shape()) + " do not match fresh supports of shape " +
                      fsad::to_string(expected));
  }
  check_target(ds, record.target_class, record.ways, record.shots);
  const Tensor adv = record.adversarial_support();
  AsrReport report;
  for (int e = 0; e < n_episodes; ++e) {
    const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(e)});
    std::optional<data::FixedSupport> fixed;
    if (scenario == Scenario::fixed_supports) fixed = data::FixedSupport{adv, record.base_sources};
    data::Episode ep = data::sample_episode_with_fixed_target(ds, record.ways, record.shots,
                                                              queries_per_class * record.ways, record.target_class,
                                                              fixed, s);
    if (scenario == Scenario::new_supports) {
      for (std::size_t i = 0; i < record.deltas.size(); ++i) {
        ep.support[i] = std::clamp(ep.support[i] + record.deltas[i], 0.0, 1.0);
      }
    }
    const AttackContext ctx = context_from_episode(ep);
    const Tensor support = ep.support;
    const Tensor logits = model.classify(support, ep.ways, ep.shots, ctx.target_queries);
    const std::vector<int> pred = models::argmax_rows(logits);
    const auto wrong = std::count_if(pred.begin(), pred.end(), [](int p) { return p != 0; });
    report.per_episode.push_back(static_cast<double>(wrong) / static_cast<double>(pred.size()));
  }
  const Summary s = summarize(report.per_episode);
  report.mean = s.mean;
  report.std = s.std;
  return report;
}

}  // namespace fsad::attacks
