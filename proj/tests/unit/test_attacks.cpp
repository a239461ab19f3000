#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "fsad/archive.hpp"
#include "fsad/attacks.hpp"
#include "fsad/random.hpp"

using namespace fsad;
using namespace fsad::attacks;
using models::HeadKind;

namespace {

const data::Dataset& test_split() { return fsad::testing::toy_splits().at(data::Split::test); }

AttackConfig pgd_config(int iterations, std::uint64_t seed = 0) {
  AttackConfig c;
  c.kind = AttackKind::pgd;
  c.epsilon = 12.0 / 255.0;
  c.eta = 0.05;
  c.iterations = iterations;
  c.seed = seed;
  return c;
}

AttackConfig cw_config(int iterations, std::uint64_t seed = 0) {
  AttackConfig c = pgd_config(iterations, seed);
  c.kind = AttackKind::cw_sgd;
  c.eta = 0.05;
  return c;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

double l2(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Fraction of target queries classified correctly, over a fixed set of episodes.
double target_accuracy(const models::FewShotModel& m, const Tensor& support, const std::vector<int>& sources, int cls,
                       int episodes) {
  int right = 0, total = 0;
  for (int e = 0; e < episodes; ++e) {
    const auto ep = data::sample_episode_with_fixed_target(test_split(), 5, 5, 75, cls,
                                                           data::FixedSupport{support, sources}, 900 + e);
    const auto ctx = context_from_episode(ep);
    const auto pred = models::argmax_rows(m.classify(ep.support, 5, 5, ctx.target_queries));
    right += static_cast<int>(std::count(pred.begin(), pred.end(), 0));
    total += static_cast<int>(pred.size());
  }
  return static_cast<double>(right) / total;
}

double mean_margin(const models::FewShotModel& m, const Tensor& support, const std::vector<int>& sources, int cls,
                   int episodes) {
  double s = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const auto ep = data::sample_episode_with_fixed_target(test_split(), 5, 5, 75, cls,
                                                           data::FixedSupport{support, sources}, 900 + e);
    s += attack_loss(m, support, context_from_episode(ep), AttackKind::cw_sgd, 0.1).loss;  // untargeted margin
  }
  return s / episodes;
}

// Majority of checkpoints at or below their predecessor, and the last below the first.
bool decreasing_trend(const std::vector<double>& v) {
  int down = 0;
  for (std::size_t i = 1; i < v.size(); ++i) down += v[i] <= v[i - 1] ? 1 : 0;
  return 2 * down > static_cast<int>(v.size() - 1) && v.back() < v.front();
}

}  // namespace

TEST(CwMargin, HandComputedExample) {
  const std::vector<double> h{2.0, 0.5, 1.0};
  EXPECT_DOUBLE_EQ(cw_margin(h, 0, 0.1), -0.1);
  EXPECT_DOUBLE_EQ(cw_margin(h, 1, 0.1), 1.5);
  EXPECT_DOUBLE_EQ(cw_margin(h, 2, 0.0), 1.0);
  EXPECT_THROW(cw_margin(h, 3, 0.1), std::invalid_argument);
}

TEST(AttackConfig, ValidationNamesTheField) {
  AttackConfig c;
  c.epsilon = -1;
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("epsilon"), std::string::npos);
  }
  c = AttackConfig{};
  c.iterations = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.kappa = -0.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttackConfig{};
  c.kind = AttackKind::cw_sgd;
  c.seed = 77;
  EXPECT_EQ(AttackConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(AttackLoss, FiniteOnRandomModelAndScopedToTargetSupport) {
  const auto m = fsad::testing::random_model(HeadKind::relation);
  const auto ep = data::sample_episode_with_fixed_target(test_split(), 5, 5, 75, 2, std::nullopt, 3);
  const auto ctx = context_from_episode(ep);
  EXPECT_EQ(ctx.target_queries.dim(0), 15);
  EXPECT_EQ(ctx.other_support.dim(0), 20);
  for (AttackKind k : {AttackKind::pgd, AttackKind::cw_sgd}) {
    const auto lg = attack_loss(m, ep.slot_support(0), ctx, k, 0.1);
    EXPECT_TRUE(std::isfinite(lg.loss));
    EXPECT_EQ(lg.grad.shape(), ep.slot_support(0).shape());
    for (double g : lg.grad.values()) ASSERT_TRUE(std::isfinite(g));
  }
}

TEST(AttackLoss, CrossEntropyGradientMatchesFiniteDifferences) {
  const auto& m = fsad::testing::trained_model(HeadKind::cross_attention);
  const auto ep = data::sample_episode_with_fixed_target(test_split(), 5, 5, 75, 4, std::nullopt, 5);
  const auto ctx = context_from_episode(ep);
  const Tensor x = ep.slot_support(0);
  const auto lg = attack_loss(m, x, ctx, AttackKind::pgd, 0.1);
  auto f = [&](const Tensor& s) { return attack_loss(m, s, ctx, AttackKind::pgd, 0.1).loss; };
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick(rng);
    EXPECT_LT(fsad::testing::relative_error(lg.grad[i], fsad::testing::central_difference(f, x, i, 1e-6), 1e-5),
              1e-3);
  }
}

TEST(AttackLoss, TargetQueriesRequired) {
  const auto m = fsad::testing::random_model(HeadKind::relation);
  AttackContext ctx;
  ctx.ways = 5;
  ctx.shots = 5;
  EXPECT_THROW(attack_loss(m, Tensor({5, 3, 16, 16}), ctx, AttackKind::pgd, 0.1), AttackError);
}

TEST(AttackLoss, ModelParametersReceiveNoGradient) {
  models::FewShotModel m = fsad::testing::trained_model(HeadKind::relation);
  m.set_trainable(true);
  const std::string before = m.hash();
  const auto ep = data::sample_episode_with_fixed_target(test_split(), 5, 5, 75, 1, std::nullopt, 2);
  attack_loss(m, ep.slot_support(0), context_from_episode(ep), AttackKind::pgd, 0.1);
  run_pgd(m, test_split(), 1, 5, 5, pgd_config(2));
  for (const auto& p : m.parameters()) EXPECT_FALSE(p.var.has_grad()) << p.name;
  EXPECT_EQ(m.hash(), before);
}

TEST(Pgd, EveryIterateStaysInTheEpsilonBall) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  const double eps = 12.0 / 255.0;
  Tensor base;
  int seen = 0;
  const auto rec = run_pgd(m, test_split(), 7, 5, 5, pgd_config(50), [&](int it, const Tensor& x) {
    ++seen;
    if (it == 0) base = x;  // the base is recovered from the record afterwards
    for (double v : x.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  });
  EXPECT_EQ(seen, 51);
  EXPECT_LE(max_abs(rec.deltas), eps);
  const Tensor adv = rec.adversarial_support();
  for (std::size_t i = 0; i < adv.size(); ++i) {
    EXPECT_LE(std::abs(adv[i] - rec.base_support[i]), eps);
    EXPECT_DOUBLE_EQ(adv[i], rec.base_support[i] + rec.deltas[i]);
  }
  // re-run with an observer that checks against the true base
  run_pgd(m, test_split(), 7, 5, 5, pgd_config(50), [&](int, const Tensor& x) {
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_LE(std::abs(x[i] - rec.base_support[i]), eps);
  });
}

TEST(Pgd, NoStepLeavesOnlyInitialNoise) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  AttackConfig c = pgd_config(1);
  c.eta = 0.0;
  Tensor x0;
  const auto rec = run_pgd(m, test_split(), 3, 5, 5, c, [&](int it, const Tensor& x) {
    if (it == 0) x0 = x;
  });
  double nonzero = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    EXPECT_EQ(rec.deltas[i], x0[i] - rec.base_support[i]);
    nonzero += rec.deltas[i] != 0.0 ? 1 : 0;
  }
  EXPECT_GT(nonzero, 0.9 * static_cast<double>(x0.size()));
  EXPECT_LE(max_abs(rec.deltas), c.epsilon);
}

TEST(Pgd, ZeroEpsilonGivesZeroDeltas) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  AttackConfig c = pgd_config(3);
  c.epsilon = 0.0;
  const auto rec = run_pgd(m, test_split(), 3, 5, 5, c);
  EXPECT_EQ(max_abs(rec.deltas), 0.0);
}

TEST(Pgd, TargetAccuracyTrendsDown) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  std::map<int, Tensor> checkpoints;
  const auto rec = run_pgd(m, test_split(), 11, 5, 5, pgd_config(50), [&](int it, const Tensor& x) {
    if (it % 10 == 0) checkpoints[it] = x;
  });
  std::vector<double> acc;
  for (const auto& [it, x] : checkpoints) acc.push_back(target_accuracy(m, x, rec.base_sources, 11, 10));
  EXPECT_TRUE(decreasing_trend(acc)) << ::testing::PrintToString(acc);
}

TEST(Pgd, BadTargetAndWrongKindRejected) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  EXPECT_THROW(run_pgd(m, test_split(), 99, 5, 5, pgd_config(1)), AttackError);
  EXPECT_THROW(run_pgd(m, test_split(), 0, 5, 5, cw_config(1)), AttackError);
}

TEST(CwSgd, MarginLossTrendsDown) {
  const auto& m = fsad::testing::trained_model(HeadKind::cross_attention);
  std::map<int, Tensor> checkpoints;
  const auto rec = run_cw_sgd(m, test_split(), 6, 5, 5, cw_config(50), [&](int it, const Tensor& x) {
    if (it % 10 == 0) checkpoints[it] = x;
  });
  std::vector<double> loss;
  for (const auto& [it, x] : checkpoints) loss.push_back(mean_margin(m, x, rec.base_sources, 6, 10));
  EXPECT_TRUE(decreasing_trend(loss)) << ::testing::PrintToString(loss);
}

TEST(CwSgd, ZeroConstShrinksDeltas) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  AttackConfig c = cw_config(10);
  c.cw_const = 0.0;
  c.eta = 0.05;
  std::vector<Tensor> iterates;
  const auto rec = run_cw_sgd(m, test_split(), 2, 5, 5, c, [&](int, const Tensor& x) { iterates.push_back(x); });
  std::vector<double> norms;
  for (const auto& x : iterates) norms.push_back(l2(x, rec.base_support));
  for (std::size_t i = 1; i < norms.size(); ++i) EXPECT_LT(norms[i], norms[i - 1]);
  EXPECT_NEAR(norms.front() - norms.back(), 10 * c.eta, 1e-9);
}

TEST(CwSgd, LargeStepSizeGivesValidRecord) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  AttackConfig c = cw_config(5);
  c.kappa = 0.1;
  c.eta = 50.0;
  const auto rec = run_cw_sgd(m, test_split(), 0, 5, 5, c);
  EXPECT_EQ(rec.deltas.shape(), rec.base_support.shape());
  const Tensor adv = rec.adversarial_support();
  for (std::size_t i = 0; i < adv.size(); ++i) {
    ASSERT_TRUE(std::isfinite(rec.deltas[i]));
    ASSERT_TRUE(adv[i] >= 0.0 && adv[i] <= 1.0);
  }
  const auto asr = evaluate_asr(m, rec, test_split(), Scenario::fixed_supports, 5, 15, 1);
  EXPECT_GE(asr.mean, 0.0);
  EXPECT_LE(asr.mean, 1.0);
}

TEST(Attacks, DeterministicAndSeedSensitive) {
  const auto& m = fsad::testing::trained_model(HeadKind::cross_attention);
  for (const AttackConfig& c : {pgd_config(5, 3), cw_config(5, 3)}) {
    const auto a = run_attack(m, test_split(), 9, 5, 5, c);
    const auto b = run_attack(m, test_split(), 9, 5, 5, c);
    EXPECT_EQ(a.to_archive().serialize(), b.to_archive().serialize());
    AttackConfig other = c;
    other.seed = 4;
    EXPECT_NE(run_attack(m, test_split(), 9, 5, 5, other).deltas, a.deltas);
  }
}

TEST(Attacks, RecordArchiveRoundTrip) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  const auto rec = run_pgd(m, test_split(), 5, 5, 5, pgd_config(3));
  const auto back = PerturbationRecord::from_archive(Archive::deserialize(rec.to_archive().serialize()));
  EXPECT_EQ(back.deltas, rec.deltas);
  EXPECT_EQ(back.base_support, rec.base_support);
  EXPECT_EQ(back.base_sources, rec.base_sources);
  EXPECT_EQ(back.model_hash, m.hash());
  EXPECT_EQ(back.config.to_json(), rec.config.to_json());
}

TEST(Attacks, NonTargetClassesResampledEveryIteration) {
  const auto& ds = test_split();
  const Tensor x = ds.batch(0, {0, 1, 2, 3, 4});
  std::set<std::vector<int>> seen;
  for (int it = 1; it <= 10; ++it) {
    const auto ep = attack_episode(ds, 0, 5, 5, x, {0, 1, 2, 3, 4}, pgd_config(10), it);
    EXPECT_EQ(ep.class_ids[0], 0);
    EXPECT_EQ(ep.slot_support(0), x);
    seen.insert(std::vector<int>(ep.class_ids.begin() + 1, ep.class_ids.end()));
  }
  EXPECT_GE(seen.size(), 2u);
}

TEST(Asr, ZeroDeltasGiveCleanTargetError) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  const auto& ds = test_split();
  const auto rec = zero_record(m, ds, 8, 5, 5, 12);
  EXPECT_EQ(max_abs(rec.deltas), 0.0);
  for (Scenario s : {Scenario::fixed_supports, Scenario::new_supports}) {
    const auto asr = evaluate_asr(m, rec, ds, s, 20, 15, 31);
    // same episodes classified without any perturbation
    double err = 0.0;
    for (int e = 0; e < 20; ++e) {
      std::optional<data::FixedSupport> fixed;
      if (s == Scenario::fixed_supports) fixed = data::FixedSupport{rec.base_support, rec.base_sources};
      const auto ep = data::sample_episode_with_fixed_target(ds, 5, 5, 75, 8, fixed, derive_seed(31, {static_cast<std::uint64_t>(e)}));
      const auto ctx = context_from_episode(ep);
      const auto pred = models::argmax_rows(m.classify(ep.support, 5, 5, ctx.target_queries));
      err += static_cast<double>(std::count_if(pred.begin(), pred.end(), [](int p) { return p != 0; })) /
             static_cast<double>(pred.size());
    }
    EXPECT_NEAR(asr.mean, err / 20, 1e-12);
  }
}

TEST(Asr, FixedSupportsTransferAtLeastAsWellAsNewOnes) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  const auto& ds = test_split();
  double fixed = 0.0, fresh = 0.0, clean = 0.0;
  const int records = 20;
  for (int r = 0; r < records; ++r) {
    const int cls = r % ds.num_classes();
    const auto rec = run_pgd(m, ds, cls, 5, 5, pgd_config(30, static_cast<std::uint64_t>(r)));
    const auto a = evaluate_asr(m, rec, ds, Scenario::fixed_supports, 10, 15, 100 + r);
    const auto b = evaluate_asr(m, rec, ds, Scenario::new_supports, 10, 15, 100 + r);
    const auto z = evaluate_asr(m, zero_record(m, ds, cls, 5, 5, r), ds, Scenario::new_supports, 10, 15, 100 + r);
    for (const auto* rep : {&a, &b, &z}) {
      EXPECT_GE(rep->mean, 0.0);
      EXPECT_LE(rep->mean, 1.0);
      for (double v : rep->per_episode) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    }
    fixed += a.mean / records;
    fresh += b.mean / records;
    clean += z.mean / records;
  }
  EXPECT_GE(fixed, fresh);
  EXPECT_GE(fixed, clean + 0.30);
}

TEST(Asr, RejectsForeignModelAndShapeMismatch) {
  const auto& m = fsad::testing::trained_model(HeadKind::relation);
  auto rec = zero_record(m, test_split(), 1, 5, 5, 0);
  EXPECT_THROW(evaluate_asr(fsad::testing::random_model(HeadKind::relation), rec, test_split(),
                            Scenario::new_supports, 2, 15, 0),
               AttackError);
  rec.deltas = Tensor({3, 3, 16, 16});
  rec.base_support = Tensor({3, 3, 16, 16});
  EXPECT_THROW(evaluate_asr(m, rec, test_split(), Scenario::new_supports, 2, 15, 0), AttackError);
}
