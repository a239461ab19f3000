#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "fsad/archive.hpp"
#include "fsad/models.hpp"
#include "fsad/random.hpp"

using namespace fsad;
using namespace fsad::models;
using fsad::testing::central_difference;
using fsad::testing::relative_error;

namespace {

const data::Dataset& test_split() { return fsad::testing::toy_splits().at(data::Split::test); }

class HeadTest : public ::testing::TestWithParam<HeadKind> {};

Tensor uniform_images(int n, std::uint64_t seed) {
  Tensor t({n, 3, 16, 16});
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST_P(HeadTest, EncodeShapesAndDeterminism) {
  const FewShotModel m = fsad::testing::random_model(GetParam());
  const Tensor images = uniform_images(25, 1);
  const Tensor f = m.encode(images);
  ASSERT_EQ(f.dim(0), 25);
  EXPECT_EQ(Shape(f.shape().begin() + 1, f.shape().end()), m.feature_shape());
  Tensor twins({2, 3, 16, 16});
  twins.set_item(0, images.item(3));
  twins.set_item(1, images.item(3));
  const Tensor g = m.encode(twins);
  EXPECT_EQ(g.item(0), g.item(1));
}

TEST_P(HeadTest, InputGradientMatchesFiniteDifferences) {
  const FewShotModel& m = fsad::testing::trained_model(GetParam());
  const data::Episode e = data::sample_episode(test_split(), 5, 5, 10, 4);
  const Tensor w = uniform_images(1, 9).reshaped({768}).slice(0, 50);  // fixed logit weights
  auto scalar = [&](const Tensor& support) {
    const Tensor z = m.classify(support, 5, 5, e.query);
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (w[i] - 0.5) * z[i];
    return s;
  };
  ag::Var support(e.support, true);
  const ag::Var z = m.classify(support, 5, 5, ag::Var(e.query));
  Tensor wz(z.shape());
  for (std::size_t i = 0; i < wz.size(); ++i) wz[i] = w[i] - 0.5;
  ag::backward(ag::sum(ag::mul(z, ag::Var(wz))));
  const Tensor grad = support.grad();
  Rng rng(17);
  std::uniform_int_distribution<std::size_t> pick(0, e.support.size() - 1);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick(rng);
    const double fd = central_difference(scalar, e.support, i, 1e-6);
    EXPECT_LT(relative_error(grad[i], fd, 1e-5), 1e-3) << "pixel " << i << " autograd " << grad[i] << " fd " << fd;
  }
}

TEST_P(HeadTest, ClassOrderEquivariance) {
  const FewShotModel& m = fsad::testing::trained_model(GetParam());
  const data::Episode e = data::sample_episode(test_split(), 5, 5, 10, 5);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  std::vector<Tensor> slots;
  for (int k : perm) slots.push_back(e.slot_support(k));
  const Tensor permuted = concat(slots);
  const Tensor a = m.classify(e.support, 5, 5, e.query);
  const Tensor b = m.classify(permuted, 5, 5, e.query);
  for (int q = 0; q < e.num_queries(); ++q) {
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(b[q * 5 + k], a[q * 5 + perm[k]], 1e-10);
  }
}

TEST_P(HeadTest, DuplicatedSupportsLeaveLogitsUnchanged) {
  const FewShotModel& m = fsad::testing::trained_model(GetParam());
  const data::Episode e = data::sample_episode(test_split(), 5, 3, 10, 6);
  std::vector<Tensor> slots;
  for (int k = 0; k < 5; ++k) {
    slots.push_back(e.slot_support(k));
    slots.push_back(e.slot_support(k));
  }
  const Tensor doubled = concat(slots);
  const Tensor a = m.classify(e.support, 5, 3, e.query);
  const Tensor b = m.classify(doubled, 5, 6, e.query);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST_P(HeadTest, OneShotSelfMatchWinsAgainstNoise) {
  const FewShotModel& m = fsad::testing::trained_model(GetParam());
  const auto& ds = test_split();
  int wins = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(3, {static_cast<std::uint64_t>(trial)}));
    const int cls = std::uniform_int_distribution<int>(0, ds.num_classes() - 1)(rng);
    const int idx = std::uniform_int_distribution<int>(0, ds.count(cls) - 1)(rng);
    Tensor support = uniform_images(5, 1000 + trial);
    support.set_item(0, ds.image(cls, idx));
    const Tensor query = ds.batch(cls, {idx});
    const Tensor z = m.classify(support, 5, 1, query);
    if (argmax_rows(z)[0] == 0) ++wins;
  }
  EXPECT_GE(wins, 95);
}

TEST_P(HeadTest, TrainedModelBeatsBaselineAccuracy) {
  const FewShotModel& m = fsad::testing::trained_model(GetParam());
  EXPECT_TRUE(m.frozen());
  const auto rep = evaluate_accuracy(m, test_split(), 100, 5, 5, 75, 21);
  EXPECT_GT(rep.mean, 0.8);
  for (double v : m.classify(data::sample_episode(test_split(), 5, 5, 25, 1).support, 5, 5,
                             data::sample_episode(test_split(), 5, 5, 25, 2).query)
                      .values()) {
    EXPECT_TRUE(std::isfinite(v));
  }
}

TEST_P(HeadTest, CheckpointRoundTrip) {
  const FewShotModel& m = fsad::testing::trained_model(GetParam());
  const FewShotModel back = FewShotModel::from_archive(Archive::deserialize(m.to_archive().serialize()));
  EXPECT_EQ(back.hash(), m.hash());
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.head(), GetParam());
  const data::Episode e = data::sample_episode(test_split(), 5, 5, 10, 8);
  EXPECT_EQ(back.classify(e.support, 5, 5, e.query), m.classify(e.support, 5, 5, e.query));
}

INSTANTIATE_TEST_SUITE_P(Heads, HeadTest, ::testing::Values(HeadKind::relation, HeadKind::cross_attention),
                         [](const auto& info) { return to_string(info.param); });

TEST(Training, ZeroEpochsReturnsModelUnchanged) {
  const auto& splits = fsad::testing::toy_splits();
  ModelConfig mc;
  const FewShotModel init(mc);
  TrainConfig tc;
  tc.epochs = 0;
  const auto res = train_episodic(init, splits.at(data::Split::train), splits.at(data::Split::val), tc);
  EXPECT_TRUE(res.history.empty());
  EXPECT_EQ(res.best_epoch, -1);
  FewShotModel expected = init;
  expected.set_trainable(false);
  EXPECT_EQ(res.model.hash(), expected.hash());
}

TEST(Training, HistoryLengthEqualsEpochs) {
  const auto& splits = fsad::testing::toy_splits();
  TrainConfig tc;
  tc.epochs = 3;
  tc.episodes_per_epoch = 2;
  tc.val_episodes = 2;
  const auto res = train_episodic(FewShotModel(ModelConfig{}), splits.at(data::Split::train),
                                  splits.at(data::Split::val), tc);
  ASSERT_EQ(res.history.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(res.history[i].epoch, i);
}

TEST(Training, NoisySyntheticDataStillLearnable) {
  // signal 1.0, noise 0.1 -> better than 0.8 5-way 5-shot accuracy
  const FewShotModel& m = fsad::testing::trained_model(HeadKind::relation, 0.1);
  const auto rep = evaluate_accuracy(m, fsad::testing::toy_splits(0.1).at(data::Split::test), 200, 5, 5, 75, 5);
  EXPECT_GT(rep.mean, 0.8);
}

TEST(Evaluate, PerfectClassifierHasZeroWidth) {
  const EpisodeLogits oracle = [](const data::Episode& e) {
    Tensor z({e.num_queries(), e.ways});
    for (int q = 0; q < e.num_queries(); ++q) z[static_cast<std::size_t>(q * e.ways + e.query_labels[q])] = 1.0;
    return z;
  };
  const auto rep = evaluate_accuracy(oracle, test_split(), 50, 5, 5, 75, 1);
  EXPECT_DOUBLE_EQ(rep.mean, 1.0);
  EXPECT_DOUBLE_EQ(rep.half_width, 0.0);
}

TEST(Evaluate, RandomLogitsAtChance) {
  auto counter = std::make_shared<std::uint64_t>(0);
  const EpisodeLogits random = [counter](const data::Episode& e) {
    Tensor z({e.num_queries(), e.ways});
    Rng rng((*counter)++);
    std::normal_distribution<double> n;
    for (auto& v : z.values()) v = n(rng);
    return z;
  };
  const int episodes = 400;
  const auto rep = evaluate_accuracy(random, test_split(), episodes, 5, 5, 75, 1);
  const double se = std::sqrt(0.2 * 0.8 / (episodes * 75.0));
  EXPECT_NEAR(rep.mean, 0.2, 3 * se);
}

TEST(Evaluate, ArgmaxRows) {
  EXPECT_EQ(argmax_rows(Tensor({2, 3}, {0, 5, 1, 7, 2, 3})), (std::vector<int>{1, 0}));
}
