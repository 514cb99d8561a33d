#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "test_support.hpp"

namespace marmot {
namespace {

using testing::bitwise_equal;
using testing::synth_config;
using testing::synth_set;

TEST(Adam, ZeroGradientZeroDecayIsIdentity) {
  std::vector<double> w{1.5, -2.0, 0.25};
  const std::vector<double> g(3, 0.0);
  AdamSlot slot;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  adam_update(w, g, slot, 0.1, cfg);
  EXPECT_EQ(w, (std::vector<double>{1.5, -2.0, 0.25}));
  EXPECT_EQ(slot.step, 1u);
}

TEST(Adam, HandEvaluatedFirstStep) {
  std::vector<double> w{1.0};
  const std::vector<double> g{1.0};
  AdamSlot slot;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  adam_update(w, g, slot, 0.1, cfg);
  // m = 0.1, v = 0.02; bias corrections give m_hat = v_hat = 1.
  EXPECT_NEAR(w[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], 0.9, 1e-8);
}

TEST(Adam, HandEvaluatedSecondStepWithDecay) {
  std::vector<double> w{2.0};
  AdamSlot slot;
  AdamConfig cfg;
  cfg.weight_decay = 0.5;
  const double lr = 0.01;
  adam_update(w, std::vector<double>{0.4}, slot, lr, cfg);
  adam_update(w, std::vector<double>{-0.2}, slot, lr, cfg);

  double ww = 2.0, m = 0.0, v = 0.0;
  const double gs[2] = {0.4, -0.2};
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * gs[t - 1];
    v = 0.98 * v + 0.02 * gs[t - 1] * gs[t - 1];
    ww = ww * (1.0 - lr * 0.5);
    ww -= lr * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.98, t))) + 1e-8);
  }
  EXPECT_NEAR(w[0], ww, 1e-15);
}

TEST(Adam, DecoupledDecayWithZeroGradient) {
  std::vector<double> w{3.0};
  AdamSlot slot;
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  adam_update(w, std::vector<double>{0.0}, slot, 0.5, cfg);
  EXPECT_DOUBLE_EQ(w[0], 3.0 * (1.0 - 0.5 * 0.1));
}

TEST(Adam, NanGradientNamesGroup) {
  Rng rng(1);
  auto p = MarmotParams::random(testing::tiny_config(1, 1), rng);
  p.zero_grads();
  p.decoder[0].ff.w1.mutable_grad()[3] = std::nan("");
  AdamState state;
  try {
    adam_step(p, state, 0.1, AdamConfig{}, GroupFlags{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("translation_decoder"), std::string::npos);
  }
  // A frozen group is not inspected.
  GroupFlags frozen;
  frozen.translation_decoder = false;
  EXPECT_NO_THROW(adam_step(p, state, 0.1, AdamConfig{}, frozen));
}

TrainConfig schedule_config(std::size_t fd, std::size_t fe, std::size_t epochs) {
  TrainConfig c;
  c.learning_rate = 3e-5;
  c.epochs = epochs;
  c.freeze_decoder_epochs = fd;
  c.freeze_encoder_epochs = fe;
  return c;
}

TEST(Schedule, WarmupCosineWithoutFreezing) {
  const auto cfg = schedule_config(0, 0, 10);
  const std::size_t total = 100, warmup = 10;
  EXPECT_EQ(lr_at(0, total, cfg), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(warmup - 1, total, cfg), cfg.learning_rate * 9.0 / 10.0);
  EXPECT_EQ(lr_at(warmup, total, cfg), cfg.learning_rate);
  EXPECT_LT(lr_at(total - 1, total, cfg), cfg.learning_rate * 1e-3);
  for (std::size_t i = warmup + 1; i < total; ++i) EXPECT_LE(lr_at(i, total, cfg), lr_at(i - 1, total, cfg));
  // Continuity: no jump bigger than one linear / cosine increment.
  for (std::size_t i = 1; i < total; ++i)
    EXPECT_LE(std::abs(lr_at(i, total, cfg) - lr_at(i - 1, total, cfg)), cfg.learning_rate / warmup + 1e-18);
}

TEST(Schedule, PlateauEqualsLearningRateWhileFrozen) {
  const auto cfg = schedule_config(2, 4, 8);
  const std::size_t steps_per_epoch = 10, total = 80;
  for (std::size_t i = 8; i < 4 * steps_per_epoch; ++i) EXPECT_EQ(lr_at(i, total, cfg), cfg.learning_rate) << i;
  EXPECT_EQ(lr_at(4 * steps_per_epoch, total, cfg), cfg.learning_rate);
  EXPECT_LT(lr_at(4 * steps_per_epoch + 1, total, cfg), cfg.learning_rate);
  EXPECT_LT(lr_at(total - 1, total, cfg), cfg.learning_rate * 2e-3);
  EXPECT_EQ(lr_at(0, total, cfg), 0.0);
}

TEST(Schedule, TrainableGroups) {
  const auto cfg = schedule_config(2, 4, 8);
  EXPECT_EQ(trainable_groups(0, cfg), (GroupFlags{true, false, false}));
  EXPECT_EQ(trainable_groups(1, cfg), (GroupFlags{true, false, false}));
  EXPECT_EQ(trainable_groups(2, cfg), (GroupFlags{true, true, false}));
  EXPECT_EQ(trainable_groups(3, cfg), (GroupFlags{true, true, false}));
  EXPECT_EQ(trainable_groups(4, cfg), (GroupFlags{true, true, true}));
  EXPECT_EQ(trainable_groups(7, cfg), (GroupFlags{true, true, true}));
  EXPECT_TRUE(trainable_groups(0, cfg).allows(ParamGroup::head));
}

TEST(TrainConfig, Validation) {
  auto c = schedule_config(3, 2, 8);
  EXPECT_THROW(c.validate(), ContractError);
  c = schedule_config(0, 9, 8);
  EXPECT_THROW(c.validate(), ContractError);
  c = schedule_config(0, 0, 8);
  c.warmup_fraction = 1.0;
  EXPECT_THROW(c.validate(), ContractError);
}

std::map<ParamGroup, std::vector<double>> group_values(const MarmotParams& p) {
  std::map<ParamGroup, std::vector<double>> out;
  p.for_each([&](const std::string&, const Tensor& t, ParamGroup g) {
    out[g].insert(out[g].end(), t.values().begin(), t.values().end());
  });
  return out;
}

TEST(Train, FreezeBoundariesAreBitwise) {
  auto data = synth_set({.n = 16, .seed = 3});
  Rng rng(4);
  const auto init = MarmotParams::random(synth_config(data.vocab), rng);
  auto cfg = schedule_config(2, 4, 6);
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 4;
  const auto start = group_values(init);
  std::vector<std::map<ParamGroup, std::vector<double>>> snapshots;
  train(data.examples, {}, init, cfg,
        [&](std::size_t, const MarmotParams& p) { snapshots.push_back(group_values(p)); });
  ASSERT_EQ(snapshots.size(), 6u);
  for (std::size_t e = 0; e < 6; ++e) {
    const bool decoder_frozen = e < 2, fusion_frozen = e < 4;
    EXPECT_EQ(bitwise_equal(snapshots[e][ParamGroup::translation_decoder],
                            start.at(ParamGroup::translation_decoder)),
              decoder_frozen)
        << "epoch " << e;
    EXPECT_EQ(bitwise_equal(snapshots[e][ParamGroup::fusion], start.at(ParamGroup::fusion)), fusion_frozen)
        << "epoch " << e;
    EXPECT_FALSE(bitwise_equal(snapshots[e][ParamGroup::image_path], start.at(ParamGroup::image_path)));
    EXPECT_FALSE(bitwise_equal(snapshots[e][ParamGroup::head], start.at(ParamGroup::head)));
  }
}

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  auto data = synth_set({.n = 8, .seed = 5});
  Rng rng(6);
  const auto init = MarmotParams::random(synth_config(data.vocab), rng);
  auto cfg = schedule_config(0, 0, 3);
  cfg.learning_rate = 0.0;
  cfg.batch_size = 3;
  const auto report = train(data.examples, data.examples, init, cfg);
  EXPECT_EQ(group_values(report.params), group_values(init));
  for (const auto& e : report.epochs) EXPECT_NEAR(e.train_loss, report.epochs[0].train_loss, 1e-12);
}

TEST(Train, SameSeedSameReport) {
  auto data = synth_set({.n = 12, .seed = 7});
  Rng rng(8);
  const auto init = MarmotParams::random(synth_config(data.vocab), rng);
  auto cfg = schedule_config(0, 0, 2);
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 5;
  cfg.seed = 42;
  const auto a = train(data.examples, data.examples, init, cfg);
  const auto b = train(data.examples, data.examples, init, cfg);
  EXPECT_EQ(group_values(a.params), group_values(b.params));
  ASSERT_EQ(a.epochs.size(), b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    EXPECT_EQ(a.epochs[i].train_loss, b.epochs[i].train_loss);
    EXPECT_EQ(a.epochs[i].val_accuracy, b.epochs[i].val_accuracy);
  }
  cfg.seed = 43;
  const auto c = train(data.examples, data.examples, init, cfg);
  EXPECT_NE(group_values(a.params), group_values(c.params));
}

TEST(Train, CurveLengthEqualsEpochs) {
  auto data = synth_set({.n = 8, .seed = 9});
  Rng rng(10);
  const auto init = MarmotParams::random(synth_config(data.vocab), rng);
  auto cfg = schedule_config(0, 0, 3);
  cfg.learning_rate = 1e-3;
  const auto r = train(data.examples, data.examples, init, cfg);
  EXPECT_EQ(r.epochs.size(), 3u);
  EXPECT_FALSE(r.diverged);
  EXPECT_THROW(train({}, {}, init, cfg), ContractError);
}

TEST(Train, DivergenceStopsWithReportSoFar) {
  auto data = synth_set({.n = 8, .seed = 11});
  Rng rng(12);
  auto init = MarmotParams::random(synth_config(data.vocab), rng);
  for (auto& v : init.head_w2.mutable_values()) v = std::numeric_limits<double>::infinity();
  auto cfg = schedule_config(0, 0, 2);
  const auto r = train(data.examples, {}, init, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_TRUE(r.epochs.empty());
  EXPECT_FALSE(r.message.empty());
}

TEST(GridSearch, ArgmaxFirstBreaksTies) {
  const std::vector<double> s{0.5, 0.9, 0.9, 0.1};
  EXPECT_EQ(argmax_first(s), 1u);
}

TEST(GridSearch, SingletonGrid) {
  auto data = synth_set({.n = 8, .seed = 13});
  Rng rng(14);
  const auto init = MarmotParams::random(synth_config(data.vocab), rng);
  GridSpec grid{{1e-3}, {4}, {1}};
  const auto r = grid_search(grid, TrainConfig{}, init, data.examples, data.examples, SelectionMetric::accuracy);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_EQ(r.best, 0u);
  EXPECT_EQ(r.best_config().learning_rate, 1e-3);
}

TEST(GridSearch, TwoByTwoMatchesManualComparison) {
  auto data = synth_set({.n = 24, .seed = 15});
  auto val = synth_set({.n = 16, .seed = 16}, &data.vocab);
  Rng rng(17);
  const auto init = MarmotParams::random(synth_config(data.vocab), rng);
  GridSpec grid{{0.0, 5e-3}, {4, 8}, {6}};
  TrainConfig base;
  base.seed = 3;
  const auto r = grid_search(grid, base, init, data.examples, val.examples, SelectionMetric::auc, 2);
  ASSERT_EQ(r.cells.size(), 4u);
  std::vector<double> manual;
  for (const auto& cell : r.cells) {
    const auto report = train(data.examples, val.examples, init, cell.config);
    manual.push_back(selection_score(val.examples, report.params, SelectionMetric::auc));
    EXPECT_EQ(manual.back(), cell.score);
  }
  EXPECT_EQ(r.best, argmax_first(manual));
  // lr = 0 cells stay at the initial model; a trained cell beats them here.
  EXPECT_GE(r.best, 2u);
}

TEST(Ensemble, MajorityVote) {
  const std::vector<int> six_five{1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(majority_vote(six_five), 1);
  const std::vector<int> five_six{1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(majority_vote(five_six), 0);
  const std::vector<int> even{1, 0};
  EXPECT_THROW(majority_vote(even), ContractError);
}

TEST(Ensemble, HandCountedVotes) {
  // 11 members x 5 examples of fixed synthetic predictions.
  const int votes[11][5] = {{1, 0, 1, 0, 1}, {1, 0, 0, 0, 1}, {1, 1, 1, 0, 0}, {0, 0, 1, 0, 1},
                            {1, 0, 1, 1, 0}, {0, 1, 0, 0, 1}, {1, 0, 1, 0, 0}, {0, 1, 1, 1, 1},
                            {1, 0, 0, 0, 0}, {0, 1, 1, 1, 1}, {1, 0, 0, 0, 0}};
  // Column counts of ones: 7, 4, 7, 3, 6.
  const int expected[5] = {1, 0, 1, 0, 1};
  for (std::size_t j = 0; j < 5; ++j) {
    std::vector<int> column;
    for (std::size_t m = 0; m < 11; ++m) column.push_back(votes[m][j]);
    EXPECT_EQ(majority_vote(column), expected[j]) << j;
  }
}

TEST(Ensemble, IdenticalMembersReproduceSingleModel) {
  auto data = synth_set({.n = 16, .seed = 18});
  Rng rng(19);
  const auto model = MarmotParams::random(synth_config(data.vocab), rng);
  const std::vector<MarmotParams> members(11, model);
  for (const auto& ex : data.examples) {
    const auto single = predict(ex, model);
    const auto ens = ensemble_predict(members, ex);
    EXPECT_EQ(ens.label, single.label);
    EXPECT_EQ(ens.positive_votes, single.label == 1 ? 11u : 0u);
  }
}

TEST(Ensemble, MembersUseDerivedSeeds) {
  auto data = synth_set({.n = 8, .seed = 20});
  auto cfg = schedule_config(0, 0, 1);
  cfg.learning_rate = 1e-3;
  cfg.seed = 77;
  EXPECT_THROW(deep_ensemble(synth_config(data.vocab), cfg, data.examples, {}, 4), ContractError);
  const auto members = deep_ensemble(synth_config(data.vocab), cfg, data.examples, {}, 3, 3);
  ASSERT_EQ(members.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(members[i].config.seed, Rng::derive(77, i));
  EXPECT_NE(group_values(members[0].params), group_values(members[1].params));
  // Threaded and sequential runs agree.
  const auto sequential = deep_ensemble(synth_config(data.vocab), cfg, data.examples, {}, 3, 1);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(group_values(members[i].params), group_values(sequential[i].params));
}

}  // namespace
}  // namespace marmot
