// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "initforge/errors.hpp"
#include "initforge/localinit.hpp"
#include "initforge/network.hpp"

namespace initforge {
namespace {

DatasetSplits tiny_data(std::int64_t n = 600, int size = 8) {
  TextureConfig tc;
  tc.num_samples = n;
  tc.image_size = size;
  return split_dataset(make_texture_dataset(tc), 0.7, 0.15, 1);
}

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.schedule = step_decay_schedule(epochs);
  return c;
}

TEST(EvalBatches, NearEqualAndBounded) {
  const auto b = eval_batches(801, 250);
  ASSERT_EQ(b.size(), 4u);
  std::int64_t covered = 0;
  for (const auto& [start, len] : b) {
    EXPECT_EQ(start, covered);
    EXPECT_LE(len, 250);
    EXPECT_GE(len, 200);
    covered += len;
  }
  EXPECT_EQ(covered, 801);
  EXPECT_TRUE(eval_batches(0, 250).empty());
}

TEST(Schedules, StepDecayAndFinetune) {
  EXPECT_EQ(step_decay_schedule(120), (std::vector<Milestone>{{80, 0.2}, {100, 0.5}}));
  EXPECT_EQ(step_decay_schedule(4), (std::vector<Milestone>{{2, 0.2}, {3, 0.5}}));
  EXPECT_TRUE(step_decay_schedule(1).empty());
  TrainConfig c;
  c.lr = 0.1;
  c.schedule = finetune_schedule();
  EXPECT_DOUBLE_EQ(c.lr_at_epoch(19), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at_epoch(20), 0.05);
  EXPECT_DOUBLE_EQ(c.lr_at_epoch(30), 0.01);
}

TEST(TrainConfigJson, RoundTripAndFieldErrors) {
  auto c = quick(3);
  c.eval_every_batches = 7;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  try {
    TrainConfig::from_json({{"batch_size", 1}});
    ADD_FAILURE();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "batch_size");
  }
}

TEST(WeightSet, CheckNamesMismatchedNode) {
  const auto g = build_resnet_graph(8, 1, 2);
  auto ws = empty_weight_set(g);
  EXPECT_NO_THROW(ws.check(g));
  ws.tensors[3] = Tensor<float>({1});
  try {
    ws.check(g);
    ADD_FAILURE();
  } catch (const GraphError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(ws.specs[3].node_id)), std::string::npos) << e.what();
  }
  EXPECT_THROW(empty_weight_set(g).check(build_resnet_graph(14, 1, 2)), GraphError);
  EXPECT_EQ(WeightSet::from_archive(empty_weight_set(g).to_archive()), empty_weight_set(g));
}

TEST(Predict, SoftmaxRowsAreDistributionsAndBatchingIsInvisible) {
  const auto g = build_resnet_graph(8, 1, 2);
  const auto data = tiny_data(300);
  const auto ws = baseline_init(g, InitScheme::he, 3);
  const auto logits = predict_logits(g, ws, data.train, 210);
  EXPECT_EQ(logits.shape, (Shape{data.train.size(), 2}));
  const auto p = softmax_rows(logits);
  for (std::int64_t i = 0; i < p.shape[0]; ++i) {
    EXPECT_NEAR(p.data[static_cast<std::size_t>(2 * i)] + p.data[static_cast<std::size_t>(2 * i + 1)], 1.0, 1e-12);
  }
  EXPECT_EQ(argmax_rows(Tensor<float>({2, 3}, {0, 2, 1, 5, 4, 5})), (std::vector<int>{1, 0}));
  EXPECT_DOUBLE_EQ(accuracy({0, 1, 1, 0}, {0, 1, 0, 1}), 0.5);
}

TEST(Train, ZeroEpochsKeepsInitAndRecordsOnlyThePreTrainingPoint) {
  const auto g = build_resnet_graph(8, 1, 2);
  const auto data = tiny_data(200);
  const auto init = baseline_init(g, InitScheme::he, 1);
  const auto r = train_classifier(g, init, quick(0), data.train, data.val);
  EXPECT_EQ(r.weights, init);
  ASSERT_EQ(r.trajectory.points.size(), 1u);
  EXPECT_EQ(r.trajectory.points[0].eval_index, 0);
  EXPECT_EQ(r.steps, 0);
}

TEST(Train, DeterministicAndCadenceFollowsConfig) {
  const auto g = build_resnet_graph(8, 1, 2);
  const auto data = tiny_data(300);
  const auto init = baseline_init(g, InitScheme::he, 1);
  auto cfg = quick(2);
  cfg.eval_every_batches = 2;
  const auto a = train_classifier(g, init, cfg, data.train, data.val);
  const auto b = train_classifier(g, init, cfg, data.train, data.val);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.trajectory, b.trajectory);
  EXPECT_EQ(a.trajectory.cadence, "batches:2");
  // 210 samples / 32 = 6 full batches + an 18-sample tail per epoch.
  EXPECT_EQ(a.steps, 14);
  EXPECT_EQ(a.trajectory.points.size(), 1u + 7u);
  for (std::size_t i = 0; i < a.trajectory.points.size(); ++i) {
    EXPECT_EQ(a.trajectory.points[i].eval_index, static_cast<int>(i));
  }
  cfg.seed = 1;
  EXPECT_NE(train_classifier(g, init, cfg, data.train, data.val).weights, a.weights);
}

TEST(Train, LearnsAboveChance) {
  const auto g = build_resnet_graph(8, 1, 2);
  const auto data = tiny_data(2000, 16);
  const auto r = train_classifier(g, baseline_init(g, InitScheme::he, 2), quick(5), data.train, data.val);
  EXPECT_GT(r.final_val_accuracy, 0.6);
  EXPECT_EQ(r.trajectory.points.size(), 6u);
  EXPECT_EQ(r.trajectory.cadence, "epochs:1");
}

TEST(Train, NonFiniteLossIsNumericError) {
  const auto g = build_resnet_graph(8, 1, 2);
  const auto data = tiny_data(200);
  auto cfg = quick(1);
  cfg.lr = 1e30;
  EXPECT_THROW(train_classifier(g, baseline_init(g, InitScheme::he, 1), cfg, data.train, data.val), NumericError);
}

}  // namespace
}  // namespace initforge
