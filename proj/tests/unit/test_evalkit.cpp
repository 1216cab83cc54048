// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "initforge/errors.hpp"
#include "initforge/evalkit.hpp"
#include "initforge/localinit.hpp"
#include "oracles.hpp"

namespace initforge {
namespace {

Tensor<double> probs_of(std::int64_t n, std::int64_t c, std::vector<double> v) {
  return Tensor<double>({n, c}, std::move(v));
}

// Eval steps 1..n after a pre-training point that must never be counted.
Trajectory traj(std::vector<double> acc) {
  Trajectory t;
  t.points.push_back({0, 1.0});
  for (std::size_t i = 0; i < acc.size(); ++i) t.points.push_back({static_cast<int>(i) + 1, acc[i]});
  return t;
}

TEST(StepsToThreshold, ScanCases) {
  const std::vector<double> th{0.80, 0.85};
  const auto r = steps_to_threshold(traj({0.5, 0.82, 0.86}), th);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].step, 2);
  EXPECT_EQ(r[1].step, 3);
  const std::vector<double> zero{0.0};
  EXPECT_EQ(steps_to_threshold(traj({0.1, 0.2}), zero)[0].step, 1);
  const std::vector<double> high{0.99};
  EXPECT_FALSE(steps_to_threshold(traj({0.1, 0.2}), high)[0].step.has_value());
  EXPECT_FALSE(steps_to_threshold(traj({}), zero)[0].step.has_value());
  const std::vector<double> unsorted{0.9, 0.5};
  EXPECT_THROW(steps_to_threshold(traj({0.1}), unsorted), std::invalid_argument);
}

TEST(StepsToThreshold, MonotoneOnFuzzedTrajectories) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> acc(1 + rng() % 20);
    for (auto& a : acc) a = u(rng);
    std::vector<double> th(1 + rng() % 6);
    for (auto& t : th) t = u(rng);
    std::sort(th.begin(), th.end());
    const auto r = steps_to_threshold(traj(acc), th);
    for (std::size_t i = 1; i < r.size(); ++i) {
      if (!r[i - 1].step) EXPECT_FALSE(r[i].step.has_value());
      if (r[i].step) {
        ASSERT_TRUE(r[i - 1].step.has_value());
        EXPECT_LE(*r[i - 1].step, *r[i].step);
      }
    }
  }
}

TEST(Ece, HandComputedSingleBucket) {
  std::vector<double> v;
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) {
    v.insert(v.end(), {0.75, 0.25});
    labels.push_back(i < 5 ? 0 : 1);
  }
  EXPECT_NEAR(ece(probs_of(10, 2, v), labels), 0.25, 1e-15);
}

TEST(Ece, PerfectConfidenceIsExactlyZero) {
  const auto p = probs_of(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<int> labels{0, 1, 2};
  EXPECT_EQ(ece(p, labels), 0.0);
}

TEST(Ece, MatchesBruteForceOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const auto set = testing::random_prediction_set(rng);
    const double got = ece(set.probs, set.labels);
    EXPECT_NEAR(got, testing::brute_force_ece(set.probs, set.labels, 10), 1e-12);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(Ece, BoundaryConfidencesUseHalfOpenBuckets) {
  // 0.3 sits on a boundary and belongs to (0.2, 0.3].
  const auto p = probs_of(1, 4, {0.3, 0.25, 0.25, 0.2});
  const std::vector<int> labels{0};
  const auto bins = calibration_bins(p, labels);
  EXPECT_EQ(bins.count[2], 1);
  EXPECT_EQ(bins.count[3], 0);
  EXPECT_NEAR(ece(p, labels), 0.7, 1e-15);
}

TEST(Ece, RejectsInvalidInput) {
  const auto bad_sum = probs_of(1, 2, {0.5, 0.6});
  const std::vector<int> zero{0};
  EXPECT_THROW(ece(bad_sum, zero), std::invalid_argument);
  const auto ok = probs_of(1, 2, {0.5, 0.5});
  const std::vector<int> out_of_range{2};
  EXPECT_THROW(ece(ok, out_of_range), std::invalid_argument);
}

TEST(Ensembles, SamplingContract) {
  std::vector<std::string> pool;
  for (int i = 0; i < 25; ++i) pool.push_back("run" + std::to_string(i));
  const auto specs = sample_ensembles(pool, 5, 20, 3);
  ASSERT_EQ(specs.size(), 20u);
  for (const auto& s : specs) {
    EXPECT_EQ(s.members.size(), 5u);
    EXPECT_EQ(std::set<std::string>(s.members.begin(), s.members.end()).size(), 5u);
  }
  EXPECT_EQ(specs, sample_ensembles(pool, 5, 20, 3));
  EXPECT_NE(specs, sample_ensembles(pool, 5, 20, 4));
  const auto forced = sample_ensembles(pool, 25, 3, 1);
  EXPECT_EQ(forced[0], forced[1]);
  EXPECT_EQ(forced[0].members, pool);
  EXPECT_THROW(sample_ensembles(pool, 26, 1, 1), std::invalid_argument);
}

TEST(Ensembles, ProbabilityAveraging) {
  const auto g = build_resnet_graph(8, 1, 2);
  TextureConfig tc;
  tc.num_samples = 40;
  const auto data = make_texture_dataset(tc);
  const std::vector<WeightSet> one{baseline_init(g, InitScheme::he, 1)};
  const auto single = ensemble_predict(one, g, data);
  const auto direct = softmax_rows(predict_logits(g, one[0], data));
  EXPECT_EQ(single.data, direct.data);
  const std::vector<WeightSet> three{one[0], baseline_init(g, InitScheme::he, 2),
                                     baseline_init(g, InitScheme::xavier, 3)};
  for (auto combine : {EnsembleCombine::probabilities, EnsembleCombine::logits}) {
    const auto p = ensemble_predict(three, g, data, combine);
    for (std::int64_t r = 0; r < p.shape[0]; ++r) EXPECT_NEAR(p.data[2 * r] + p.data[2 * r + 1], 1.0, 1e-6);
  }
  EXPECT_THROW(ensemble_predict(std::span<const WeightSet>(), g, data), std::invalid_argument);
}

TEST(Similarity, AgreementAndCosine) {
  const std::vector<int> a{0, 1, 1, 0}, b{0, 1, 0, 1}, flip{1, 0, 0, 1};
  EXPECT_EQ(prediction_agreement(a, a), 1.0);
  EXPECT_EQ(prediction_agreement(a, flip), 0.0);
  EXPECT_EQ(prediction_agreement(a, b), 0.5);
  const Tensor<float> x({2, 2}, {1, 2, -3, 1});
  Tensor<float> nx = x;
  for (auto& v : nx.data) v = -v;
  EXPECT_NEAR(logit_cosine(x, x), 1.0, 1e-12);
  EXPECT_NEAR(logit_cosine(x, nx), -1.0, 1e-12);
  EXPECT_NEAR(logit_cosine(Tensor<float>({1, 2}, {1, 0}), Tensor<float>({1, 2}, {0, 2})), 0.0, 1e-12);
}

TEST(Similarity, MatrixIsSymmetricWithUnitDiagonal) {
  const auto g = build_resnet_graph(8, 1, 2);
  TextureConfig tc;
  tc.num_samples = 30;
  const auto data = make_texture_dataset(tc);
  std::vector<WeightSet> models;
  for (int s = 0; s < 4; ++s) models.push_back(baseline_init(g, InitScheme::he, s));
  for (auto kind : {SimilarityKind::logit_cosine, SimilarityKind::prediction_agreement}) {
    const auto m = pairwise_similarity(models, g, data, kind);
    double sum = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(m.values[i][i], 1.0);
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.values[i][j], m.values[j][i]);
      for (std::size_t j = i + 1; j < 4; ++j) sum += m.values[i][j];
    }
    EXPECT_NEAR(m.upper_mean, sum / 6.0, 1e-15);
  }
  const std::vector<WeightSet> copies(3, models[0]);
  EXPECT_NEAR(pairwise_similarity(copies, g, data, SimilarityKind::logit_cosine).upper_mean, 1.0, 1e-12);
  EXPECT_THROW(pairwise_similarity(std::span(models).first(1), g, data, SimilarityKind::logit_cosine),
               std::invalid_argument);
}

TEST(Quantiles, BoxPlotStatistics) {
  const auto r = quantile_row({1, 2, 3, 4, 5, 6, 7, 8, 100});
  EXPECT_DOUBLE_EQ(r.median, 5.0);
  EXPECT_DOUBLE_EQ(r.q1, 3.0);
  EXPECT_DOUBLE_EQ(r.q3, 7.0);
  EXPECT_DOUBLE_EQ(r.whisker_low, 1.0);
  EXPECT_DOUBLE_EQ(r.whisker_high, 8.0);
  EXPECT_EQ(r.outliers, std::vector<double>{100.0});
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(Corruptions, SeverityIsMonotoneAndDeterministic) {
  TextureConfig tc;
  tc.num_samples = 64;
  const auto data = make_texture_dataset(tc);
  for (auto kind : {Corruption::gauss_noise, Corruption::blur, Corruption::contrast, Corruption::pixelate}) {
    double prev = 0.0;
    for (int s = 1; s <= 5; ++s) {
      const auto c = corrupt(data, kind, s, 9);
      EXPECT_EQ(c.labels, data.labels);
      const double d = mean_distortion(data, c);
      EXPECT_GT(d, prev) << corruption_name(kind) << " severity " << s;
      prev = d;
      for (float v : c.images.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
    EXPECT_EQ(corrupt(data, kind, 3, 9).images, corrupt(data, kind, 3, 9).images);
  }
  EXPECT_DOUBLE_EQ(corruption_parameter(Corruption::gauss_noise, 1), 0.04);
  EXPECT_DOUBLE_EQ(corruption_parameter(Corruption::gauss_noise, 5), 0.26);
  EXPECT_THROW(corrupt(data, Corruption::blur, 6, 1), std::invalid_argument);
}

TEST(Transfer, ZeroEpochsGivesRawInitAccuracy) {
  const auto g = build_resnet_graph(8, 1, 2);
  TextureConfig tc;
  tc.num_samples = 100;
  tc.domain = TextureDomain::shifted;
  const auto data = make_texture_dataset(tc);
  const auto ws = baseline_init(g, InitScheme::he, 5);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_DOUBLE_EQ(transfer_eval(ws, g, data, data, data, cfg), evaluate_accuracy(g, ws, data));
  cfg.epochs = 1;
  cfg.batch_size = 32;
  EXPECT_DOUBLE_EQ(transfer_eval(ws, g, data, data, data, cfg), transfer_eval(ws, g, data, data, data, cfg));
  auto skewed = data;
  skewed.labels[0] = 1 - skewed.labels[0];
  skewed.labels[1] = skewed.labels[0];
  EXPECT_FALSE(is_class_balanced(skewed));
  EXPECT_THROW(transfer_eval(ws, g, skewed, data, data, cfg), std::invalid_argument);
}

TEST(TrainFromInit, RejectsMismatchedWeights) {
  const auto g8 = build_resnet_graph(8, 1, 2);
  const auto g14 = build_resnet_graph(14, 1, 2);
  TextureConfig tc;
  tc.num_samples = 20;
  const auto data = make_texture_dataset(tc);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train_from_init(baseline_init(g8, InitScheme::he, 1), g14, cfg, data, data), GraphError);
  const auto r = train_from_init(baseline_init(g8, InitScheme::he, 1), g8, cfg, data, data);
  ASSERT_EQ(r.trajectory.points.size(), 1u);
  EXPECT_EQ(r.trajectory.points[0].eval_index, 0);
}

}  // namespace
}  // namespace initforge
