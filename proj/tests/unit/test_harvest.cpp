// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "initforge/harvest.hpp"
#include "initforge/localinit.hpp"

namespace initforge {
namespace {

double slice_norm(const Tensor<float>& s, std::int64_t i) {
  double acc = 0.0;
  for (int k = 0; k < 9; ++k) {
    const double v = s.data[static_cast<std::size_t>(i * 9 + k)];
    acc += v * v;
  }
  return std::sqrt(acc);
}

SliceSet slices_with_norms(const std::vector<double>& norms) {
  SliceSet s;
  s.slices = Tensor<float>({static_cast<std::int64_t>(norms.size()), 3, 3});
  for (std::size_t i = 0; i < norms.size(); ++i) {
    s.slices.data[i * 9 + 4] = static_cast<float>(norms[i]);
    s.source_run_ids.push_back(static_cast<int>(i));
  }
  return s;
}

Checkpoint he_checkpoint(const CompGraph& g, int seed) {
  Checkpoint ck;
  ck.run_id = seed;
  ck.weights = baseline_init(g, InitScheme::he, static_cast<std::uint64_t>(seed));
  return ck;
}

TEST(ExtractSlices, StemGivesFortyEightAndOnlyThreeByThreeLayersCount) {
  const auto g8 = build_resnet_graph(8, 1, 2);
  const auto slices = extract_slices(he_checkpoint(g8, 0), g8);
  const auto layers = slice_layers(g8);
  ASSERT_EQ(slices.size(), layers.size());
  EXPECT_EQ(slices.at(layers.front()).shape, (Shape{48, 3, 3}));
  const auto g20 = build_resnet_graph(20, 1, 10);
  EXPECT_EQ(extract_slices(he_checkpoint(g20, 0), g20).size(), 19u);
}

TEST(ExtractSlices, OutInOrderMatchesKernelMemory) {
  const auto g = build_resnet_graph(8, 1, 2);
  const auto ck = he_checkpoint(g, 4);
  const int layer = slice_layers(g)[1];
  const auto& kernel = ck.weights.at(layer, ParamKind::conv_kernel);
  const auto s = extract_slices(ck, g).at(layer);
  EXPECT_EQ(s.data, kernel.data);  // O x I x 3 x 3 flattens to (O*I) x 3 x 3
}

TEST(ExtractSlices, EmptyForGraphWithoutThreeByThreeConvs) {
  CompGraph g;
  g.name = "lin";
  g.nodes = {{0, OpKind::input, std::nullopt, {{"channels", 3}}},
             {1, OpKind::global_pool, std::nullopt, {}},
             {2, OpKind::linear, Shape{2, 3}, {}},
             {3, OpKind::output, std::nullopt, {}}};
  g.edges = {{0, 1}, {1, 2}, {2, 3}};
  Checkpoint ck;
  ck.weights = empty_weight_set(g);
  EXPECT_TRUE(extract_slices(ck, g).empty());
}

TEST(FilterLowNorm, HandCases) {
  std::vector<double> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[static_cast<std::size_t>(i)] = 1.0 + i;
  EXPECT_EQ(filter_low_norm(slices_with_norms(hundred)).size(), 95);

  const auto s = slices_with_norms({3, 1, 2});
  EXPECT_EQ(filter_low_norm(s, 0.0), s);

  std::vector<double> twenty(20);
  for (int i = 0; i < 20; ++i) twenty[static_cast<std::size_t>(i)] = 20.0 - i;  // norm 1 is last
  const auto f = filter_low_norm(slices_with_norms(twenty));
  ASSERT_EQ(f.size(), 19);
  for (std::int64_t i = 0; i < f.size(); ++i) EXPECT_GE(slice_norm(f.slices, i), 2.0);
  EXPECT_EQ(f.source_run_ids.back(), 18);  // survivors keep their order
}

TEST(FilterLowNorm, FuzzedSurvivorCountAndNormSeparation) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = std::uniform_int_distribution<int>(0, 300)(rng);
    std::vector<double> norms(static_cast<std::size_t>(n));
    // Coarse values force ties at the cut.
    for (auto& v : norms) v = std::uniform_int_distribution<int>(0, 12)(rng) * 0.25;
    const auto s = slices_with_norms(norms);
    const double frac = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    const auto f = filter_low_norm(s, frac);
    const auto removed = static_cast<std::int64_t>(std::floor(frac * n));
    ASSERT_EQ(f.size(), n - removed);
    std::vector<int> kept_ids = f.source_run_ids;
    ASSERT_TRUE(std::is_sorted(kept_ids.begin(), kept_ids.end()));
    double min_kept = INFINITY, max_removed = -INFINITY;
    for (int i = 0; i < n; ++i) {
      const bool kept = std::binary_search(kept_ids.begin(), kept_ids.end(), i);
      const double v = norms[static_cast<std::size_t>(i)];
      if (kept) {
        min_kept = std::min(min_kept, v);
      } else {
        max_removed = std::max(max_removed, v);
      }
    }
    if (removed > 0 && f.size() > 0) ASSERT_GE(min_kept, max_removed);
  }
}

TEST(AssembleWeightDataset, PoolsAcrossCheckpoints) {
  const auto g = build_resnet_graph(8, 1, 2);
  std::vector<Checkpoint> cks;
  for (int s = 0; s < 3; ++s) cks.push_back(he_checkpoint(g, s));
  const auto raw = assemble_weight_dataset(cks, g, 0.0);
  EXPECT_EQ(raw.num_sources, 3);
  for (const auto& node : g.nodes) {
    if (node.op != OpKind::conv || (*node.param_shape)[2] != 3) continue;
    const auto& shape = *node.param_shape;
    EXPECT_EQ(raw.per_layer.at(node.id).size(), 3 * shape[0] * shape[1]);
  }
  const auto filtered = assemble_weight_dataset(cks, g, 0.05);
  for (const auto& [layer, s] : filtered.per_layer) {
    const auto n = raw.per_layer.at(layer).size();
    EXPECT_EQ(s.size(), n - static_cast<std::int64_t>(std::floor(0.05 * static_cast<double>(n))));
  }
  const auto single = assemble_weight_dataset(std::span(cks).first(1), g, 0.0);
  for (const auto& [layer, t] : extract_slices(cks[0], g)) EXPECT_EQ(single.per_layer.at(layer).slices, t);
  EXPECT_EQ(WeightDataset::from_archive(filtered.to_archive()), filtered);
}

TEST(TrainBaseNetwork, ZeroEpochsIsHeInitAndRunsAreDeterministic) {
  const auto g = build_resnet_graph(8, 1, 2);
  TextureConfig tc;
  tc.num_samples = 300;
  tc.image_size = 8;
  const auto data = split_dataset(make_texture_dataset(tc), 0.7, 0.15, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 11;
  EXPECT_EQ(train_base_network(g, cfg, data).weights, baseline_init(g, InitScheme::he, 11));
  cfg.epochs = 1;
  cfg.batch_size = 32;
  const auto a = train_base_network(g, cfg, data);
  const auto b = train_base_network(g, cfg, data);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.to_archive().to_bytes(), b.to_archive().to_bytes());
  const auto c = Checkpoint::from_archive(a.to_archive());
  EXPECT_EQ(c.weights, a.weights);
  EXPECT_EQ(c.config.to_json(), a.config.to_json());
  EXPECT_EQ(checkpoint_name("resnet8", 11), "base_resnet8_11.ckpt");
  EXPECT_EQ(weight_dataset_name("resnet8"), "weights_resnet8.wds");
}

}  // namespace
}  // namespace initforge
