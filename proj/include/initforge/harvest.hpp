// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Base-network populations and the per-layer datasets of 3x3 kernel slices
// harvested from them.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "initforge/network.hpp"

namespace initforge {

struct SliceSet {
  int layer_id = 0;
  Tensor<float> slices;               // N x 3 x 3
  std::vector<int> source_run_ids;    // run id of every slice, length N

  std::int64_t size() const { return slices.shape.empty() ? 0 : slices.shape[0]; }
  bool operator==(const SliceSet&) const = default;
};

struct WeightDataset {
  std::string arch;
  int num_sources = 0;
  double filter_fraction = 0.0;
  std::map<int, SliceSet> per_layer;  // keyed by conv node id

  Archive to_archive() const;
  static WeightDataset from_archive(const Archive& a);
  bool operator==(const WeightDataset&) const = default;
};

struct Checkpoint {
  int run_id = 0;
  WeightSet weights;
  TrainConfig config;
  double val_accuracy = 0.0;

  Archive to_archive() const;
  static Checkpoint from_archive(const Archive& a);
};

std::string checkpoint_name(const std::string& arch, std::uint64_t seed);  // base_{arch}_{seed}.ckpt
std::string weight_dataset_name(const std::string& arch);                  // weights_{arch}.wds

// SGD from He-initialised weights (seeded by cfg.seed); keeps the weights of
// the best validation evaluation.
Checkpoint train_base_network(const CompGraph& g, const TrainConfig& cfg, const DatasetSplits& data);

// Node ids of the 3x3 convolutions of g, in graph order.
std::vector<int> slice_layers(const CompGraph& g);

// Every O x I x 3 x 3 kernel yields O*I slices in (out, in) order. 1x1 convs
// and linear layers contribute nothing.
std::map<int, Tensor<float>> extract_slices(const Checkpoint& ck, const CompGraph& g);

// Drops the floor(fraction * N) slices with the smallest l2 norm. At equal
// norms later slices go first; survivors keep their order.
SliceSet filter_low_norm(const SliceSet& s, double fraction = 0.05);

// Pools each layer's slices across checkpoints, then filters per layer.
WeightDataset assemble_weight_dataset(std::span<const Checkpoint> checkpoints, const CompGraph& g,
                                      double fraction);

}  // namespace initforge
