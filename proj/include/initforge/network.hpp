// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Weight sets, the graph executor that runs a CompGraph as a classifier, and
// the SGD training loop shared by base-network harvesting and evaluation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "initforge/archive.hpp"
#include "initforge/archspace.hpp"
#include "initforge/autograd.hpp"
#include "initforge/dataset.hpp"

namespace initforge {

// One tensor per ParamSpec of the graph, in enumerate_params order.
// Batch norm layers always normalise with batch statistics, so no running
// moments are stored.
struct WeightSet {
  std::string arch;
  std::vector<ParamSpec> specs;
  std::vector<Tensor<float>> tensors;

  // Throws GraphError naming the first node whose tensor disagrees with g.
  void check(const CompGraph& g) const;
  const Tensor<float>& at(int node_id, ParamKind kind) const;
  Tensor<float>& at(int node_id, ParamKind kind);

  Archive to_archive() const;
  static WeightSet from_archive(const Archive& a);
  bool operator==(const WeightSet&) const = default;
};

// Zero-filled weight set with the graph's exact shapes.
WeightSet empty_weight_set(const CompGraph& g);

std::vector<ag::Var<float>> as_params(const WeightSet& ws);
std::vector<ag::Var<float>> as_constants(const WeightSet& ws);

// Runs g on channel-major input [C, N, H, W]; returns logits [N, classes].
// `params` follows enumerate_params(g).
ag::Var<float> forward(const CompGraph& g, std::span<const ag::Var<float>> params,
                       const ag::Var<float>& input);

// Evaluation batches: the dataset is cut into ceil(N / max_batch) contiguous
// batches of near-equal size, so batch statistics never come from a tiny tail.
std::vector<std::pair<std::int64_t, std::int64_t>> eval_batches(std::int64_t n,
                                                                std::int64_t max_batch);
inline constexpr std::int64_t kEvalBatch = 250;

// Logits [N, classes] for every sample, in dataset order.
Tensor<float> predict_logits(const CompGraph& g, const WeightSet& ws, const LabeledDataset& data,
                             std::int64_t max_batch = kEvalBatch);
// Row-wise softmax computed in double precision.
Tensor<double> softmax_rows(const Tensor<float>& logits);
std::vector<int> argmax_rows(const Tensor<float>& logits);
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);
double evaluate_accuracy(const CompGraph& g, const WeightSet& ws, const LabeledDataset& data);

// Multiplies the learning rate by `factor` from the start of `epoch` (0-based).
struct Milestone {
  int epoch = 0;
  double factor = 1.0;
  bool operator==(const Milestone&) const = default;
};

// Step-decay schedule scaled from the 120-epoch recipe: x0.2 after 80/120 of
// training and a further x0.5 after 100/120.
std::vector<Milestone> step_decay_schedule(int epochs);
// 40-epoch fine-tuning recipe: halve at epoch 20, divide by five at epoch 30.
std::vector<Milestone> finetune_schedule();

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  int epochs = 10;
  std::vector<Milestone> schedule;
  std::uint64_t seed = 0;
  std::string dataset = "texture2";
  // Evaluate every `eval_every_batches` optimiser steps when > 0, otherwise
  // every `eval_every_epochs` epochs.
  int eval_every_batches = 0;
  int eval_every_epochs = 1;
  // Return the weights with the best validation accuracy instead of the last.
  bool keep_best = false;

  // Throws ConfigError naming the offending field.
  void validate() const;
  double lr_at_epoch(int epoch) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);  // throws ConfigError
};

struct TrajectoryPoint {
  // 0 is the evaluation before training; k >= 1 follows the k-th training
  // interval, so eval steps count from 1.
  int eval_index = 0;
  double val_accuracy = 0.0;
  bool operator==(const TrajectoryPoint&) const = default;
};

struct Trajectory {
  std::vector<TrajectoryPoint> points;
  std::string cadence;  // "epochs:E" or "batches:S"
  bool operator==(const Trajectory&) const = default;
};

struct TrainResult {
  WeightSet weights;
  Trajectory trajectory;
  double final_val_accuracy = 0.0;
  double best_val_accuracy = 0.0;
  std::int64_t steps = 0;
};

// Minibatch SGD on softmax cross-entropy. Shuffling uses streams derived from
// cfg.seed, so equal inputs give bit-identical results. Throws NumericError on
// a non-finite loss.
TrainResult train_classifier(const CompGraph& g, const WeightSet& init, const TrainConfig& cfg,
                             const LabeledDataset& train, const LabeledDataset& val);

}  // namespace initforge
