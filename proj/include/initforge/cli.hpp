// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line pipeline: harvest -> train-gen -> init -> evaluate -> report.
// Each command reads one JSON config layered over the defaults of a profile
// (desk or paper), writes its artifacts under --out and records a manifest.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "initforge/experiments.hpp"

namespace initforge {

inline constexpr const char* kCodeVersion = "initforge 0.1.0";

struct DatasetSpec {
  std::string source = "texture";  // texture | tensor_file | image_folder
  std::optional<std::string> path;
  std::string name = "texture2";
  std::int64_t num_samples = 8000;
  int num_classes = 2;
  int image_size = 16;
  TextureDomain domain = TextureDomain::source;
  std::uint64_t seed = 1;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
};

struct PipelineConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  int workers = 1;
  DatasetSpec dataset;
  int depth = 8;
  int width = 1;

  int population = 8;
  double filter_fraction = 0.05;
  TrainConfig harvest_train;

  LocalTrainConfig local;
  GHNTrainConfig ghn;

  std::vector<InitMethod> methods;
  int num_seeds = 5;
  std::vector<double> thresholds;
  TrainConfig eval_train;
  int ensemble_size = 5;
  int num_ensembles = 10;
  int ensemble_pool = 10;
  Corruption corruption = Corruption::gauss_noise;
  EnsembleCombine combine = EnsembleCombine::probabilities;

  DatasetSpec transfer_dataset;
  std::int64_t transfer_train_samples = 1000;
  std::int64_t transfer_val_samples = 400;
  std::vector<InitMethod> transfer_methods;
  int transfer_num_seeds = 5;
  TrainConfig transfer_train;

  // Defaults merged with the user config, as hashed into manifests.
  nlohmann::json resolved;

  std::string arch() const { return resnet_name(depth, width); }
  // Run seeds seed .. seed + n - 1.
  std::vector<std::uint64_t> seeds(int n) const;
};

// Full default tree of a profile ("desk" or "paper"); it doubles as the
// schema: user keys must exist in it and match its value types.
nlohmann::json profile_defaults(const std::string& profile);

// Layers `user` over the profile defaults and parses the result. CLI
// overrides win over the config's own profile/seed. Throws ConfigError
// naming the offending field path.
PipelineConfig resolve_config(const nlohmann::json& user,
                              const std::optional<std::string>& profile_override,
                              const std::optional<std::uint64_t>& seed_override);

LabeledDataset load_dataset(const DatasetSpec& spec, const std::string& field);
// Class-balanced small training set plus validation and test sets carved
// from one dataset after a seeded shuffle.
DatasetSplits small_splits(const LabeledDataset& all, std::int64_t n_train, std::int64_t n_val,
                           std::uint64_t seed);

// Lower-case hex SHA-256.
std::string sha256_hex(const std::string& bytes);

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> inputs, outputs;  // paths relative to --out where possible
  nlohmann::json extra = nlohmann::json::object();
  double wall_clock_seconds = 0.0;

  std::string config_hash() const { return sha256_hex(config.dump()); }
  nlohmann::json to_json() const;
};

// Exit codes: 0 success, 1 unexpected failure, 2 usage/config error, 3
// missing artifact, 4 numeric failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace initforge
