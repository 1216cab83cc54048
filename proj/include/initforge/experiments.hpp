// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment drivers shared by the command-line front end and the acceptance
// checks: building initialisations by method name, training runs with an
// optional on-disk cache, and the five evaluation experiments.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "initforge/evalkit.hpp"
#include "initforge/globalinit.hpp"
#include "initforge/localinit.hpp"

namespace initforge {

enum class InitMethod { he, xavier, vae, vqvae, ghn, noise_ghn };
std::string method_name(InitMethod m);
InitMethod method_from_name(const std::string& name, const std::string& field = "method");

// Generators available for building initialisations; absent ones make the
// matching methods fail with ArtifactError.
struct InitSources {
  std::optional<LocalInitRegistry> vae, vqvae;
  std::optional<GHNModel> ghn, noise_ghn;
};

struct InitRecord {
  WeightSet weights;
  std::optional<std::vector<float>> noise;  // xi of a Noise GHN draw
};
// he/xavier/vae/vqvae sample from `seed`; ghn ignores it; noise_ghn draws its
// xi from `seed`.
InitRecord make_init(InitMethod method, const CompGraph& g, std::uint64_t seed,
                     const InitSources& sources);

struct RunResult {
  std::string run_id;
  InitMethod method = InitMethod::he;
  std::uint64_t seed = 0;
  WeightSet init;
  WeightSet weights;  // after training
  Trajectory trajectory;
  double test_accuracy = 0.0;

  Archive to_archive() const;
  static RunResult from_archive(const Archive& a);
};

// `{method}_{arch}_s{seed}`.
std::string run_id(InitMethod method, const std::string& arch, std::uint64_t seed);
// eval_index,val_acc rows.
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& t);

// Trained runs keyed by run id and a fingerprint of everything that
// determines them, so interrupted evaluations resume and experiments sharing
// a training setup reuse each other's runs. An empty directory disables
// caching.
class RunStore {
 public:
  RunStore() = default;
  explicit RunStore(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::optional<RunResult> load(const std::string& id, const std::string& fingerprint) const;
  void save(const RunResult& r, const std::string& fingerprint) const;
  bool enabled() const { return !dir_.empty(); }

 private:
  std::filesystem::path dir_;
};

struct EvalSetup {
  CompGraph graph;
  TrainConfig train;
  std::vector<InitMethod> methods;
  std::vector<std::uint64_t> seeds;
  std::vector<double> thresholds{0.5};
  // ensemble_ood
  int ensemble_size = 5;
  int num_ensembles = 10;
  std::uint64_t ensemble_seed = 0;
  Corruption corruption = Corruption::gauss_noise;
  EnsembleCombine combine = EnsembleCombine::probabilities;
  std::uint64_t corruption_seed = 0;
  // Extra text mixed into run fingerprints (e.g. generator file hashes).
  std::string source_tag;
};

// Trains (or loads) one run per method and seed.
std::vector<RunResult> run_population(const EvalSetup& setup, const DatasetSplits& data,
                                      const InitSources& sources, const RunStore& store,
                                      InitMethod method);

struct ConvergenceRow {
  InitMethod method = InitMethod::he;
  std::vector<std::vector<ThresholdStep>> per_seed;  // [seed][threshold]
  // Median over seeds per threshold; unreached counts as +infinity and an
  // infinite median is reported as empty.
  std::vector<std::optional<double>> median_steps;
  std::vector<double> first_eval_accuracy;  // accuracy at eval step 1 per seed
};
struct AccuracyRow {
  InitMethod method = InitMethod::he;
  std::vector<double> test_accuracy;
  QuantileRow quantiles;
};
struct EnsembleRow {
  InitMethod method = InitMethod::he;
  std::vector<EnsembleSpec> ensembles;
  // [severity 0..5][ensemble]; severity 0 is the clean test set.
  std::vector<std::vector<double>> ece, accuracy;
  std::vector<double> median_ece, median_accuracy;
};
struct SimilarityRow {
  InitMethod method = InitMethod::he;
  std::vector<std::string> runs;
  SimilarityMatrix agreement, cosine;
  bool inits_identical = false;    // every pair of pre-training weight sets equal
  bool inits_all_differ = false;   // every pair differs
};
struct TransferRow {
  InitMethod method = InitMethod::he;
  std::vector<double> test_accuracy;
  double median_accuracy = 0.0;
};

std::vector<ConvergenceRow> convergence_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                                   const InitSources& sources, const RunStore& store);
std::vector<AccuracyRow> accuracy_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                             const InitSources& sources, const RunStore& store);
std::vector<EnsembleRow> ensemble_ood_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                                 const InitSources& sources, const RunStore& store);
std::vector<SimilarityRow> similarity_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                                 const InitSources& sources, const RunStore& store);
// Fine-tunes every method and seed on `small` (train/val/test) with
// setup.train (its schedule defaults to the fine-tuning recipe).
std::vector<TransferRow> transfer_experiment(const EvalSetup& setup, const DatasetSplits& small,
                                             const InitSources& sources);

nlohmann::json to_json(const std::vector<ConvergenceRow>& rows, std::span<const double> thresholds);
nlohmann::json to_json(const std::vector<AccuracyRow>& rows);
nlohmann::json to_json(const std::vector<EnsembleRow>& rows);
nlohmann::json to_json(const std::vector<SimilarityRow>& rows);
nlohmann::json to_json(const std::vector<TransferRow>& rows);
nlohmann::json to_json(const QuantileRow& q);

}  // namespace initforge
