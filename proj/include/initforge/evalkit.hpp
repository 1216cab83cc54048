// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Measurement protocol: training from an initialisation, steps-to-threshold,
// calibration, ensembles, pairwise similarity, corruptions and small-data
// transfer. No function here mutates a WeightSet it is given.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "initforge/dataset.hpp"
#include "initforge/network.hpp"

namespace initforge {

// Checks ws against g, then trains with cfg's fixed schedule.
TrainResult train_from_init(const WeightSet& ws, const CompGraph& g, const TrainConfig& cfg,
                            const LabeledDataset& train, const LabeledDataset& val);

struct ThresholdStep {
  double threshold = 0.0;
  std::optional<int> step;  // eval step; empty when never reached
  bool operator==(const ThresholdStep&) const = default;
};
// First eval step (index >= 1, so the pre-training evaluation never counts)
// with accuracy >= threshold, per threshold. Throws
// std::invalid_argument unless thresholds are sorted ascending.
std::vector<ThresholdStep> steps_to_threshold(const Trajectory& t,
                                              std::span<const double> thresholds);

// Equidistant buckets (i/s, (i+1)/s] over the max class probability.
struct CalibrationBins {
  int s = 10;
  std::vector<double> boundaries;  // rho_0 .. rho_s
  std::vector<std::int64_t> count;
  std::vector<double> accuracy;    // 0 for empty buckets
  std::vector<double> confidence;  // 0 for empty buckets
};
// Throws std::invalid_argument when a row does not sum to 1 within 1e-6, a
// label is out of range, or sizes disagree.
CalibrationBins calibration_bins(const Tensor<double>& probs, std::span<const int> labels,
                                 int s = 10);
double ece(const Tensor<double>& probs, std::span<const int> labels, int s = 10);

enum class EnsembleCombine { probabilities, logits };
// Mean of member softmax outputs (or softmax of mean logits) over `data`.
Tensor<double> ensemble_predict(std::span<const WeightSet> members, const CompGraph& g,
                                const LabeledDataset& data,
                                EnsembleCombine combine = EnsembleCombine::probabilities);

struct EnsembleSpec {
  std::vector<std::string> members;
  std::uint64_t seed = 0;
  bool operator==(const EnsembleSpec&) const = default;
};
// n ensembles of k distinct pool members each, drawn without replacement
// within an ensemble. Member order follows the pool. Throws when the pool
// holds fewer than k distinct ids.
std::vector<EnsembleSpec> sample_ensembles(const std::vector<std::string>& pool, int k, int n,
                                           std::uint64_t seed);

double prediction_agreement(std::span<const int> a, std::span<const int> b);
// Batch mean of per-row logit cosine similarity; zero rows contribute 0.
double logit_cosine(const Tensor<float>& a, const Tensor<float>& b);

enum class SimilarityKind { prediction_agreement, logit_cosine };
std::string similarity_kind_name(SimilarityKind kind);

struct SimilarityMatrix {
  SimilarityKind kind = SimilarityKind::logit_cosine;
  std::vector<std::vector<double>> values;
  double upper_mean = 0.0;  // mean of the strict upper triangle
};
// All models share architecture g. Throws for fewer than two models.
SimilarityMatrix pairwise_similarity(std::span<const WeightSet> models, const CompGraph& g,
                                     const LabeledDataset& data, SimilarityKind kind);
SimilarityMatrix similarity_from_logits(std::span<const Tensor<float>> logits, SimilarityKind kind);

// Box-plot summary with linearly interpolated quartiles and 1.5 IQR whiskers
// ending at the most extreme sample inside the fence.
struct QuantileRow {
  double median = 0.0, q1 = 0.0, q3 = 0.0;
  double whisker_low = 0.0, whisker_high = 0.0;
  std::vector<double> outliers;
  std::size_t n = 0;
};
QuantileRow quantile_row(std::vector<double> values);
double median(std::vector<double> values);

enum class Corruption { gauss_noise, blur, contrast, pixelate };
std::string corruption_name(Corruption kind);
Corruption corruption_from_name(const std::string& name);  // throws ConfigError
// Severity parameter for kind at severity 1..5.
double corruption_parameter(Corruption kind, int severity);
// Label-preserving pixel transform, clipped to [0, 1].
LabeledDataset corrupt(const LabeledDataset& data, Corruption kind, int severity,
                       std::uint64_t seed);
// Mean over images of the per-image L2 distance between a and b.
double mean_distortion(const LabeledDataset& a, const LabeledDataset& b);

// Class counts may differ by at most one sample.
bool is_class_balanced(const LabeledDataset& data);
// Fine-tunes from `init` on `small_train` (cfg.schedule is replaced by the
// 40-epoch fine-tuning recipe when empty) and returns accuracy on `test`.
// Throws std::invalid_argument for an unbalanced training set.
double transfer_eval(const WeightSet& init, const CompGraph& g, const LabeledDataset& small_train,
                     const LabeledDataset& val, const LabeledDataset& test, TrainConfig cfg);

}  // namespace initforge
