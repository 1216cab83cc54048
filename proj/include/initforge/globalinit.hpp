// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Graph hypernetworks: a gated graph network encodes an architecture's
// computational graph into per-node states, and a shared decoder turns each
// parameterised node's state (optionally extended by a pass-level noise
// vector) into that node's weights.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "initforge/network.hpp"
#include "initforge/optim.hpp"

namespace initforge {

using VarF = ag::Var<float>;

struct GHNConfig {
  int hidden_dim = 32;      // node state width d
  int noise_dim = 0;        // 0: deterministic GHN, 8: Noise GHN
  int decoder_hidden = 64;  // width of the decoder's hidden layer
  int max_channels = 64;    // canonical kernel is C x C x 3 x 3
  int rounds = 1;           // forward+backward sweeps
};

// Width of the fixed shape-attribute encoding appended to each op embedding.
inline constexpr int kAttrDims = 4;

class GHNModel {
 public:
  GHNModel() = default;
  GHNModel(const GHNConfig& cfg, std::uint64_t seed);
  // Copies own fresh parameter nodes, so a copy never aliases the original.
  GHNModel(const GHNModel& other);
  GHNModel& operator=(const GHNModel& other);
  GHNModel(GHNModel&&) = default;
  GHNModel& operator=(GHNModel&&) = default;

  const GHNConfig& config() const { return cfg_; }
  std::vector<VarF>& params() { return params_; }
  const std::vector<VarF>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  const VarF& p(const std::string& name) const;
  std::int64_t canonical_size() const;  // C * C * 9

  Archive to_archive() const;
  static GHNModel from_archive(const Archive& a);

 private:
  GHNConfig cfg_;
  std::vector<VarF> params_;
  std::vector<std::string> names_;
};

struct HiddenStates {
  std::vector<VarF> states;  // one [1, d] row per node id
  int round = 0;
};

// H0[i] = [embedding(op_i) | attribute encoding of node i].
HiddenStates init_hidden_states(const CompGraph& g, const GHNModel& model);
// T rounds; each round updates nodes in topological order from their
// in-neighbours, then in reverse order from their out-neighbours, with a GRU
// cell per direction. Throws std::invalid_argument for T < 1.
HiddenStates propagate(const CompGraph& g, const HiddenStates& h0, const GHNModel& model, int rounds);

// Raw decoder output for one node state: the canonical kernel
// (C x C x 3 x 3) for conv/linear specs, a C-vector for batch norm and bias.
// `noise` must be given iff the model has noise_dim > 0.
VarF decode_node_weights(const VarF& h, const std::optional<std::vector<float>>& noise,
                         const ParamSpec& spec, const GHNModel& model);

// Index-0-anchored slicing/tiling of a raw tensor onto spec.shape, then
// per-tensor normalisation: kernels and linear weights to standard deviation
// sqrt(2 / fan_in); batch-norm scale recentred on 1; shifts and biases on 0.
VarF fit_to_shape(const VarF& raw, const ParamSpec& spec);
Tensor<float> fit_to_shape(const Tensor<float>& raw, const ParamSpec& spec);
// Flat source index in the raw tensor for every element of the target.
std::vector<std::int64_t> fit_index(const Shape& raw, const ParamSpec& spec);

// Generated parameters (differentiable), aligned with enumerate_params(g).
std::vector<VarF> ghn_generate(const CompGraph& g, const GHNModel& model,
                               const std::optional<std::vector<float>>& noise);
// Same from already-propagated states, so two noise draws can share one
// propagation.
std::vector<VarF> ghn_decode_all(const CompGraph& g, const HiddenStates& states,
                                 const GHNModel& model,
                                 const std::optional<std::vector<float>>& noise);
WeightSet ghn_forward(const CompGraph& g, const GHNModel& model,
                      const std::optional<std::vector<float>>& noise = std::nullopt);
// Standard-normal noise vector of the model's noise_dim drawn from `seed`;
// empty optional for deterministic models.
std::optional<std::vector<float>> sample_noise(const GHNModel& model, std::uint64_t seed);

// Mean over the batch of per-sample cosine similarity between logit rows.
// Zero-norm rows contribute 0 and are counted in `degenerate_rows`.
VarF similarity_loss(const VarF& logits1, const VarF& logits2, int* degenerate_rows = nullptr);
double similarity_loss(const Tensor<float>& logits1, const Tensor<float>& logits2,
                       int* degenerate_rows = nullptr);

struct StepLosses {
  double loss = 0.0;
  double xent1 = 0.0;
  double xent2 = 0.0;    // Noise GHN only
  double simloss = 0.0;  // Noise GHN only
  bool noisy = false;
};

// Optimiser wrapper owned by a training run.
class GHNTrainer {
 public:
  GHNTrainer(GHNModel& model, double weight_decay = 0.0);
  // sum_j CE(f(x, a_j, H(a_j)), y), cross-entropy averaged over the batch.
  // Gradients from every architecture are accumulated before one Adam step.
  StepLosses step(const Tensor<float>& images_cnhw, std::span<const int> labels,
                  std::span<const CompGraph> archs, double lr);
  // sum_j [CE(xi1) + CE(xi2) + CoSim(logits(xi1), logits(xi2))].
  StepLosses noise_step(const Tensor<float>& images_cnhw, std::span<const int> labels,
                        std::span<const CompGraph> archs, const std::vector<float>& xi1,
                        const std::vector<float>& xi2, double lr, double similarity_weight = 1.0);
  // Parameter indices that have received a nonzero gradient so far.
  const std::vector<bool>& touched() const { return touched_; }

 private:
  void finish(double lr);
  GHNModel& model_;
  Adam<float> opt_;
  std::vector<bool> touched_;
};

struct GHNTrainConfig {
  int batch_size = 64;
  std::vector<int> train_depths = {8, 14, 20};
  int width = 1;
  int epochs = 3;
  double lr = 1e-3;
  double weight_decay = 0.0;
  // Learning-rate x0.1 at the start of these epochs.
  std::vector<int> milestones = {1, 2};
  double similarity_weight = 1.0;
  std::uint64_t seed = 0;
  GHNConfig model;
  std::string dataset = "texture2";

  void validate() const;  // throws ConfigError
  // x0.1 at 15/30 and 20/30 of the run.
  static std::vector<int> scaled_milestones(int epochs);
};

enum class GHNVariant { ghn, noise_ghn };
std::string variant_name(GHNVariant v);
GHNVariant variant_from_name(const std::string& name);  // throws ConfigError

struct GHNTrainResult {
  GHNModel model;
  std::vector<StepLosses> log;
  std::vector<GHNModel> milestone_checkpoints;
};

GHNTrainResult train_ghn(const GHNTrainConfig& cfg, const LabeledDataset& data, GHNVariant variant);

// CSV with header step,loss,xent1,xent2,simloss; columns that do not apply to
// the variant are left empty.
void write_ghn_log(std::ostream& out, const std::vector<StepLosses>& log);
std::string ghn_model_name(GHNVariant v, const std::string& dataset);

}  // namespace initforge
