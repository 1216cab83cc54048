// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Layer-local weight generators: a Gaussian VAE and a VQ-VAE over 3x3 kernel
// slices, one model per convolution layer, plus the classical He/Xavier
// schemes used for everything the local models do not cover.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "initforge/harvest.hpp"

namespace initforge {

enum class InitScheme { he, xavier };

// he: N(0, 2/fan_in); xavier: U(+-sqrt(6/(fan_in+fan_out))); batch norm
// scale 1 and shift 0; biases 0. Every tensor draws from its own stream.
WeightSet baseline_init(const CompGraph& g, InitScheme scheme, std::uint64_t seed);

struct GaussianPosterior {
  std::vector<double> mean;
  std::vector<double> log_variance;
};

// Closed-form KL(q || p) of diagonal Gaussians.
double kl_diag_gaussian(const GaussianPosterior& q, const GaussianPosterior& prior);

using VarD = ag::Var<double>;

// Affine standardisation of slice values; the models see (x - shift) / scale.
struct SliceNormaliser {
  double shift = 0.0;
  double scale = 1.0;
  static SliceNormaliser fit(const Tensor<float>& slices);
};

struct VaeConfig {
  int latent_dim = 5;
  int hidden_dim = 32;
  // Per-element decoder log-variance; when false the decoder variance is 1.
  bool learned_variance = true;
};

// Encoder: two 3x3 convs (ELU) over the slice as a 1-channel image, then
// linear maps to the posterior mean and log-variance. Decoder mirrors it:
// linear to hidden x 3 x 3, two 3x3 convs, emitting the mean (and
// log-variance) of every slice element.
class VAEModel {
 public:
  VAEModel() = default;
  VAEModel(const VaeConfig& cfg, std::uint64_t seed);

  struct Posterior {
    VarD mean, log_variance;  // N x latent
  };
  struct Likelihood {
    VarD mean, log_variance;  // N x 9; log_variance empty for unit variance
  };
  // x: N x 9 in normalised units.
  Posterior encode(const VarD& x) const;
  Likelihood decode(const VarD& z) const;

  const VaeConfig& config() const { return cfg_; }
  std::vector<VarD>& params() { return params_; }
  const std::vector<VarD>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  int layer_id = -1;
  SliceNormaliser norm;

  Archive to_archive() const;
  static VAEModel from_archive(const Archive& a);

 private:
  VarD& p(const std::string& name);
  const VarD& p(const std::string& name) const;
  VaeConfig cfg_;
  std::vector<VarD> params_;
  std::vector<std::string> names_;
};

// Negative ELBO summed over a batch of normalised slices x (N x 9), for the
// reparameterised sample z = mean + exp(log_variance / 2) * eps.
VarD negative_elbo(const VAEModel& model, const VarD& x, const Tensor<double>& eps);

// Single-sample ELBO of one slice in original units, using the given latent
// sample for the reconstruction term and the closed-form KL to N(0, I).
double elbo(std::span<const double> x, const VAEModel& model, std::span<const double> z_sample);

struct Codebook {
  Tensor<double> entries;          // K x D
  std::vector<std::int64_t> usage;  // quantisation count per entry
};

struct Quantised {
  Tensor<double> z_q;              // rows of the codebook
  std::vector<int> indices;
};

// Nearest codebook row per input row (Euclidean); ties go to the lowest index.
Quantised vq_quantize(const Tensor<double>& z_e, const Codebook& cb);

// codebook = ||sg(z_e) - z_q||^2, commitment = beta * ||z_e - sg(z_q)||^2.
std::pair<VarD, VarD> vq_losses(const VarD& z_e, const VarD& z_q, double beta);
std::pair<double, double> vq_losses(const Tensor<double>& z_e, const Tensor<double>& z_q,
                                    double beta);

struct VqvaeConfig {
  int hidden_dim = 16;
  int codebook_size = 128;
  int code_dim = 4;
  double beta = 0.25;
};

// Encoder: 3x3 convs 1 -> h -> h -> D (ELU between), giving nine D-dim
// vectors per slice; decoder: 3x3 convs D -> h -> h -> 1.
class VQVAEModel {
 public:
  VQVAEModel() = default;
  VQVAEModel(const VqvaeConfig& cfg, std::uint64_t seed);

  VarD encode(const VarD& x) const;    // N x 9 -> (N*9) x D
  VarD decode(const VarD& z_q) const;  // (N*9) x D -> N x 9

  const VqvaeConfig& config() const { return cfg_; }
  std::vector<VarD>& params() { return params_; }
  const std::vector<VarD>& params() const { return params_; }
  VarD& codebook_var() { return codebook_; }
  const VarD& codebook_var() const { return codebook_; }
  Codebook codebook() const;

  int layer_id = -1;
  SliceNormaliser norm;
  std::vector<std::int64_t> usage;

  Archive to_archive() const;
  static VQVAEModel from_archive(const Archive& a);

 private:
  VarD& p(const std::string& name);
  const VarD& p(const std::string& name) const;
  VqvaeConfig cfg_;
  std::vector<VarD> params_;  // encoder and decoder weights, excluding the codebook
  std::vector<std::string> names_;
  VarD codebook_;
};

enum class LocalKind { vae, vqvae };
std::string local_kind_name(LocalKind kind);
LocalKind local_kind_from_name(const std::string& name);  // throws ConfigError

struct LocalTrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double lr = 0.01;
  // Defaults to 1 for the VAE and 1e-5 for the VQ-VAE when unset.
  std::optional<double> weight_decay;
  std::uint64_t seed = 0;
  VaeConfig vae;
  VqvaeConfig vqvae;

  double weight_decay_for(LocalKind kind) const {
    return weight_decay.value_or(kind == LocalKind::vae ? 1.0 : 1e-5);
  }
};

using LocalModel = std::variant<VAEModel, VQVAEModel>;

struct LocalTrainResult {
  LocalModel model;
  std::vector<double> epoch_loss;  // mean per-slice loss of each epoch
};

// Adam with a learning rate decreasing linearly to zero over the run.
// Throws std::invalid_argument when the slice set holds fewer slices than
// one batch.
LocalTrainResult train_local_model(const SliceSet& ds, LocalKind kind, const LocalTrainConfig& cfg);

// VAE: z ~ N(0, I), then a draw from the decoder's Gaussian. VQ-VAE: nine
// codebook indices drawn uniformly, decoded. Returns n x 3 x 3 in original
// units. Throws std::invalid_argument for n < 1.
Tensor<float> sample_slices(const LocalModel& model, std::int64_t n, std::uint64_t seed);

struct LocalInitRegistry {
  std::string arch;
  LocalKind kind = LocalKind::vae;
  std::map<int, LocalModel> models;  // conv node id -> model
};

std::string local_model_name(const std::string& arch, int layer, LocalKind kind);
// Writes one model file per layer plus `local_{arch}_{kind}.json` listing them.
void save_registry(const LocalInitRegistry& reg, const std::filesystem::path& dir);
LocalInitRegistry load_registry(const std::filesystem::path& manifest);
std::string registry_manifest_name(const std::string& arch, LocalKind kind);

Archive local_model_archive(const LocalModel& m);
LocalModel local_model_from_archive(const Archive& a);

// He weights everywhere, then every 3x3 kernel replaced by O*I slices sampled
// from its layer's model in (out, in) order. Layer l samples with
// derive_seed(seed, l), so layers are independent of one another.
WeightSet initialize_network_local(const CompGraph& g, const LocalInitRegistry& reg,
                                   std::uint64_t seed);

}  // namespace initforge
