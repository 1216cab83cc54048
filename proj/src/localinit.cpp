// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/localinit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "initforge/errors.hpp"
#include "initforge/optim.hpp"
#include "initforge/rng.hpp"

namespace initforge {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

std::uint64_t param_stream(const ParamSpec& s) {
  return static_cast<std::uint64_t>(s.node_id) * 8 + static_cast<std::uint64_t>(s.kind);
}

// Uniform(+-1/sqrt(fan_in)), the usual default for small conv and linear layers.
Tensor<double> default_init(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = u(rng);
  return t;
}

// [N, 9] rows <-> [C, N, 3, 3] channel-major images, and [D, N, 3, 3] <->
// [(N*9), D] code vectors. All are pure index permutations.
std::vector<std::int64_t> image_to_rows_index(std::int64_t c, std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(c * n * 9));
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < 9; ++p) idx[s * c * 9 + ch * 9 + p] = (ch * n + s) * 9 + p;
  return idx;
}

std::vector<std::int64_t> rows_to_image_index(std::int64_t c, std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(c * n * 9));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t p = 0; p < 9; ++p) idx[(ch * n + s) * 9 + p] = s * c * 9 + ch * 9 + p;
  return idx;
}

std::vector<std::int64_t> image_to_codes_index(std::int64_t d, std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(d * n * 9));
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t p = 0; p < 9; ++p)
      for (std::int64_t ch = 0; ch < d; ++ch) idx[(s * 9 + p) * d + ch] = (ch * n + s) * 9 + p;
  return idx;
}

std::vector<std::int64_t> codes_to_image_index(std::int64_t d, std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(d * n * 9));
  for (std::int64_t ch = 0; ch < d; ++ch)
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t p = 0; p < 9; ++p) idx[(ch * n + s) * 9 + p] = (s * 9 + p) * d + ch;
  return idx;
}

VarD conv_bias(const VarD& x, const VarD& w, const VarD& b) {
  return ag::add_channel_bias(ag::conv2d(x, w, 1, 1), b);
}

VarD linear(const VarD& x, const VarD& w, const VarD& b) {
  return ag::add_rowvec(ag::matmul(x, w, false, true), b);
}

void check_finite(double v, std::int64_t step, const char* what) {
  if (!std::isfinite(v)) throw NumericError(step, what);
}

Tensor<double> normalised_rows(const Tensor<float>& slices, const SliceNormaliser& norm,
                               std::span<const std::int64_t> idx) {
  Tensor<double> out({static_cast<std::int64_t>(idx.size()), 9});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int k = 0; k < 9; ++k)
      out[i * 9 + k] = (static_cast<double>(slices[idx[i] * 9 + k]) - norm.shift) / norm.scale;
  return out;
}

nlohmann::json params_meta(const std::vector<std::string>& names) { return names; }

}  // namespace

// ---------------------------------------------------------------- baselines

WeightSet baseline_init(const CompGraph& g, InitScheme scheme, std::uint64_t seed) {
  WeightSet ws = empty_weight_set(g);
  for (std::size_t i = 0; i < ws.specs.size(); ++i) {
    const auto& spec = ws.specs[i];
    auto& t = ws.tensors[i];
    switch (spec.kind) {
      case ParamKind::bn_scale:
        std::fill(t.data.begin(), t.data.end(), 1.0f);
        break;
      case ParamKind::bn_shift:
      case ParamKind::bias:
        break;
      case ParamKind::conv_kernel:
      case ParamKind::linear_weight: {
        auto rng = make_rng(seed, param_stream(spec));
        if (scheme == InitScheme::he) {
          std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in(spec)));
          for (auto& v : t.data) v = static_cast<float>(d(rng));
        } else {
          const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(spec) + fan_out(spec)));
          std::uniform_real_distribution<double> d(-bound, bound);
          // Rounding to float can land a hair above the bound; clamp it back.
          const auto fb = static_cast<float>(bound);
          for (auto& v : t.data) {
            v = std::clamp(static_cast<float>(d(rng)), -fb, fb);
            if (std::abs(static_cast<double>(v)) > bound) v = std::nextafter(v, 0.0f);
          }
        }
        break;
      }
    }
  }
  return ws;
}

// ----------------------------------------------------------------------- KL

double kl_diag_gaussian(const GaussianPosterior& q, const GaussianPosterior& prior) {
  const std::size_t d = q.mean.size();
  if (q.log_variance.size() != d || prior.mean.size() != d || prior.log_variance.size() != d) {
    throw std::invalid_argument("kl_diag_gaussian: dimension mismatch");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double vq = std::exp(q.log_variance[i]), vp = std::exp(prior.log_variance[i]);
    const double diff = q.mean[i] - prior.mean[i];
    kl += 0.5 * (prior.log_variance[i] - q.log_variance[i] + (vq + diff * diff) / vp - 1.0);
  }
  return std::max(kl, 0.0);
}

SliceNormaliser SliceNormaliser::fit(const Tensor<float>& slices) {
  SliceNormaliser n;
  if (slices.data.empty()) return n;
  double mean = 0.0;
  for (float v : slices.data) mean += v;
  mean /= static_cast<double>(slices.data.size());
  double var = 0.0;
  for (float v : slices.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(slices.data.size());
  n.shift = mean;
  // Degenerate (constant) data keeps a tiny unit so samples stay at the constant.
  n.scale = var > 1e-12 ? std::sqrt(var) : 1e-3;
  return n;
}

// ---------------------------------------------------------------------- VAE

VAEModel::VAEModel(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.latent_dim < 1 || cfg.hidden_dim < 1) throw std::invalid_argument("VAE dims must be >= 1");
  auto rng = make_rng(seed, 0xbae);
  const std::int64_t h = cfg.hidden_dim, d = cfg.latent_dim, out = cfg.learned_variance ? 2 : 1;
  auto add = [&](const std::string& name, Shape shape, std::int64_t fan) {
    names_.push_back(name);
    params_.push_back(VarD::param(default_init(std::move(shape), fan, rng)));
  };
  add("enc.conv1.w", {h, 1, 3, 3}, 9);
  add("enc.conv1.b", {h}, 9);
  add("enc.conv2.w", {h, h, 3, 3}, h * 9);
  add("enc.conv2.b", {h}, h * 9);
  add("enc.mean.w", {d, h * 9}, h * 9);
  add("enc.mean.b", {d}, h * 9);
  add("enc.logvar.w", {d, h * 9}, h * 9);
  add("enc.logvar.b", {d}, h * 9);
  add("dec.fc.w", {h * 9, d}, d);
  add("dec.fc.b", {h * 9}, d);
  add("dec.conv1.w", {h, h, 3, 3}, h * 9);
  add("dec.conv1.b", {h}, h * 9);
  add("dec.out.w", {out, h, 3, 3}, h * 9);
  add("dec.out.b", {out}, h * 9);
}

VarD& VAEModel::p(const std::string& name) {
  return const_cast<VarD&>(std::as_const(*this).p(name));
}

const VarD& VAEModel::p(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return params_[i];
  throw std::logic_error("VAE has no parameter " + name);
}

VAEModel::Posterior VAEModel::encode(const VarD& x) const {
  const std::int64_t n = x.shape().at(0), h = cfg_.hidden_dim;
  auto y = ag::reshape(x, {1, n, 3, 3});
  y = ag::elu(conv_bias(y, p("enc.conv1.w"), p("enc.conv1.b")));
  y = ag::elu(conv_bias(y, p("enc.conv2.w"), p("enc.conv2.b")));
  auto flat = ag::gather(y, image_to_rows_index(h, n), {n, h * 9});
  return {linear(flat, p("enc.mean.w"), p("enc.mean.b")),
          linear(flat, p("enc.logvar.w"), p("enc.logvar.b"))};
}

VAEModel::Likelihood VAEModel::decode(const VarD& z) const {
  const std::int64_t n = z.shape().at(0), h = cfg_.hidden_dim;
  auto y = ag::elu(linear(z, p("dec.fc.w"), p("dec.fc.b")));
  y = ag::gather(y, rows_to_image_index(h, n), {h, n, 3, 3});
  y = ag::elu(conv_bias(y, p("dec.conv1.w"), p("dec.conv1.b")));
  y = conv_bias(y, p("dec.out.w"), p("dec.out.b"));
  const std::int64_t out = cfg_.learned_variance ? 2 : 1;
  auto rows = ag::gather(y, image_to_rows_index(out, n), {n, out * 9});
  if (!cfg_.learned_variance) return {rows, VarD()};
  // Row layout is [mean(9) | logvar(9)] per sample.
  std::vector<std::int64_t> mi, li;
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t k = 0; k < 9; ++k) {
      mi.push_back(s * 18 + k);
      li.push_back(s * 18 + 9 + k);
    }
  return {ag::gather(rows, std::move(mi), {n, 9}), ag::gather(rows, std::move(li), {n, 9})};
}

Archive VAEModel::to_archive() const {
  Archive a;
  a.meta["type"] = "local_model";
  a.meta["kind"] = "vae";
  a.meta["layer_id"] = layer_id;
  a.meta["config"] = {{"latent_dim", cfg_.latent_dim},
                      {"hidden_dim", cfg_.hidden_dim},
                      {"learned_variance", cfg_.learned_variance}};
  a.meta["norm"] = {{"shift", norm.shift}, {"scale", norm.scale}};
  a.meta["params"] = params_meta(names_);
  for (std::size_t i = 0; i < names_.size(); ++i) a.put(names_[i], params_[i].value());
  return a;
}

VAEModel VAEModel::from_archive(const Archive& a) {
  if (a.meta.value("kind", "") != "vae") throw ArtifactError("archive is not a VAE model");
  VaeConfig cfg;
  const auto& c = a.meta.at("config");
  cfg.latent_dim = c.at("latent_dim");
  cfg.hidden_dim = c.at("hidden_dim");
  cfg.learned_variance = c.at("learned_variance");
  VAEModel m(cfg, 0);
  m.layer_id = a.meta.at("layer_id");
  m.norm.shift = a.meta.at("norm").at("shift");
  m.norm.scale = a.meta.at("norm").at("scale");
  for (std::size_t i = 0; i < m.names_.size(); ++i) {
    const auto& t = a.f64(m.names_[i]);
    if (t.shape != m.params_[i].shape()) throw ArtifactError("VAE parameter " + m.names_[i] + " has wrong shape");
    m.params_[i].value_mut() = t;
  }
  return m;
}

VarD negative_elbo(const VAEModel& model, const VarD& x, const Tensor<double>& eps) {
  const auto q = model.encode(x);
  if (eps.shape != q.mean.shape()) throw std::invalid_argument("negative_elbo: eps shape mismatch");
  const auto z = ag::add(q.mean, ag::mul(ag::exp(ag::scale(q.log_variance, 0.5)), VarD::constant(eps)));
  const auto lik = model.decode(z);
  const auto sq = ag::square(ag::sub(x, lik.mean));
  const double n_elem = static_cast<double>(x.numel());
  VarD recon;
  if (lik.log_variance) {
    recon = ag::scale(ag::sum(ag::add(lik.log_variance,
                                      ag::mul(sq, ag::exp(ag::scale(lik.log_variance, -1.0))))),
                      0.5);
  } else {
    recon = ag::scale(ag::sum(sq), 0.5);
  }
  recon = ag::add_scalar(recon, 0.5 * kLog2Pi * n_elem);
  const auto kl = ag::scale(
      ag::sum(ag::sub(ag::add(ag::square(q.mean), ag::exp(q.log_variance)),
                      ag::add_scalar(q.log_variance, 1.0))),
      0.5);
  return ag::add(recon, kl);
}

double elbo(std::span<const double> x, const VAEModel& model, std::span<const double> z_sample) {
  if (x.size() != 9) throw std::invalid_argument("elbo: slice must have 9 values");
  if (z_sample.size() != static_cast<std::size_t>(model.config().latent_dim)) {
    throw std::invalid_argument("elbo: latent sample has wrong dimension");
  }
  ag::NoGradGuard no_grad;
  Tensor<double> xn({1, 9});
  for (int k = 0; k < 9; ++k) xn[k] = (x[k] - model.norm.shift) / model.norm.scale;
  const auto xv = VarD::constant(xn);
  const auto q = model.encode(xv);
  GaussianPosterior post{q.mean.value().data, q.log_variance.value().data};
  GaussianPosterior prior{std::vector<double>(post.mean.size(), 0.0),
                          std::vector<double>(post.mean.size(), 0.0)};
  const double kl = kl_diag_gaussian(post, prior);
  Tensor<double> z({1, static_cast<std::int64_t>(z_sample.size())});
  std::copy(z_sample.begin(), z_sample.end(), z.data.begin());
  const auto lik = model.decode(VarD::constant(z));
  double log_p = 0.0;
  for (int k = 0; k < 9; ++k) {
    const double lv = lik.log_variance ? lik.log_variance.value()[k] : 0.0;
    const double r = xn[k] - lik.mean.value()[k];
    log_p += -0.5 * (kLog2Pi + lv + r * r / std::exp(lv));
  }
  // Density of the original-unit slice: Jacobian of the standardisation.
  log_p -= 9.0 * std::log(model.norm.scale);
  const double out = log_p - kl;
  if (!std::isfinite(out)) throw NumericError(0, "non-finite ELBO");
  return out;
}

// ------------------------------------------------------------------ VQ-VAE

Quantised vq_quantize(const Tensor<double>& z_e, const Codebook& cb) {
  const std::int64_t d = cb.entries.shape.at(1), k = cb.entries.shape.at(0);
  if (z_e.shape.size() != 2 || z_e.shape[1] != d) {
    throw std::invalid_argument("vq_quantize: code dimension mismatch");
  }
  const std::int64_t n = z_e.shape[0];
  Quantised q;
  q.z_q = Tensor<double>({n, d});
  q.indices.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::int64_t c = 0; c < d; ++c) {
        const double diff = z_e[i * d + c] - cb.entries[j * d + c];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(j);
      }
    }
    q.indices[i] = best;
    std::copy_n(cb.entries.ptr() + best * d, d, q.z_q.ptr() + i * d);
  }
  return q;
}

std::pair<VarD, VarD> vq_losses(const VarD& z_e, const VarD& z_q, double beta) {
  if (z_e.shape() != z_q.shape()) throw std::invalid_argument("vq_losses: shape mismatch");
  auto codebook = ag::sum(ag::square(ag::sub(ag::detach(z_e), z_q)));
  auto commitment = ag::scale(ag::sum(ag::square(ag::sub(z_e, ag::detach(z_q)))), beta);
  return {codebook, commitment};
}

std::pair<double, double> vq_losses(const Tensor<double>& z_e, const Tensor<double>& z_q,
                                    double beta) {
  ag::NoGradGuard no_grad;
  auto [c, m] = vq_losses(VarD::constant(z_e), VarD::constant(z_q), beta);
  return {c.item(), m.item()};
}

VQVAEModel::VQVAEModel(const VqvaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.hidden_dim < 1 || cfg.codebook_size < 1 || cfg.code_dim < 1) {
    throw std::invalid_argument("VQ-VAE dims must be >= 1");
  }
  if (!(cfg.beta > 0)) throw std::invalid_argument("commitment cost must be positive");
  auto rng = make_rng(seed, 0x5eed7);
  const std::int64_t h = cfg.hidden_dim, d = cfg.code_dim;
  auto add = [&](const std::string& name, Shape shape, std::int64_t fan) {
    names_.push_back(name);
    params_.push_back(VarD::param(default_init(std::move(shape), fan, rng)));
  };
  add("enc.conv1.w", {h, 1, 3, 3}, 9);
  add("enc.conv1.b", {h}, 9);
  add("enc.conv2.w", {h, h, 3, 3}, h * 9);
  add("enc.conv2.b", {h}, h * 9);
  add("enc.conv3.w", {d, h, 3, 3}, h * 9);
  add("enc.conv3.b", {d}, h * 9);
  add("dec.conv1.w", {h, d, 3, 3}, d * 9);
  add("dec.conv1.b", {h}, d * 9);
  add("dec.conv2.w", {h, h, 3, 3}, h * 9);
  add("dec.conv2.b", {h}, h * 9);
  add("dec.conv3.w", {1, h, 3, 3}, h * 9);
  add("dec.conv3.b", {1}, h * 9);
  const double bound = 1.0 / cfg.codebook_size;
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<double> cb({cfg.codebook_size, d});
  for (auto& v : cb.data) v = u(rng);
  codebook_ = VarD::param(std::move(cb));
  usage.assign(static_cast<std::size_t>(cfg.codebook_size), 0);
}

VarD& VQVAEModel::p(const std::string& name) {
  return const_cast<VarD&>(std::as_const(*this).p(name));
}

const VarD& VQVAEModel::p(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return params_[i];
  throw std::logic_error("VQ-VAE has no parameter " + name);
}

VarD VQVAEModel::encode(const VarD& x) const {
  const std::int64_t n = x.shape().at(0), d = cfg_.code_dim;
  auto y = ag::reshape(x, {1, n, 3, 3});
  y = ag::elu(conv_bias(y, p("enc.conv1.w"), p("enc.conv1.b")));
  y = ag::elu(conv_bias(y, p("enc.conv2.w"), p("enc.conv2.b")));
  y = conv_bias(y, p("enc.conv3.w"), p("enc.conv3.b"));
  return ag::gather(y, image_to_codes_index(d, n), {n * 9, d});
}

VarD VQVAEModel::decode(const VarD& z_q) const {
  const std::int64_t d = cfg_.code_dim, n = z_q.shape().at(0) / 9;
  auto y = ag::gather(z_q, codes_to_image_index(d, n), {d, n, 3, 3});
  y = ag::elu(conv_bias(y, p("dec.conv1.w"), p("dec.conv1.b")));
  y = ag::elu(conv_bias(y, p("dec.conv2.w"), p("dec.conv2.b")));
  y = conv_bias(y, p("dec.conv3.w"), p("dec.conv3.b"));
  return ag::reshape(y, {n, 9});
}

Codebook VQVAEModel::codebook() const { return {codebook_.value(), usage}; }

Archive VQVAEModel::to_archive() const {
  Archive a;
  a.meta["type"] = "local_model";
  a.meta["kind"] = "vqvae";
  a.meta["layer_id"] = layer_id;
  a.meta["config"] = {{"hidden_dim", cfg_.hidden_dim},
                      {"codebook_size", cfg_.codebook_size},
                      {"code_dim", cfg_.code_dim},
                      {"beta", cfg_.beta}};
  a.meta["norm"] = {{"shift", norm.shift}, {"scale", norm.scale}};
  a.meta["usage"] = usage;
  a.meta["params"] = params_meta(names_);
  for (std::size_t i = 0; i < names_.size(); ++i) a.put(names_[i], params_[i].value());
  a.put("codebook", codebook_.value());
  return a;
}

VQVAEModel VQVAEModel::from_archive(const Archive& a) {
  if (a.meta.value("kind", "") != "vqvae") throw ArtifactError("archive is not a VQ-VAE model");
  VqvaeConfig cfg;
  const auto& c = a.meta.at("config");
  cfg.hidden_dim = c.at("hidden_dim");
  cfg.codebook_size = c.at("codebook_size");
  cfg.code_dim = c.at("code_dim");
  cfg.beta = c.at("beta");
  VQVAEModel m(cfg, 0);
  m.layer_id = a.meta.at("layer_id");
  m.norm.shift = a.meta.at("norm").at("shift");
  m.norm.scale = a.meta.at("norm").at("scale");
  m.usage = a.meta.at("usage").get<std::vector<std::int64_t>>();
  for (std::size_t i = 0; i < m.names_.size(); ++i) {
    const auto& t = a.f64(m.names_[i]);
    if (t.shape != m.params_[i].shape()) throw ArtifactError("VQ-VAE parameter " + m.names_[i] + " has wrong shape");
    m.params_[i].value_mut() = t;
  }
  m.codebook_.value_mut() = a.f64("codebook");
  return m;
}

// ----------------------------------------------------------------- training

std::string local_kind_name(LocalKind kind) { return kind == LocalKind::vae ? "vae" : "vqvae"; }

LocalKind local_kind_from_name(const std::string& name) {
  if (name == "vae") return LocalKind::vae;
  if (name == "vqvae") return LocalKind::vqvae;
  throw ConfigError("kind", "unknown local generator '" + name + "'");
}

namespace {

LocalTrainResult train_vae(const SliceSet& ds, const LocalTrainConfig& cfg) {
  VAEModel model(cfg.vae, derive_seed(cfg.seed, 1));
  model.layer_id = ds.layer_id;
  model.norm = SliceNormaliser::fit(ds.slices);
  Adam<double> opt(model.params(), cfg.weight_decay_for(LocalKind::vae));
  const std::int64_t n = ds.size(), b = cfg.batch_size, per_epoch = n / b;
  const std::int64_t total = per_epoch * cfg.epochs;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  auto noise_rng = make_rng(cfg.seed, 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  LocalTrainResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 100 + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::int64_t k = 0; k < per_epoch; ++k, ++step) {
      std::span<const std::int64_t> idx(order.data() + k * b, static_cast<std::size_t>(b));
      const auto x = VarD::constant(normalised_rows(ds.slices, model.norm, idx));
      Tensor<double> eps({b, cfg.vae.latent_dim});
      for (auto& v : eps.data) v = normal(noise_rng);
      opt.zero_grad();
      const auto loss = negative_elbo(model, x, eps);
      check_finite(loss.item(), step, "non-finite VAE loss");
      ag::backward(loss);
      opt.step(cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total)));
      epoch_loss += loss.item();
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(per_epoch * b));
  }
  result.model = std::move(model);
  return result;
}

LocalTrainResult train_vqvae(const SliceSet& ds, const LocalTrainConfig& cfg) {
  VQVAEModel model(cfg.vqvae, derive_seed(cfg.seed, 1));
  model.layer_id = ds.layer_id;
  model.norm = SliceNormaliser::fit(ds.slices);
  auto params = model.params();
  params.push_back(model.codebook_var());
  Adam<double> opt(params, cfg.weight_decay_for(LocalKind::vqvae));
  const std::int64_t n = ds.size(), b = cfg.batch_size, per_epoch = n / b;
  const std::int64_t total = per_epoch * cfg.epochs;
  const std::int64_t d = cfg.vqvae.code_dim, k_codes = cfg.vqvae.codebook_size;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  auto reseed_rng = make_rng(cfg.seed, 3);
  LocalTrainResult result;
  std::int64_t step = 0;
  std::vector<std::int64_t> total_usage(static_cast<std::size_t>(k_codes), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 100 + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::int64_t> epoch_usage(static_cast<std::size_t>(k_codes), 0);
    Tensor<double> last_codes;
    double epoch_loss = 0.0;
    for (std::int64_t k = 0; k < per_epoch; ++k, ++step) {
      std::span<const std::int64_t> idx(order.data() + k * b, static_cast<std::size_t>(b));
      const auto x = VarD::constant(normalised_rows(ds.slices, model.norm, idx));
      opt.zero_grad();
      const auto z_e = model.encode(x);
      const auto q = vq_quantize(z_e.value(), model.codebook());
      std::vector<std::int64_t> gather_idx;
      gather_idx.reserve(q.indices.size() * static_cast<std::size_t>(d));
      for (int i : q.indices) {
        ++epoch_usage[i];
        for (std::int64_t c = 0; c < d; ++c) gather_idx.push_back(i * d + c);
      }
      const auto z_q = ag::gather(model.codebook_var(), std::move(gather_idx), z_e.shape());
      auto [cb_loss, commit] = vq_losses(z_e, z_q, cfg.vqvae.beta);
      const auto x_hat = model.decode(ag::straight_through(z_e, z_q.value()));
      const auto recon = ag::sum(ag::square(ag::sub(x_hat, x)));
      const auto loss = ag::add(recon, ag::add(cb_loss, commit));
      check_finite(loss.item(), step, "non-finite VQ-VAE loss");
      last_codes = z_e.value();
      ag::backward(loss);
      opt.step(cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total)));
      epoch_loss += loss.item();
    }
    // Entries nobody picked this epoch restart at a random encoder output.
    auto& entries = model.codebook_var().value_mut();
    std::uniform_int_distribution<std::int64_t> pick(0, last_codes.shape.at(0) - 1);
    for (std::int64_t j = 0; j < k_codes; ++j) {
      total_usage[j] += epoch_usage[j];
      if (epoch_usage[j] > 0 || epoch + 1 == cfg.epochs) continue;
      const std::int64_t row = pick(reseed_rng);
      std::copy_n(last_codes.ptr() + row * d, d, entries.ptr() + j * d);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(per_epoch * b));
  }
  model.usage = std::move(total_usage);
  result.model = std::move(model);
  return result;
}

}  // namespace

LocalTrainResult train_local_model(const SliceSet& ds, LocalKind kind, const LocalTrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("batch_size", "must be positive");
  if (cfg.epochs < 1) throw ConfigError("epochs", "must be at least 1");
  if (!(cfg.lr > 0)) throw ConfigError("lr", "must be positive");
  if (ds.size() < cfg.batch_size) {
    throw std::invalid_argument("layer " + std::to_string(ds.layer_id) + " has " +
                                std::to_string(ds.size()) + " slices, fewer than one batch of " +
                                std::to_string(cfg.batch_size) + "; lower the batch size");
  }
  for (float v : ds.slices.data) {
    if (!std::isfinite(v)) throw std::invalid_argument("slice set contains non-finite values");
  }
  return kind == LocalKind::vae ? train_vae(ds, cfg) : train_vqvae(ds, cfg);
}

// ----------------------------------------------------------------- sampling

Tensor<float> sample_slices(const LocalModel& model, std::int64_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_slices: n must be >= 1");
  ag::NoGradGuard no_grad;
  Tensor<float> out({n, 3, 3});
  constexpr std::int64_t kChunk = 2048;
  auto rng = make_rng(seed, 0x5a4b1e);
  std::normal_distribution<double> normal(0.0, 1.0);
  const SliceNormaliser norm = std::visit([](const auto& m) { return m.norm; }, model);
  for (std::int64_t start = 0; start < n; start += kChunk) {
    const std::int64_t len = std::min(kChunk, n - start);
    Tensor<double> values;
    if (const auto* vae = std::get_if<VAEModel>(&model)) {
      Tensor<double> z({len, vae->config().latent_dim});
      for (auto& v : z.data) v = normal(rng);
      const auto lik = vae->decode(VarD::constant(std::move(z)));
      values = lik.mean.value();
      if (lik.log_variance) {
        for (std::size_t i = 0; i < values.data.size(); ++i) {
          values.data[i] += std::exp(0.5 * lik.log_variance.value().data[i]) * normal(rng);
        }
      }
    } else {
      const auto& vq = std::get<VQVAEModel>(model);
      const auto& cb = vq.codebook_var().value();
      const std::int64_t k = cb.shape[0], d = cb.shape[1];
      std::uniform_int_distribution<std::int64_t> pick(0, k - 1);
      Tensor<double> z_q({len * 9, d});
      for (std::int64_t r = 0; r < len * 9; ++r) {
        std::copy_n(cb.ptr() + pick(rng) * d, d, z_q.ptr() + r * d);
      }
      values = vq.decode(VarD::constant(std::move(z_q))).value();
    }
    for (std::int64_t i = 0; i < len * 9; ++i) {
      out[start * 9 + i] = static_cast<float>(values[i] * norm.scale + norm.shift);
    }
  }
  return out;
}

// ---------------------------------------------------------------- registry

Archive local_model_archive(const LocalModel& m) {
  return std::visit([](const auto& model) { return model.to_archive(); }, m);
}

LocalModel local_model_from_archive(const Archive& a) {
  const std::string kind = a.meta.value("kind", "");
  if (kind == "vae") return VAEModel::from_archive(a);
  if (kind == "vqvae") return VQVAEModel::from_archive(a);
  throw ArtifactError("archive is not a local generator model");
}

std::string local_model_name(const std::string& arch, int layer, LocalKind kind) {
  return "local_" + arch + "_" + std::to_string(layer) + "_" + local_kind_name(kind) + ".gm";
}

std::string registry_manifest_name(const std::string& arch, LocalKind kind) {
  return "local_" + arch + "_" + local_kind_name(kind) + ".json";
}

void save_registry(const LocalInitRegistry& reg, const std::filesystem::path& dir) {
  nlohmann::json manifest;
  manifest["arch"] = reg.arch;
  manifest["kind"] = local_kind_name(reg.kind);
  manifest["layers"] = nlohmann::json::object();
  for (const auto& [layer, model] : reg.models) {
    const auto name = local_model_name(reg.arch, layer, reg.kind);
    local_model_archive(model).save(dir / name);
    manifest["layers"][std::to_string(layer)] = name;
  }
  write_file(dir / registry_manifest_name(reg.arch, reg.kind), manifest.dump(2) + "\n");
}

LocalInitRegistry load_registry(const std::filesystem::path& manifest_path) {
  if (!std::filesystem::exists(manifest_path)) {
    throw ArtifactError("missing registry manifest " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("unreadable registry manifest: " + std::string(e.what()));
  }
  LocalInitRegistry reg;
  reg.arch = manifest.at("arch").get<std::string>();
  reg.kind = local_kind_from_name(manifest.at("kind").get<std::string>());
  const auto dir = manifest_path.parent_path();
  for (const auto& [layer, file] : manifest.at("layers").items()) {
    const auto path = dir / file.get<std::string>();
    if (!std::filesystem::exists(path)) throw ArtifactError("missing local model " + path.string());
    reg.models.emplace(std::stoi(layer), local_model_from_archive(Archive::load(path)));
  }
  return reg;
}

WeightSet initialize_network_local(const CompGraph& g, const LocalInitRegistry& reg,
                                   std::uint64_t seed) {
  const auto layers = slice_layers(g);
  for (int id : layers) {
    if (!reg.models.contains(id)) {
      throw ArtifactError("local registry for '" + reg.arch + "' has no model for layer " +
                          std::to_string(id));
    }
  }
  WeightSet ws = baseline_init(g, InitScheme::he, seed);
  for (int id : layers) {
    auto& kernel = ws.at(id, ParamKind::conv_kernel);
    const std::int64_t count = kernel.shape[0] * kernel.shape[1];
    kernel.data = sample_slices(reg.models.at(id), count, derive_seed(seed, static_cast<std::uint64_t>(id))).data;
  }
  return ws;
}

}  // namespace initforge
