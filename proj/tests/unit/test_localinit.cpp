// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "initforge/errors.hpp"
#include "initforge/localinit.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace initforge {
namespace {

SliceSet gaussian_slices(std::int64_t n, double sigma, std::uint64_t seed, int layer = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  SliceSet s;
  s.layer_id = layer;
  s.slices = Tensor<float>({n, 3, 3});
  for (auto& v : s.slices.data) v = static_cast<float>(normal(rng));
  s.source_run_ids.assign(static_cast<std::size_t>(n), 0);
  return s;
}

TEST(Kl, ClosedFormHandCases) {
  EXPECT_EQ(kl_diag_gaussian({{0, 0}, {0, 0}}, {{0, 0}, {0, 0}}), 0.0);
  EXPECT_NEAR(kl_diag_gaussian({{1}, {0}}, {{0}, {0}}), 0.5, 1e-15);
  EXPECT_NEAR(kl_diag_gaussian({{0}, {1}}, {{0}, {0}}), 0.5 * (std::numbers::e - 2.0), 1e-15);
}

TEST(Kl, AgreesWithStratifiedMonteCarlo) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> mq(3), lq(3), mp(3), lp(3);
    for (int i = 0; i < 3; ++i) {
      mq[i] = n01(rng);
      lq[i] = 0.5 * n01(rng);
      mp[i] = n01(rng);
      lp[i] = 0.5 * n01(rng);
    }
    const double exact = kl_diag_gaussian({mq, lq}, {mp, lp});
    const double mc = initforge::testing::monte_carlo_kl(mq, lq, mp, lp, 20000, rng);
    EXPECT_NEAR(mc, exact, 0.02 * exact + 1e-3);
  }
}

// Zero encoder heads give q = N(0, I), so the KL term vanishes.
VAEModel prior_encoder_vae() {
  VaeConfig cfg;
  cfg.latent_dim = 2;
  cfg.hidden_dim = 4;
  cfg.learned_variance = false;
  VAEModel m(cfg, 3);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& name = m.param_names()[i];
    if (name.rfind("enc.mean", 0) == 0 || name.rfind("enc.logvar", 0) == 0) {
      m.params()[i] = VarD::param(Tensor<double>(m.params()[i].shape()));
    }
  }
  return m;
}

TEST(Elbo, PerfectReconstructionWithPriorPosterior) {
  const auto m = prior_encoder_vae();
  const std::vector<double> z = {0.3, -0.7};
  const auto mean = m.decode(VarD::constant(Tensor<double>({1, 2}, z))).mean.value();
  const std::vector<double> x(mean.data.begin(), mean.data.end());
  EXPECT_NEAR(elbo(x, m, z), -4.5 * std::log(2 * std::numbers::pi), 1e-12);
  // Any other slice scores lower: the log-density peaks at the mean.
  auto shifted = x;
  shifted[4] += 0.1;
  EXPECT_LT(elbo(shifted, m, z), elbo(x, m, z));
}

TEST(Elbo, ParameterGradientsMatchFiniteDifferences) {
  for (bool learned : {false, true}) {
    VaeConfig cfg;
    cfg.latent_dim = 2;
    cfg.hidden_dim = 4;
    cfg.learned_variance = learned;
    const VAEModel base(cfg, 7);
    std::mt19937_64 rng(1);
    const auto x = initforge::testing::random_tensor({5, 9}, rng);
    const auto eps = initforge::testing::random_tensor({5, 2}, rng);
    std::vector<Tensor<double>> values;
    for (const auto& p : base.params()) values.push_back(p.value());
    auto f = [&](const std::vector<VarD>& vars) {
      VAEModel m = base;
      for (std::size_t i = 0; i < vars.size(); ++i) m.params()[i] = vars[i];
      return negative_elbo(m, VarD::constant(x), eps);
    };
    EXPECT_LT(initforge::testing::max_grad_error(f, values, 1e-5, 1e-6), 1e-4) << "learned " << learned;
  }
}

TEST(Vq, QuantiseHandCasesAndTies) {
  Codebook cb{Tensor<double>({2, 1}, {0.0, 1.0}), {}};
  EXPECT_EQ(vq_quantize(Tensor<double>({1, 1}, {0.4}), cb).indices, (std::vector<int>{0}));
  EXPECT_EQ(vq_quantize(Tensor<double>({1, 1}, {0.5}), cb).indices, (std::vector<int>{0}));
  EXPECT_EQ(vq_quantize(Tensor<double>({1, 1}, {0.6}), cb).indices, (std::vector<int>{1}));
  Codebook zero{Tensor<double>({4, 2}), {}};
  const auto q = vq_quantize(Tensor<double>({3, 2}, {1, 2, -1, 0, 5, 5}), zero);
  EXPECT_EQ(q.indices, (std::vector<int>{0, 0, 0}));
  std::mt19937_64 rng(2);
  Codebook big{initforge::testing::random_tensor({16, 3}, rng), {}};
  Tensor<double> z({1, 3});
  for (int k = 0; k < 3; ++k) z.data[static_cast<std::size_t>(k)] = big.entries.data[static_cast<std::size_t>(7 * 3 + k)];
  const auto exact = vq_quantize(z, big);
  EXPECT_EQ(exact.indices[0], 7);
  EXPECT_EQ(exact.z_q.data, z.data);
}

TEST(Vq, MatchesBruteForceScan) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng() % 40), d = 1 + static_cast<std::int64_t>(rng() % 6);
    Codebook cb{initforge::testing::random_tensor({k, d}, rng), {}};
    const auto z = initforge::testing::random_tensor({9, d}, rng);
    const auto q = vq_quantize(z, cb);
    for (int r = 0; r < 9; ++r) {
      ASSERT_EQ(q.indices[static_cast<std::size_t>(r)], initforge::testing::brute_force_nearest(z.ptr() + r * d, cb.entries));
    }
  }
}

TEST(Vq, LossHandCases) {
  Tensor<double> ze({9, 4}, 1.0), zq({9, 4}, 0.0);
  const auto [codebook, commit] = vq_losses(ze, zq, 0.25);
  EXPECT_DOUBLE_EQ(codebook, 36.0);
  EXPECT_DOUBLE_EQ(commit, 9.0);
  EXPECT_EQ(vq_losses(ze, ze, 0.25), std::make_pair(0.0, 0.0));
  EXPECT_EQ(vq_losses(ze, zq, 0.0).second, 0.0);
}

TEST(Vq, StraightThroughGradientsReachTheEncoder) {
  const auto ze = VarD::param(Tensor<double>({2, 2}, {0.1, 0.2, 0.3, 0.4}));
  Codebook cb{Tensor<double>({2, 2}, {0, 0, 1, 1}), {}};
  const auto zq = VarD::constant(vq_quantize(ze.value(), cb).z_q);
  const auto [l_cb, l_commit] = vq_losses(ze, zq, 0.25);
  ag::backward(ag::add(l_cb, l_commit));
  // Only the commitment term reaches z_e: d/dz_e 0.25 * |z_e - z_q|^2.
  const auto& g = ze.grad();
  EXPECT_NEAR(g.data[0], 0.5 * 0.1, 1e-12);
  EXPECT_NEAR(g.data[3], 0.5 * (0.4 - 0.0), 1e-12);
}

TEST(BaselineInit, HeVarianceXavierBoundAndBatchNorm) {
  const auto g = build_resnet_graph(20, 1, 10);
  const auto he = baseline_init(g, InitScheme::he, 1);
  const auto xv = baseline_init(g, InitScheme::xavier, 1);
  bool saw_64 = false;
  for (std::size_t i = 0; i < he.specs.size(); ++i) {
    const auto& spec = he.specs[i];
    if (spec.kind == ParamKind::conv_kernel && spec.shape == Shape{64, 64, 3, 3}) {
      saw_64 = true;
      double ss = 0.0;
      for (float v : he.tensors[i].data) ss += static_cast<double>(v) * v;
      const double var = ss / static_cast<double>(he.tensors[i].numel());
      EXPECT_NEAR(var, 2.0 / 576.0, 0.1 * 2.0 / 576.0);
    }
    if (spec.kind == ParamKind::conv_kernel || spec.kind == ParamKind::linear_weight) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(spec) + fan_out(spec)));
      for (float v : xv.tensors[i].data) ASSERT_LE(std::abs(v), bound);
    }
    if (spec.kind == ParamKind::bn_scale) {
      for (float v : he.tensors[i].data) ASSERT_EQ(v, 1.0f);
    }
    if (spec.kind == ParamKind::bn_shift || spec.kind == ParamKind::bias) {
      for (float v : he.tensors[i].data) ASSERT_EQ(v, 0.0f);
    }
  }
  EXPECT_TRUE(saw_64);
  EXPECT_EQ(baseline_init(g, InitScheme::he, 1), he);
  EXPECT_NE(baseline_init(g, InitScheme::he, 2), he);
}

LocalTrainConfig small_local() {
  LocalTrainConfig c;
  c.epochs = 5;
  c.batch_size = 64;
  c.vae.hidden_dim = 8;
  c.vqvae.hidden_dim = 8;
  return c;
}

TEST(TrainLocal, VaeSamplesMatchDataMoments) {
  const double sigma = 0.1;
  const auto data = gaussian_slices(1000, sigma, 4);
  const auto cfg = small_local();
  const auto r = train_local_model(data, LocalKind::vae, cfg);
  const auto r2 = train_local_model(data, LocalKind::vae, cfg);
  EXPECT_EQ(local_model_archive(r.model).to_bytes(), local_model_archive(r2.model).to_bytes());
  const auto s = sample_slices(r.model, 10000, 9);
  EXPECT_EQ(s.shape, (Shape{10000, 3, 3}));
  EXPECT_EQ(sample_slices(r.model, 10000, 9), s);
  EXPECT_THROW(sample_slices(r.model, 0, 9), std::invalid_argument);
  // Mean within 3 standard errors of 0; per-element variance within 20%.
  for (int k = 0; k < 9; ++k) {
    double sum = 0.0, ss = 0.0;
    for (std::int64_t i = 0; i < 10000; ++i) {
      const double v = s.data[static_cast<std::size_t>(i * 9 + k)];
      sum += v;
      ss += v * v;
    }
    const double mean = sum / 10000.0, var = ss / 10000.0 - mean * mean;
    EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(var / 10000.0) + 3.0 * sigma / std::sqrt(1000.0)) << k;
    EXPECT_NEAR(var, sigma * sigma, 0.2 * sigma * sigma) << k;
  }
}

TEST(TrainLocal, VqvaeIndicesInRangeAndDeterministic) {
  const auto data = gaussian_slices(500, 0.2, 5);
  auto cfg = small_local();
  cfg.epochs = 2;
  const auto r = train_local_model(data, LocalKind::vqvae, cfg);
  const auto& m = std::get<VQVAEModel>(r.model);
  const auto cb = m.codebook();
  EXPECT_EQ(cb.entries.shape, (Shape{128, 4}));
  Tensor<double> x({500, 9});
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = (data.slices.data[i] - m.norm.shift) / m.norm.scale;
  {
    ag::NoGradGuard no_grad;
    const auto q = vq_quantize(m.encode(VarD::constant(x)).value(), cb);
    for (int idx : q.indices) {
      ASSERT_GE(idx, 0);
      ASSERT_LT(idx, 128);
    }
  }
  EXPECT_EQ(local_model_archive(train_local_model(data, LocalKind::vqvae, cfg).model).to_bytes(),
            local_model_archive(r.model).to_bytes());
  EXPECT_THROW(train_local_model(gaussian_slices(10, 0.1, 1), LocalKind::vqvae, cfg), std::invalid_argument);
}

TEST(InitializeLocal, ShapesDeterminismAndConstantData) {
  const auto g = build_resnet_graph(8, 1, 2);
  LocalInitRegistry reg;
  reg.arch = g.name;
  reg.kind = LocalKind::vae;
  auto cfg = small_local();
  cfg.epochs = 3;
  for (int layer : slice_layers(g)) {
    auto s = gaussian_slices(200, 1e-4, static_cast<std::uint64_t>(layer), layer);
    for (auto& v : s.slices.data) v += 0.05f;  // near-constant slices at c = 0.05
    reg.models.emplace(layer, train_local_model(s, LocalKind::vae, cfg).model);
  }
  const auto ws = initialize_network_local(g, reg, 3);
  EXPECT_NO_THROW(ws.check(g));
  EXPECT_EQ(initialize_network_local(g, reg, 3), ws);
  EXPECT_NE(initialize_network_local(g, reg, 4), ws);
  for (int layer : slice_layers(g)) {
    double worst = 0.0;
    for (float v : ws.at(layer, ParamKind::conv_kernel).data) worst = std::max(worst, std::abs(v - 0.05));
    EXPECT_LT(worst, 0.01) << layer;
  }

  const auto dir = fs::temp_directory_path() / "initforge_local_registry";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_registry(reg, dir);
  const auto loaded = load_registry(dir / registry_manifest_name(g.name, LocalKind::vae));
  EXPECT_EQ(initialize_network_local(g, loaded, 3), ws);
  EXPECT_THROW(load_registry(dir / "absent.json"), ArtifactError);

  LocalInitRegistry partial = reg;
  partial.models.erase(partial.models.begin());
  EXPECT_THROW(initialize_network_local(g, partial, 3), ArtifactError);
}

}  // namespace
}  // namespace initforge
