// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "cli_fixture.hpp"
#include "initforge/cli.hpp"
#include "initforge/errors.hpp"

namespace fs = std::filesystem;
using initforge::testing::invoke;
using nlohmann::json;

namespace initforge {
namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("initforge_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Config, DefaultsResolveForBothProfiles) {
  const auto desk = resolve_config(json::object(), std::nullopt, std::nullopt);
  EXPECT_EQ(desk.profile, "desk");
  EXPECT_EQ(desk.population, 8);
  EXPECT_EQ(desk.arch(), "resnet8");
  EXPECT_EQ(desk.dataset.num_samples, 8000);
  const auto paper = resolve_config(json::object(), "paper", 7);
  EXPECT_EQ(paper.population, 100);
  EXPECT_EQ(paper.arch(), "resnet20");
  EXPECT_EQ(paper.ghn.train_depths, (std::vector<int>{32, 44, 56}));
  EXPECT_EQ(paper.seed, 7u);
  EXPECT_EQ(paper.resolved.at("seed"), 7);
  // The config's own profile applies unless the command line overrides it.
  EXPECT_EQ(resolve_config({{"profile", "paper"}}, std::nullopt, std::nullopt).population, 100);
  EXPECT_EQ(resolve_config({{"profile", "paper"}}, "desk", std::nullopt).population, 8);
}

TEST(Config, UserValuesOverrideDefaultsDeeply) {
  const auto c = resolve_config(json::parse(R"({"harvest": {"train": {"epochs": 2}}})"), std::nullopt,
                                std::nullopt);
  EXPECT_EQ(c.harvest_train.epochs, 2);
  EXPECT_EQ(c.harvest_train.batch_size, 128);  // untouched sibling keeps its default
  EXPECT_EQ(c.harvest_train.schedule, step_decay_schedule(2));
  EXPECT_EQ(c.transfer_train.schedule, finetune_schedule());
}

void expect_config_error(const std::string& config, const std::string& path) {
  try {
    resolve_config(json::parse(config), std::nullopt, std::nullopt);
    ADD_FAILURE() << "accepted " << config;
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), path) << e.what();
  }
}

TEST(Config, SchemaErrorsNameTheField) {
  expect_config_error(R"({"harvest": {"population": 0}})", "harvest.population");
  expect_config_error(R"({"harvest": {"popluation": 3}})", "harvest.popluation");
  expect_config_error(R"({"harvest": {"train": {"lr": "fast"}}})", "harvest.train.lr");
  expect_config_error(R"({"harvest": {"train": {"lr": -1.0}}})", "harvest.train.lr");
  expect_config_error(R"({"evaluate": {"train": {"schedule": [[2, 0.5], [1, 0.5]]}}})",
                      "evaluate.train.schedule[1].epoch");
  expect_config_error(R"({"evaluate": {"methods": ["he", "kaiming"]}})", "evaluate.methods[1]");
  expect_config_error(R"({"evaluate": {"thresholds": [0.8, 0.5]}})", "evaluate.thresholds");
  expect_config_error(R"({"evaluate": {"ensemble": {"corruption": "snow"}}})", "evaluate.ensemble.corruption");
  expect_config_error(R"({"ghn": {"batch_size": 0}})", "ghn.batch_size");
  expect_config_error(R"({"arch": {"depth": 9}})", "arch.depth");
  expect_config_error(R"({"dataset": {"source": "web"}})", "dataset.source");
  expect_config_error(R"({"profile": "huge"})", "profile");
  expect_config_error(R"({"workers": 1.5})", "workers");
}

TEST(Config, FolderDatasetRequiresPath) {
  const auto c = resolve_config(json::object(), "paper", std::nullopt);
  try {
    load_dataset(c.dataset, "dataset");
    ADD_FAILURE();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "dataset.path");
  }
}

TEST(SmallSplits, BalancedTrainAndDisjointSplits) {
  TextureConfig tc;
  tc.num_samples = 900;
  tc.image_size = 8;
  tc.num_classes = 3;
  const auto all = make_texture_dataset(tc);
  const auto s = small_splits(all, 100, 50, 4);
  EXPECT_EQ(s.train.size(), 100);
  EXPECT_EQ(s.val.size(), 50);
  EXPECT_EQ(s.test.size(), 750);
  EXPECT_TRUE(is_class_balanced(s.train));
  EXPECT_THROW(small_splits(all, 1000, 10, 4), std::invalid_argument);
}

TEST(Cli, UsageAndConfigErrorsExitTwo) {
  const auto dir = scratch("usage");
  EXPECT_EQ(invoke({"train-gen", "--kind", "gan", "--out", dir.string()}).code, 2);
  EXPECT_EQ(invoke({"evaluate", "--experiment", "speed", "--out", dir.string()}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"harvest", "--profile", "cluster"}).code, 2);
  const auto cfg = initforge::testing::write_config(dir, {{"harvest", {{"population", 0}}}});
  const auto r = invoke({"harvest", "--config", cfg.string(), "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("harvest.population"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"harvest", "--config", (dir / "absent.json").string()}).code, 2);
  EXPECT_EQ(invoke({"harvest", "--help"}).code, 0);
}

TEST(Cli, MissingArtifactsExitThreeAndNameTheFile) {
  const auto dir = scratch("missing");
  const auto cfg = initforge::testing::write_config(dir / "cfg", initforge::testing::tiny_config());
  const std::vector<std::string> common = {"--config", cfg.string(), "--out", (dir / "out").string()};
  auto with = [&](std::vector<std::string> v) {
    v.insert(v.end(), common.begin(), common.end());
    return v;
  };
  auto r = invoke(with({"init", "--method", "vae"}));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("local_resnet8_vae.json"), std::string::npos) << r.err;
  r = invoke(with({"train-gen", "--kind", "vqvae"}));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("weights_resnet8.wds"), std::string::npos) << r.err;
  r = invoke(with({"evaluate", "--experiment", "accuracy"}));
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(invoke(with({"report"})).code, 3);
}

TEST(Cli, NonFiniteTrainingExitsFour) {
  const auto dir = scratch("numeric");
  auto j = initforge::testing::tiny_config();
  j["harvest"]["train"]["lr"] = 1e30;
  const auto cfg = initforge::testing::write_config(dir / "cfg", j);
  const auto r = invoke({"harvest", "--config", cfg.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, 4) << r.err;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("pipeline"));
    const auto cfg = initforge::testing::write_config(*root_ / "cfg", initforge::testing::tiny_config());
    config_ = new std::string(cfg.string());
    for (const auto& cmd : initforge::testing::pipeline_commands(*config_, (*root_ / "a").string())) {
      const auto r = invoke(cmd);
      ASSERT_EQ(r.code, 0) << cmd[0] << ": " << r.err;
    }
  }
  static void TearDownTestSuite() {
    delete root_;
    delete config_;
  }
  static fs::path out() { return *root_ / "a"; }
  static json manifest(const std::string& name) { return json::parse(read_file(out() / name)); }

  static fs::path* root_;
  static std::string* config_;
};
fs::path* Pipeline::root_ = nullptr;
std::string* Pipeline::config_ = nullptr;

TEST_F(Pipeline, HarvestWritesCheckpointsAndWeightDataset) {
  EXPECT_TRUE(fs::exists(out() / "base_resnet8_0.ckpt"));
  EXPECT_TRUE(fs::exists(out() / "base_resnet8_1.ckpt"));
  const auto wds = WeightDataset::from_archive(Archive::load(out() / "weights_resnet8.wds"));
  EXPECT_EQ(wds.num_sources, 2);
  EXPECT_EQ(wds.per_layer.size(), slice_layers(build_resnet_graph(8, 1, 2)).size());
}

TEST_F(Pipeline, HarvestRerunResumesWithoutRetraining) {
  const auto before = fs::last_write_time(out() / "base_resnet8_0.ckpt");
  const auto r = invoke({"harvest", "--config", *config_, "--out", out().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(manifest("manifest_harvest.json").at("extra").at("resumed"), 2);
  EXPECT_EQ(fs::last_write_time(out() / "base_resnet8_0.ckpt"), before);
}

TEST_F(Pipeline, LocalGeneratorsHaveOneModelPerLayer) {
  const auto layers = slice_layers(build_resnet_graph(8, 1, 2)).size();
  for (auto kind : {LocalKind::vae, LocalKind::vqvae}) {
    const auto reg = load_registry(out() / registry_manifest_name("resnet8", kind));
    EXPECT_EQ(reg.models.size(), layers);
    for (const auto& [layer, m] : reg.models) {
      EXPECT_TRUE(fs::exists(out() / local_model_name("resnet8", layer, kind)));
    }
  }
}

TEST_F(Pipeline, NoiseGhnLogHasSimilarityColumn) {
  const auto log = read_file(out() / "ghn_noise_ghn_texture2.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "step,loss,xent1,xent2,simloss");
  EXPECT_TRUE(fs::exists(out() / "ghn_ghn_texture2.gm"));
}

TEST_F(Pipeline, InitRecordsNoiseAndIsSeeded) {
  const auto m = manifest("manifest_init_noise_ghn_resnet8_s3.json");
  ASSERT_TRUE(m.at("extra").contains("noise"));
  EXPECT_EQ(m.at("extra").at("noise").size(), 8u);
  auto run = [&](const std::string& method, const std::string& seed) {
    const auto r = invoke({"init", "--method", method, "--seed", seed, "--config", *config_, "--out",
                            out().string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return read_file(out() / ("init_" + method + "_resnet8_s" + seed + ".ws"));
  };
  const auto g1 = run("ghn", "5");
  const auto g1_again = run("ghn", "5");
  EXPECT_EQ(g1, g1_again);
  EXPECT_NE(run("noise_ghn", "5"), run("noise_ghn", "6"));
  // Another architecture from the same generator.
  const auto r = invoke({"init", "--method", "ghn", "--arch", "resnet14", "--config", *config_, "--out",
                          out().string()});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto ws = WeightSet::from_archive(Archive::load(out() / "init_ghn_resnet14_s0.ws"));
  EXPECT_NO_THROW(ws.check(build_resnet_graph(14, 1, 2)));
}

TEST_F(Pipeline, EvaluateWritesEvalJsonAndTrajectories) {
  const auto conv = json::parse(read_file(out() / "eval_convergence.json"));
  EXPECT_EQ(conv.at("results").at("methods").size(), 4u);
  EXPECT_EQ(conv.at("results").at("thresholds"), json({0.5}));
  EXPECT_TRUE(fs::exists(out() / "traj_he_resnet8_s0.csv"));
  EXPECT_EQ(read_file(out() / "traj_he_resnet8_s0.csv").substr(0, 18), "eval_index,val_acc");
  const auto ens = json::parse(read_file(out() / "eval_ensemble_ood.json"));
  for (const auto& row : ens.at("results").at("methods")) EXPECT_EQ(row.at("median_ece").size(), 6u);
  const auto tr = json::parse(read_file(out() / "eval_transfer.json"));
  EXPECT_EQ(tr.at("results").at("methods").size(), 2u);
  const auto report = read_file(out() / "report.md");
  for (const char* section : {"## convergence", "## accuracy", "## ensemble_ood", "## similarity", "## transfer"}) {
    EXPECT_NE(report.find(section), std::string::npos) << section;
  }
}

TEST_F(Pipeline, ManifestsListOutputsAndHashTheirConfig) {
  int seen = 0;
  for (const auto& e : fs::directory_iterator(out())) {
    const auto name = e.path().filename().string();
    if (name.rfind("manifest_", 0) != 0) continue;
    ++seen;
    const auto m = json::parse(read_file(e.path()));
    EXPECT_EQ(m.at("config_hash"), sha256_hex(m.at("config").dump())) << name;
    EXPECT_FALSE(m.at("outputs").empty()) << name;
    for (const auto& o : m.at("outputs")) EXPECT_TRUE(fs::exists(out() / o.get<std::string>())) << o;
    EXPECT_EQ(m.at("code_version"), kCodeVersion);
    EXPECT_TRUE(m.contains("wall_clock_seconds"));
  }
  EXPECT_GE(seen, 14);
}

TEST_F(Pipeline, RerunIntoFreshDirectoryIsByteIdentical) {
  const auto b = *root_ / "b";
  for (const auto& cmd : initforge::testing::pipeline_commands(*config_, b.string())) {
    const auto r = invoke(cmd);
    ASSERT_EQ(r.code, 0) << cmd[0] << ": " << r.err;
  }
  const auto fresh = initforge::testing::numeric_artifacts(b);
  auto first = initforge::testing::numeric_artifacts(out());
  // Earlier tests in this suite add init files the second run lacks.
  std::erase_if(first, [&](const auto& kv) { return !fresh.contains(kv.first); });
  ASSERT_EQ(first.size(), fresh.size());
  for (const auto& [name, bytes] : fresh) EXPECT_TRUE(first.at(name) == bytes) << name;
}

TEST_F(Pipeline, ParallelHarvestMatchesSerial) {
  auto j = initforge::testing::tiny_config();
  j["workers"] = 2;
  const auto cfg = initforge::testing::write_config(*root_ / "cfg", j, "parallel.json");
  const auto dir = *root_ / "parallel";
  const auto r = invoke({"harvest", "--config", cfg.string(), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(dir / "weights_resnet8.wds"), read_file(out() / "weights_resnet8.wds"));
}

}  // namespace
}  // namespace initforge
