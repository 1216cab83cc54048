// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "initforge/errors.hpp"
#include "initforge/rng.hpp"

namespace initforge {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- defaults

namespace {

json train_defaults(double lr, int batch, int epochs, int eval_batches) {
  return {{"lr", lr},
          {"momentum", 0.9},
          {"weight_decay", 1e-4},
          {"batch_size", batch},
          {"epochs", epochs},
          {"schedule", nullptr},
          {"eval_every_batches", eval_batches},
          {"eval_every_epochs", 1}};
}

json dataset_defaults(const std::string& source, const std::string& name, int64_t n, int classes,
                      const std::string& domain, std::uint64_t seed) {
  return {{"source", source},   {"path", nullptr},        {"name", name},
          {"num_samples", n},   {"num_classes", classes}, {"image_size", 16},
          {"domain", domain},   {"seed", seed},           {"train_fraction", 0.7},
          {"val_fraction", 0.1}};
}

}  // namespace

json profile_defaults(const std::string& profile) {
  if (profile != "desk" && profile != "paper") throw ConfigError("profile", "must be desk or paper");
  const bool desk = profile == "desk";
  json j;
  j["profile"] = profile;
  j["seed"] = 0;
  j["workers"] = 1;
  j["dataset"] = desk ? dataset_defaults("texture", "texture2", 8000, 2, "source", 1)
                      : dataset_defaults("image_folder", "cifar10", 60000, 10, "source", 1);
  if (!desk) {
    j["dataset"]["train_fraction"] = 0.75;  // 45k / 5k / 10k of 60k images
    j["dataset"]["val_fraction"] = 1.0 / 12.0;
    j["dataset"]["image_size"] = 32;
  }
  j["arch"] = {{"depth", desk ? 8 : 20}, {"width", 1}};
  j["harvest"] = {{"population", desk ? 8 : 100},
                  {"filter_fraction", 0.05},
                  {"train", train_defaults(0.1, 128, desk ? 10 : 120, 0)}};
  j["local"] = {{"epochs", 20},
                {"batch_size", 128},
                {"lr", 0.01},
                {"weight_decay", nullptr},
                {"vae", {{"latent_dim", 5}, {"hidden_dim", 32}, {"learned_variance", true}}},
                {"vqvae", {{"hidden_dim", 16}, {"codebook_size", 128}, {"code_dim", 4}, {"beta", 0.25}}}};
  j["ghn"] = {{"epochs", desk ? 3 : 30},
              {"batch_size", 64},
              {"lr", 1e-3},
              {"weight_decay", 0.0},
              {"train_depths", desk ? json{8, 14, 20} : json{32, 44, 56}},
              {"width", 1},
              {"milestones", nullptr},
              {"similarity_weight", 1.0},
              {"hidden_dim", 32},
              {"decoder_hidden", 64},
              {"max_channels", 64},
              {"rounds", 1}};
  j["evaluate"] = {
      {"methods", {"xavier", "he", "vae", "vqvae", "ghn", "noise_ghn"}},
      {"num_seeds", desk ? 5 : 25},
      {"thresholds", desk ? json{0.5} : json{0.65, 0.75}},
      {"train", train_defaults(0.1, 128, desk ? 4 : 120, desk ? 1 : 0)},
      {"ensemble",
       {{"size", 5}, {"count", desk ? 10 : 20}, {"pool", desk ? 10 : 25},
        {"corruption", "gauss_noise"}, {"combine", "probabilities"}}}};
  json transfer_data = desk ? dataset_defaults("texture", "texture2_shifted", 3400, 2, "shifted", 2)
                            : dataset_defaults("image_folder", "pcam_small", 11400, 2, "source", 2);
  if (!desk) transfer_data["image_size"] = 32;
  j["transfer"] = {{"dataset", transfer_data},
                   {"train_samples", 1000},
                   {"val_samples", 400},
                   {"methods", {"he", "ghn", "noise_ghn"}},
                   {"num_seeds", desk ? 5 : 25},
                   {"train", train_defaults(0.1, 128, 40, 0)}};
  return j;
}

// ------------------------------------------------------------ validation

namespace {

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

std::string type_name(const json& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

// User keys must exist in the schema and agree with its types. A null
// schema value means "optional, parsed later".
void check_schema(const json& schema, const json& user, const std::string& path) {
  if (schema.is_null()) return;
  if (schema.is_object()) {
    if (!user.is_object()) throw ConfigError(path, "expected an object, got " + type_name(user));
    for (const auto& [key, value] : user.items()) {
      const auto sub = join_path(path, key);
      if (!schema.contains(key)) throw ConfigError(sub, "unknown key");
      check_schema(schema.at(key), value, sub);
    }
    return;
  }
  bool ok = false;
  if (schema.is_boolean()) ok = user.is_boolean();
  else if (schema.is_number_integer()) ok = user.is_number_integer();
  else if (schema.is_number()) ok = user.is_number();
  else if (schema.is_string()) ok = user.is_string();
  else if (schema.is_array()) ok = user.is_array();
  if (!ok) throw ConfigError(path, "expected " + type_name(schema) + ", got " + type_name(user));
}

void merge_into(json& base, const json& user) {
  for (const auto& [key, value] : user.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

// Reads j at a dotted path; nlohmann type errors become ConfigErrors.
template <typename T>
T read(const json& root, const std::string& path) {
  const json* node = &root;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) node = &node->at(part);
  try {
    return node->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path, "has the wrong type");
  }
}

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

// Re-throws a ConfigError raised on a sub-config with the full field path.
[[noreturn]] void rethrow_under(const ConfigError& e, const std::string& prefix) {
  std::string what = e.what();
  if (!e.path().empty()) what = what.substr(e.path().size() + 2);
  throw ConfigError(join_path(prefix, e.path()), what);
}

TrainConfig read_train(const json& root, const std::string& path, const std::string& dataset,
                       bool finetune) {
  json j = read<json>(root, path);
  const bool default_schedule = j["schedule"].is_null();
  if (default_schedule) j.erase("schedule");
  TrainConfig c;
  try {
    c = TrainConfig::from_json(j);
  } catch (const ConfigError& e) {
    rethrow_under(e, path);
  }
  if (default_schedule) c.schedule = finetune ? finetune_schedule() : step_decay_schedule(c.epochs);
  c.dataset = dataset;
  return c;
}

DatasetSpec read_dataset(const json& root, const std::string& path) {
  DatasetSpec d;
  d.source = read<std::string>(root, path + ".source");
  require(d.source == "texture" || d.source == "tensor_file" || d.source == "image_folder",
          path + ".source", "must be texture, tensor_file or image_folder");
  const json p = read<json>(root, path + ".path");
  if (!p.is_null()) {
    require(p.is_string(), path + ".path", "expected string or null");
    d.path = p.get<std::string>();
  }
  d.name = read<std::string>(root, path + ".name");
  require(!d.name.empty(), path + ".name", "must not be empty");
  d.num_samples = read<std::int64_t>(root, path + ".num_samples");
  require(d.num_samples >= 1, path + ".num_samples", "must be positive");
  d.num_classes = read<int>(root, path + ".num_classes");
  require(d.num_classes >= 2, path + ".num_classes", "must be at least 2");
  d.image_size = read<int>(root, path + ".image_size");
  require(d.image_size >= 4, path + ".image_size", "must be at least 4");
  const auto domain = read<std::string>(root, path + ".domain");
  require(domain == "source" || domain == "shifted", path + ".domain", "must be source or shifted");
  d.domain = domain == "source" ? TextureDomain::source : TextureDomain::shifted;
  d.seed = read<std::uint64_t>(root, path + ".seed");
  d.train_fraction = read<double>(root, path + ".train_fraction");
  d.val_fraction = read<double>(root, path + ".val_fraction");
  require(d.train_fraction > 0 && d.train_fraction < 1, path + ".train_fraction", "must be in (0, 1)");
  require(d.val_fraction > 0 && d.train_fraction + d.val_fraction < 1, path + ".val_fraction",
          "must be positive and leave a test share");
  return d;
}

std::vector<InitMethod> read_methods(const json& root, const std::string& path) {
  const auto names = read<std::vector<std::string>>(root, path);
  require(!names.empty(), path, "must list at least one method");
  std::vector<InitMethod> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto field = path + "[" + std::to_string(i) + "]";
    const auto m = method_from_name(names[i], field);
    require(std::find(out.begin(), out.end(), m) == out.end(), field, "duplicate method");
    out.push_back(m);
  }
  return out;
}

int read_positive(const json& root, const std::string& path) {
  const int v = read<int>(root, path);
  require(v >= 1, path, "must be positive");
  return v;
}

}  // namespace

std::vector<std::uint64_t> PipelineConfig::seeds(int n) const {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(n));
  std::iota(out.begin(), out.end(), seed);
  return out;
}

PipelineConfig resolve_config(const json& user, const std::optional<std::string>& profile_override,
                              const std::optional<std::uint64_t>& seed_override) {
  if (!user.is_object()) throw ConfigError("", "config must be a JSON object");
  std::string profile = "desk";
  if (user.contains("profile")) {
    if (!user["profile"].is_string()) throw ConfigError("profile", "expected string");
    profile = user["profile"].get<std::string>();
  }
  if (profile_override) profile = *profile_override;
  json merged = profile_defaults(profile);
  check_schema(merged, user, "");
  merge_into(merged, user);
  merged["profile"] = profile;
  if (seed_override) merged["seed"] = *seed_override;

  PipelineConfig c;
  c.profile = profile;
  c.seed = read<std::uint64_t>(merged, "seed");
  c.workers = read_positive(merged, "workers");
  c.dataset = read_dataset(merged, "dataset");
  c.depth = read<int>(merged, "arch.depth");
  require(c.depth >= 8 && (c.depth - 2) % 6 == 0, "arch.depth", "must be 6n+2 with n >= 1");
  c.width = read_positive(merged, "arch.width");

  c.population = read<int>(merged, "harvest.population");
  require(c.population >= 1, "harvest.population", "must be at least 1");
  c.filter_fraction = read<double>(merged, "harvest.filter_fraction");
  require(c.filter_fraction >= 0 && c.filter_fraction < 1, "harvest.filter_fraction", "must be in [0, 1)");
  c.harvest_train = read_train(merged, "harvest.train", c.dataset.name, false);

  c.local.epochs = read_positive(merged, "local.epochs");
  c.local.batch_size = read_positive(merged, "local.batch_size");
  c.local.lr = read<double>(merged, "local.lr");
  require(c.local.lr > 0, "local.lr", "must be positive");
  if (const auto wd = read<json>(merged, "local.weight_decay"); !wd.is_null()) {
    require(wd.is_number() && wd.get<double>() >= 0, "local.weight_decay", "must be a non-negative number or null");
    c.local.weight_decay = wd.get<double>();
  }
  c.local.vae.latent_dim = read_positive(merged, "local.vae.latent_dim");
  c.local.vae.hidden_dim = read_positive(merged, "local.vae.hidden_dim");
  c.local.vae.learned_variance = read<bool>(merged, "local.vae.learned_variance");
  c.local.vqvae.hidden_dim = read_positive(merged, "local.vqvae.hidden_dim");
  c.local.vqvae.codebook_size = read_positive(merged, "local.vqvae.codebook_size");
  c.local.vqvae.code_dim = read_positive(merged, "local.vqvae.code_dim");
  c.local.vqvae.beta = read<double>(merged, "local.vqvae.beta");
  require(c.local.vqvae.beta >= 0, "local.vqvae.beta", "must be non-negative");

  auto& g = c.ghn;
  g.epochs = read<int>(merged, "ghn.epochs");
  g.batch_size = read<int>(merged, "ghn.batch_size");
  g.lr = read<double>(merged, "ghn.lr");
  g.weight_decay = read<double>(merged, "ghn.weight_decay");
  g.train_depths = read<std::vector<int>>(merged, "ghn.train_depths");
  g.width = read<int>(merged, "ghn.width");
  if (const auto m = read<json>(merged, "ghn.milestones"); m.is_null()) {
    g.milestones = GHNTrainConfig::scaled_milestones(std::max(g.epochs, 0));
  } else {
    g.milestones = read<std::vector<int>>(merged, "ghn.milestones");
  }
  g.similarity_weight = read<double>(merged, "ghn.similarity_weight");
  g.model.hidden_dim = read<int>(merged, "ghn.hidden_dim");
  g.model.decoder_hidden = read<int>(merged, "ghn.decoder_hidden");
  g.model.max_channels = read<int>(merged, "ghn.max_channels");
  g.model.rounds = read<int>(merged, "ghn.rounds");
  g.seed = c.seed;
  g.dataset = c.dataset.name;
  try {
    g.validate();
  } catch (const ConfigError& e) {
    rethrow_under(e, "ghn");
  }
  require(g.similarity_weight >= 0, "ghn.similarity_weight", "must be non-negative");

  c.methods = read_methods(merged, "evaluate.methods");
  c.num_seeds = read_positive(merged, "evaluate.num_seeds");
  c.thresholds = read<std::vector<double>>(merged, "evaluate.thresholds");
  require(!c.thresholds.empty(), "evaluate.thresholds", "must not be empty");
  require(std::is_sorted(c.thresholds.begin(), c.thresholds.end()), "evaluate.thresholds",
          "must be sorted ascending");
  c.eval_train = read_train(merged, "evaluate.train", c.dataset.name, false);
  c.ensemble_size = read_positive(merged, "evaluate.ensemble.size");
  c.num_ensembles = read_positive(merged, "evaluate.ensemble.count");
  c.ensemble_pool = read_positive(merged, "evaluate.ensemble.pool");
  require(c.ensemble_pool >= c.ensemble_size, "evaluate.ensemble.pool", "must be at least evaluate.ensemble.size");
  try {
    c.corruption = corruption_from_name(read<std::string>(merged, "evaluate.ensemble.corruption"));
  } catch (const ConfigError& e) {
    rethrow_under(e, "evaluate.ensemble");
  }
  const auto combine = read<std::string>(merged, "evaluate.ensemble.combine");
  require(combine == "probabilities" || combine == "logits", "evaluate.ensemble.combine",
          "must be probabilities or logits");
  c.combine = combine == "logits" ? EnsembleCombine::logits : EnsembleCombine::probabilities;

  c.transfer_dataset = read_dataset(merged, "transfer.dataset");
  c.transfer_train_samples = read<std::int64_t>(merged, "transfer.train_samples");
  require(c.transfer_train_samples >= 2, "transfer.train_samples", "must be at least 2");
  c.transfer_val_samples = read<std::int64_t>(merged, "transfer.val_samples");
  require(c.transfer_val_samples >= 1, "transfer.val_samples", "must be positive");
  c.transfer_methods = read_methods(merged, "transfer.methods");
  c.transfer_num_seeds = read_positive(merged, "transfer.num_seeds");
  c.transfer_train = read_train(merged, "transfer.train", c.transfer_dataset.name, true);

  c.resolved = std::move(merged);
  return c;
}

// ------------------------------------------------------------------- data

LabeledDataset load_dataset(const DatasetSpec& spec, const std::string& field) {
  LabeledDataset data;
  if (spec.source == "texture") {
    TextureConfig tc;
    tc.num_samples = spec.num_samples;
    tc.num_classes = spec.num_classes;
    tc.image_size = spec.image_size;
    tc.domain = spec.domain;
    tc.seed = spec.seed;
    data = make_texture_dataset(tc);
  } else {
    if (!spec.path) throw ConfigError(field + ".path", "required for source " + spec.source);
    data = spec.source == "tensor_file" ? load_tensor_file(*spec.path) : load_image_folder(*spec.path);
    if (data.num_classes != spec.num_classes) {
      throw ConfigError(field + ".num_classes", "config says " + std::to_string(spec.num_classes) +
                                                    " but the data has " +
                                                    std::to_string(data.num_classes));
    }
  }
  return data;
}

DatasetSplits small_splits(const LabeledDataset& all, std::int64_t n_train, std::int64_t n_val,
                           std::uint64_t seed) {
  const int k = all.num_classes;
  std::vector<std::int64_t> order(static_cast<std::size_t>(all.size()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, 0x5a11);
  std::shuffle(order.begin(), order.end(), rng);
  // Class c gets n_train / k samples, the first n_train % k classes one more.
  std::vector<std::int64_t> quota(static_cast<std::size_t>(k), n_train / k);
  for (std::int64_t c = 0; c < n_train % k; ++c) ++quota[static_cast<std::size_t>(c)];
  std::vector<std::int64_t> train, rest;
  for (auto i : order) {
    auto& q = quota[static_cast<std::size_t>(all.labels[static_cast<std::size_t>(i)])];
    if (q > 0) {
      --q;
      train.push_back(i);
    } else {
      rest.push_back(i);
    }
  }
  if (static_cast<std::int64_t>(train.size()) != n_train) {
    throw std::invalid_argument("not enough samples per class for a balanced training set");
  }
  if (static_cast<std::int64_t>(rest.size()) <= n_val) {
    throw std::invalid_argument("no samples left for the test split");
  }
  const std::vector<std::int64_t> val(rest.begin(), rest.begin() + n_val);
  const std::vector<std::int64_t> test(rest.begin() + n_val, rest.end());
  DatasetSplits s{all.subset(train), all.subset(val), all.subset(test)};
  s.train.split = Split::train;
  s.val.split = Split::val;
  s.test.split = Split::test;
  return s;
}

// -------------------------------------------------------------- manifests

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

json RunManifest::to_json() const {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return {{"command", command},
          {"config_hash", config_hash()},
          {"config", config},
          {"seeds", seeds},
          {"inputs", inputs},
          {"outputs", outputs},
          {"extra", extra},
          {"code_version", kCodeVersion},
          {"wall_clock_seconds", wall_clock_seconds},
          {"finished_at", stamp.str()}};
}

// --------------------------------------------------------------- commands

namespace {

struct Context {
  PipelineConfig cfg;
  fs::path out;
  std::string config_path;  // empty when defaults only
  std::ostream& log;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

RunManifest begin_manifest(const Context& ctx, const std::string& command) {
  RunManifest m;
  m.command = command;
  m.config = ctx.cfg.resolved;
  if (!ctx.config_path.empty()) m.inputs.push_back(ctx.config_path);
  return m;
}

void finish_manifest(const Context& ctx, RunManifest& m, const std::string& file, const Stopwatch& w) {
  for (const auto& o : m.outputs) {
    if (!fs::exists(ctx.out / o)) throw std::logic_error("manifest lists missing output " + o);
  }
  m.wall_clock_seconds = w.seconds();
  write_file(ctx.out / file, m.to_json().dump(2) + "\n");
  ctx.log << "wrote " << (ctx.out / file).string() << "\n";
}

void require_file(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw ArtifactError("missing " + p.string() + " (" + hint + ")");
}

CompGraph main_graph(const PipelineConfig& cfg, int num_classes) {
  return build_resnet_graph(cfg.depth, cfg.width, num_classes);
}

DatasetSplits source_splits(const PipelineConfig& cfg) {
  return split_dataset(load_dataset(cfg.dataset, "dataset"), cfg.dataset.train_fraction,
                       cfg.dataset.val_fraction, cfg.dataset.seed);
}

bool checkpoint_current(const fs::path& p, const TrainConfig& tc) {
  if (!fs::exists(p)) return false;
  try {
    return Checkpoint::from_archive(Archive::load(p)).config.to_json() == tc.to_json();
  } catch (const std::exception&) {
    return false;  // unreadable or stale: retrain
  }
}

void cmd_harvest(Context& ctx) {
  Stopwatch watch;
  const auto& cfg = ctx.cfg;
  auto m = begin_manifest(ctx, "harvest");
  const auto data = source_splits(cfg);
  const auto g = main_graph(cfg, data.train.num_classes);
  const auto seeds = cfg.seeds(cfg.population);
  m.seeds = seeds;

  std::vector<TrainConfig> configs;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    TrainConfig tc = cfg.harvest_train;
    tc.seed = seeds[i];
    configs.push_back(tc);
    if (!checkpoint_current(ctx.out / checkpoint_name(g.name, seeds[i]), tc)) todo.push_back(i);
  }
  ctx.log << "harvest: " << seeds.size() - todo.size() << " of " << seeds.size()
          << " base networks already trained\n";

  // Bounded pool over independent trainings; each writes its own file.
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        const auto i = todo[k];
        const auto ck = train_base_network(g, configs[i], data);
        ck.to_archive().save(ctx.out / checkpoint_name(g.name, seeds[i]));
        std::lock_guard lock(mu);
        ctx.log << "  base network seed " << seeds[i] << ": best val acc " << ck.val_accuracy << "\n";
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), todo.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<Checkpoint> cks;
  for (auto s : seeds) {
    const auto name = checkpoint_name(g.name, s);
    cks.push_back(Checkpoint::from_archive(Archive::load(ctx.out / name)));
    m.outputs.push_back(name);
  }
  const auto wds = assemble_weight_dataset(cks, g, cfg.filter_fraction);
  wds.to_archive().save(ctx.out / weight_dataset_name(g.name));
  m.outputs.push_back(weight_dataset_name(g.name));
  m.extra["resumed"] = seeds.size() - todo.size();
  m.extra["layers"] = wds.per_layer.size();
  finish_manifest(ctx, m, "manifest_harvest.json", watch);
}

void cmd_train_local(Context& ctx, LocalKind kind, RunManifest& m) {
  const auto& cfg = ctx.cfg;
  const auto arch = cfg.arch();
  const auto wds_name = weight_dataset_name(arch);
  require_file(ctx.out / wds_name, "run harvest first");
  m.inputs.push_back(wds_name);
  const auto wds = WeightDataset::from_archive(Archive::load(ctx.out / wds_name));
  LocalInitRegistry reg;
  reg.arch = arch;
  reg.kind = kind;
  std::ostringstream log;
  log << "layer,epoch,loss\n";
  for (const auto& [layer, slices] : wds.per_layer) {
    LocalTrainConfig lc = cfg.local;
    lc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(layer));
    auto r = train_local_model(slices, kind, lc);
    char buf[64];
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%.17g", r.epoch_loss[e]);
      log << layer << "," << e << "," << buf << "\n";
    }
    ctx.log << "  layer " << layer << ": final loss " << r.epoch_loss.back() << "\n";
    reg.models.emplace(layer, std::move(r.model));
    m.outputs.push_back(local_model_name(arch, layer, kind));
  }
  save_registry(reg, ctx.out);
  m.outputs.push_back(registry_manifest_name(arch, kind));
  const auto log_name = "local_" + arch + "_" + local_kind_name(kind) + "_log.csv";
  write_file(ctx.out / log_name, log.str());
  m.outputs.push_back(log_name);
  m.seeds = {cfg.seed};
}

void cmd_train_ghn(Context& ctx, GHNVariant variant, RunManifest& m) {
  const auto& cfg = ctx.cfg;
  const auto data = source_splits(cfg);
  auto r = train_ghn(cfg.ghn, data.train, variant);
  const auto name = ghn_model_name(variant, cfg.dataset.name);
  r.model.to_archive().save(ctx.out / name);
  std::ostringstream log;
  write_ghn_log(log, r.log);
  const auto log_name = name.substr(0, name.size() - 3) + ".csv";
  write_file(ctx.out / log_name, log.str());
  m.outputs = {name, log_name};
  m.seeds = {cfg.seed};
  const auto held_out = build_resnet_graph(cfg.depth, cfg.width, data.val.num_classes);
  const auto ws = ghn_forward(held_out, r.model,
                              variant == GHNVariant::noise_ghn ? std::optional(sample_noise(r.model, cfg.seed))
                                                               : std::nullopt);
  const double acc = evaluate_accuracy(held_out, ws, data.val);
  m.extra["untrained_val_accuracy"] = acc;
  ctx.log << "  " << held_out.name << " val acc without training " << acc << "\n";
}

void cmd_train_gen(Context& ctx, const std::string& kind) {
  Stopwatch watch;
  auto m = begin_manifest(ctx, "train-gen " + kind);
  if (kind == "vae" || kind == "vqvae") {
    cmd_train_local(ctx, local_kind_from_name(kind), m);
  } else {
    cmd_train_ghn(ctx, variant_from_name(kind), m);
  }
  finish_manifest(ctx, m, "manifest_train-gen_" + kind + ".json", watch);
}

// Loads the generators the methods need; returns file names read and a
// content hash over them.
std::pair<InitSources, std::vector<std::string>> load_sources(const Context& ctx,
                                                              const std::vector<InitMethod>& methods) {
  InitSources src;
  std::vector<std::string> files;
  const auto arch = ctx.cfg.arch();
  const auto dataset = ctx.cfg.dataset.name;
  for (auto method : methods) {
    if (method == InitMethod::vae || method == InitMethod::vqvae) {
      const auto kind = method == InitMethod::vae ? LocalKind::vae : LocalKind::vqvae;
      const auto name = registry_manifest_name(arch, kind);
      require_file(ctx.out / name, "run train-gen --kind " + local_kind_name(kind));
      auto reg = load_registry(ctx.out / name);
      files.push_back(name);
      for (const auto& [layer, model] : reg.models) files.push_back(local_model_name(arch, layer, kind));
      (method == InitMethod::vae ? src.vae : src.vqvae) = std::move(reg);
    } else if (method == InitMethod::ghn || method == InitMethod::noise_ghn) {
      const auto variant = method == InitMethod::ghn ? GHNVariant::ghn : GHNVariant::noise_ghn;
      const auto name = ghn_model_name(variant, dataset);
      require_file(ctx.out / name, "run train-gen --kind " + variant_name(variant));
      auto model = GHNModel::from_archive(Archive::load(ctx.out / name));
      files.push_back(name);
      (method == InitMethod::ghn ? src.ghn : src.noise_ghn) = std::move(model);
    }
  }
  return {std::move(src), files};
}

std::string files_hash(const Context& ctx, const std::vector<std::string>& files) {
  std::string all;
  for (const auto& f : files) all += f + "\n" + sha256_hex(read_file(ctx.out / f)) + "\n";
  return sha256_hex(all);
}

std::pair<int, std::string> parse_arch(const std::string& arch, int fallback_depth, int width) {
  if (arch.empty()) return {fallback_depth, resnet_name(fallback_depth, width)};
  static const std::regex re("resnet([0-9]+)");
  std::smatch match;
  if (!std::regex_match(arch, match, re)) throw ConfigError("--arch", "expected resnet<depth>, e.g. resnet20");
  const int depth = std::stoi(match[1]);
  if (depth < 8 || (depth - 2) % 6 != 0) throw ConfigError("--arch", "depth must be 6n+2 with n >= 1");
  return {depth, resnet_name(depth, width)};
}

void cmd_init(Context& ctx, const std::string& method_str, const std::string& arch_arg) {
  Stopwatch watch;
  const auto& cfg = ctx.cfg;
  const auto method = method_from_name(method_str, "--method");
  const auto [depth, arch] = parse_arch(arch_arg, cfg.depth, cfg.width);
  auto m = begin_manifest(ctx, "init " + method_str);
  const auto g = build_resnet_graph(depth, cfg.width, cfg.dataset.num_classes);
  auto [sources, files] = load_sources(ctx, {method});
  m.inputs.insert(m.inputs.end(), files.begin(), files.end());
  const auto rec = make_init(method, g, cfg.seed, sources);
  auto a = rec.weights.to_archive();
  a.meta["method"] = method_name(method);
  a.meta["seed"] = cfg.seed;
  if (rec.noise) a.meta["noise"] = *rec.noise;
  const auto stem = "init_" + method_name(method) + "_" + arch + "_s" + std::to_string(cfg.seed);
  a.save(ctx.out / (stem + ".ws"));
  m.outputs = {stem + ".ws"};
  m.seeds = {cfg.seed};
  if (rec.noise) m.extra["noise"] = *rec.noise;
  finish_manifest(ctx, m, "manifest_" + stem + ".json", watch);
}

const std::vector<std::string> kExperiments = {"convergence", "accuracy", "ensemble_ood", "similarity",
                                               "transfer"};

void cmd_evaluate(Context& ctx, const std::string& experiment) {
  Stopwatch watch;
  const auto& cfg = ctx.cfg;
  auto m = begin_manifest(ctx, "evaluate " + experiment);
  const bool transfer = experiment == "transfer";
  const auto& methods = transfer ? cfg.transfer_methods : cfg.methods;
  auto [sources, files] = load_sources(ctx, methods);
  m.inputs.insert(m.inputs.end(), files.begin(), files.end());

  EvalSetup setup;
  setup.methods = methods;
  setup.thresholds = cfg.thresholds;
  setup.ensemble_size = cfg.ensemble_size;
  setup.num_ensembles = cfg.num_ensembles;
  setup.ensemble_seed = derive_seed(cfg.seed, 0xe45e);
  setup.corruption = cfg.corruption;
  setup.combine = cfg.combine;
  setup.corruption_seed = derive_seed(cfg.seed, 0xc022);
  setup.source_tag = files_hash(ctx, files) + "|" + cfg.dataset.name;

  json results;
  if (transfer) {
    const auto all = load_dataset(cfg.transfer_dataset, "transfer.dataset");
    const auto small = small_splits(all, cfg.transfer_train_samples, cfg.transfer_val_samples,
                                    cfg.transfer_dataset.seed);
    setup.graph = main_graph(cfg, all.num_classes);
    setup.train = cfg.transfer_train;
    setup.seeds = cfg.seeds(cfg.transfer_num_seeds);
    results = to_json(transfer_experiment(setup, small, sources));
  } else {
    const auto data = source_splits(cfg);
    setup.graph = main_graph(cfg, data.train.num_classes);
    setup.train = cfg.eval_train;
    setup.seeds = cfg.seeds(experiment == "ensemble_ood" ? cfg.ensemble_pool : cfg.num_seeds);
    const RunStore store(ctx.out / "runs");
    fs::create_directories(ctx.out / "runs");
    for (auto method : methods) {
      for (const auto& r : run_population(setup, data, sources, store, method)) {
        const auto traj = "traj_" + r.run_id + ".csv";
        write_trajectory_csv(ctx.out / traj, r.trajectory);
        m.outputs.push_back(traj);
        m.outputs.push_back("runs/" + r.run_id + ".run");
      }
    }
    if (experiment == "convergence") {
      results = to_json(convergence_experiment(setup, data, sources, store), setup.thresholds);
    } else if (experiment == "accuracy") {
      results = to_json(accuracy_experiment(setup, data, sources, store));
    } else if (experiment == "ensemble_ood") {
      results = to_json(ensemble_ood_experiment(setup, data, sources, store));
      results["corruption"] = corruption_name(cfg.corruption);
      results["combine"] = cfg.combine == EnsembleCombine::logits ? "logits" : "probabilities";
    } else {
      results = to_json(similarity_experiment(setup, data, sources, store));
    }
  }
  m.seeds = setup.seeds;
  json doc = {{"experiment", experiment},
              {"arch", setup.graph.name},
              {"dataset", transfer ? cfg.transfer_dataset.name : cfg.dataset.name},
              {"seeds", setup.seeds},
              {"results", results}};
  const auto name = "eval_" + experiment + ".json";
  write_file(ctx.out / name, doc.dump(2) + "\n");
  m.outputs.push_back(name);
  finish_manifest(ctx, m, "manifest_evaluate_" + experiment + ".json", watch);
}

std::string fmt(const json& v, const char* spec = "%.4f") {
  if (v.is_null()) return "not reached";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v.get<double>());
  return buf;
}

std::string report_section(const std::string& exp, const json& doc) {
  std::ostringstream s;
  const auto& res = doc.at("results");
  s << "## " << exp << " (" << doc.at("arch").get<std::string>() << ", "
    << doc.at("dataset").get<std::string>() << ", " << doc.at("seeds").size() << " seeds)\n\n";
  if (exp == "convergence") {
    s << "| method |";
    for (const auto& t : res.at("thresholds")) s << " median eval steps to " << fmt(t, "%.2f") << " |";
    s << " mean accuracy at step 1 |\n|---|";
    for (std::size_t i = 0; i <= res.at("thresholds").size(); ++i) s << "---|";
    s << "\n";
    for (const auto& r : res.at("methods")) {
      s << "| " << r.at("method").get<std::string>() << " |";
      for (const auto& v : r.at("median_steps")) s << " " << fmt(v, "%.1f") << " |";
      const auto acc = r.at("first_eval_accuracy").get<std::vector<double>>();
      s << " " << fmt(std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size())) << " |\n";
    }
  } else if (exp == "accuracy") {
    s << "| method | median | q1 | q3 | whiskers |\n|---|---|---|---|---|\n";
    for (const auto& r : res.at("methods")) {
      const auto& q = r.at("quantiles");
      s << "| " << r.at("method").get<std::string>() << " | " << fmt(q.at("median")) << " | "
        << fmt(q.at("q1")) << " | " << fmt(q.at("q3")) << " | " << fmt(q.at("whisker_low")) << " to "
        << fmt(q.at("whisker_high")) << " |\n";
    }
  } else if (exp == "ensemble_ood") {
    s << "Median ensemble ECE per severity (" << res.at("corruption").get<std::string>() << ").\n\n";
    s << "| method | clean | 1 | 2 | 3 | 4 | 5 |\n|---|---|---|---|---|---|---|\n";
    for (const auto& r : res.at("methods")) {
      s << "| " << r.at("method").get<std::string>() << " |";
      for (const auto& v : r.at("median_ece")) s << " " << fmt(v) << " |";
      s << "\n";
    }
  } else if (exp == "similarity") {
    s << "| method | prediction agreement | logit cosine | inits identical | inits all differ |\n"
      << "|---|---|---|---|---|\n";
    for (const auto& r : res.at("methods")) {
      s << "| " << r.at("method").get<std::string>() << " | "
        << fmt(r.at("prediction_agreement").at("upper_mean")) << " | "
        << fmt(r.at("logit_cosine").at("upper_mean")) << " | " << r.at("inits_identical").dump() << " | "
        << r.at("inits_all_differ").dump() << " |\n";
    }
  } else {
    s << "| method | median test accuracy |\n|---|---|\n";
    for (const auto& r : res.at("methods")) {
      s << "| " << r.at("method").get<std::string>() << " | " << fmt(r.at("median_accuracy")) << " |\n";
    }
  }
  s << "\n";
  return s.str();
}

void cmd_report(Context& ctx) {
  Stopwatch watch;
  auto m = begin_manifest(ctx, "report");
  std::ostringstream md;
  md << "# initforge report\n\n";
  int found = 0;
  for (const auto& exp : kExperiments) {
    const auto name = "eval_" + exp + ".json";
    if (!fs::exists(ctx.out / name)) continue;
    json doc;
    try {
      doc = json::parse(read_file(ctx.out / name));
      md << report_section(exp, doc);
    } catch (const json::exception& e) {
      throw ArtifactError("malformed " + name + ": " + e.what());
    }
    m.inputs.push_back(name);
    ++found;
  }
  if (found == 0) throw ArtifactError("no eval_*.json files under " + ctx.out.string() + " (run evaluate first)");
  write_file(ctx.out / "report.md", md.str());
  m.outputs = {"report.md"};
  finish_manifest(ctx, m, "manifest_report.json", watch);
}

json read_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw ConfigError("--config", "file not found: " + path);
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Initialise neural networks with learned weight generators", "initforge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kCodeVersion);

  std::string config_path, out_dir = "out", profile, kind, method, arch, experiment;
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> seed_opts, profile_opts;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    seed_opts.push_back(sub->add_option("--seed", seed, "Base seed (overrides the config)"));
    profile_opts.push_back(sub->add_option("--profile", profile, "Scale defaults")
                               ->check(CLI::IsMember({"desk", "paper"})));
    sub->add_option("--out", out_dir, "Artifact directory")->capture_default_str();
  };
  auto* harvest = app.add_subcommand("harvest", "Train base networks and build the weight dataset");
  common(harvest);
  auto* train_gen = app.add_subcommand("train-gen", "Train a weight generator");
  common(train_gen);
  train_gen->add_option("--kind", kind, "Generator kind")
      ->required()
      ->check(CLI::IsMember({"vae", "vqvae", "ghn", "noise_ghn"}));
  auto* init = app.add_subcommand("init", "Write one initialised weight set");
  common(init);
  init->add_option("--method", method, "Initialisation method")
      ->required()
      ->check(CLI::IsMember({"he", "xavier", "vae", "vqvae", "ghn", "noise_ghn"}));
  init->add_option("--arch", arch, "Architecture, e.g. resnet20 (default: config arch)");
  auto* evaluate = app.add_subcommand("evaluate", "Run one evaluation experiment");
  common(evaluate);
  evaluate->add_option("--experiment", experiment, "Experiment")
      ->required()
      ->check(CLI::IsMember(kExperiments));
  auto* report = app.add_subcommand("report", "Summarise eval JSON files as markdown");
  common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    std::optional<std::string> profile_override;
    std::optional<std::uint64_t> seed_override;
    for (auto* o : profile_opts) {
      if (o->count() > 0) profile_override = profile;
    }
    for (auto* o : seed_opts) {
      if (o->count() > 0) seed_override = seed;
    }
    Context ctx{resolve_config(read_config_file(config_path), profile_override, seed_override), out_dir,
                config_path, out};
    fs::create_directories(ctx.out);
    if (harvest->parsed()) cmd_harvest(ctx);
    else if (train_gen->parsed()) cmd_train_gen(ctx, kind);
    else if (init->parsed()) cmd_init(ctx, method, arch);
    else if (evaluate->parsed()) cmd_evaluate(ctx, experiment);
    else cmd_report(ctx);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ArtifactError& e) {
    err << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace initforge
