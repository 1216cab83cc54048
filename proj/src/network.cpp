// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "initforge/errors.hpp"
#include "initforge/optim.hpp"
#include "initforge/rng.hpp"

namespace initforge {

namespace {

std::string tensor_key(std::size_t index, const ParamSpec& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "p%04zu_n%d_%s", index, s.node_id,
                std::string(param_kind_name(s.kind)).c_str());
  return buf;
}

ParamKind kind_from_name(const std::string& name) {
  for (auto k : {ParamKind::conv_kernel, ParamKind::bn_scale, ParamKind::bn_shift, ParamKind::bias,
                 ParamKind::linear_weight}) {
    if (param_kind_name(k) == name) return k;
  }
  throw ArtifactError("unknown parameter kind '" + name + "'");
}

}  // namespace

void WeightSet::check(const CompGraph& g) const {
  const auto expected = enumerate_params(g);
  if (expected.size() != specs.size() || specs.size() != tensors.size()) {
    throw GraphError("weight set for '" + arch + "' has " + std::to_string(tensors.size()) +
                     " tensors, graph '" + g.name + "' needs " + std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i] != specs[i] || tensors[i].shape != expected[i].shape) {
      throw GraphError("weight set mismatch at node " + std::to_string(expected[i].node_id) + " (" +
                       std::string(param_kind_name(expected[i].kind)) + "): expected " +
                       to_string(expected[i].shape) + ", got " + to_string(tensors[i].shape));
    }
  }
}

const Tensor<float>& WeightSet::at(int node_id, ParamKind kind) const {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].node_id == node_id && specs[i].kind == kind) return tensors[i];
  }
  throw GraphError("weight set has no " + std::string(param_kind_name(kind)) + " for node " +
                   std::to_string(node_id));
}

Tensor<float>& WeightSet::at(int node_id, ParamKind kind) {
  return const_cast<Tensor<float>&>(std::as_const(*this).at(node_id, kind));
}

Archive WeightSet::to_archive() const {
  Archive a;
  a.meta["type"] = "weightset";
  a.meta["arch"] = arch;
  nlohmann::json specs_json = nlohmann::json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs_json.push_back({{"node", specs[i].node_id},
                          {"kind", param_kind_name(specs[i].kind)},
                          {"shape", specs[i].shape},
                          {"key", tensor_key(i, specs[i])}});
    a.put(tensor_key(i, specs[i]), tensors[i]);
  }
  a.meta["specs"] = std::move(specs_json);
  return a;
}

WeightSet WeightSet::from_archive(const Archive& a) {
  if (a.meta.value("type", "") != "weightset") throw ArtifactError("archive is not a weight set");
  WeightSet ws;
  ws.arch = a.meta.at("arch").get<std::string>();
  for (const auto& s : a.meta.at("specs")) {
    ParamSpec spec{s.at("node").get<int>(), s.at("shape").get<Shape>(),
                   kind_from_name(s.at("kind").get<std::string>())};
    ws.tensors.push_back(a.f32(s.at("key").get<std::string>()));
    ws.specs.push_back(std::move(spec));
  }
  return ws;
}

WeightSet empty_weight_set(const CompGraph& g) {
  WeightSet ws;
  ws.arch = g.name;
  ws.specs = enumerate_params(g);
  for (const auto& s : ws.specs) ws.tensors.emplace_back(s.shape);
  return ws;
}

std::vector<ag::Var<float>> as_params(const WeightSet& ws) {
  std::vector<ag::Var<float>> out;
  for (const auto& t : ws.tensors) out.push_back(ag::Var<float>::param(t));
  return out;
}

std::vector<ag::Var<float>> as_constants(const WeightSet& ws) {
  std::vector<ag::Var<float>> out;
  for (const auto& t : ws.tensors) out.push_back(ag::Var<float>::constant(t));
  return out;
}

ag::Var<float> forward(const CompGraph& g, std::span<const ag::Var<float>> params,
                       const ag::Var<float>& input) {
  // Parameter slots per node, following enumerate_params ordering.
  std::vector<int> first_param(g.nodes.size(), -1);
  {
    int k = 0;
    for (const auto& node : g.nodes) {
      if (!is_parameterised(node.op)) continue;
      first_param[node.id] = k;
      k += node.op == OpKind::conv ? 1 : 2;
    }
    if (static_cast<std::size_t>(k) != params.size()) {
      throw GraphError("graph '" + g.name + "' needs " + std::to_string(k) + " parameters, got " +
                       std::to_string(params.size()));
    }
  }
  const auto preds = g.predecessors();
  // Last consumer of every node, so activations can be dropped early.
  std::vector<int> last_use(g.nodes.size(), -1);
  for (const auto& [src, dst] : g.edges) last_use[src] = std::max(last_use[src], dst);

  std::vector<ag::Var<float>> values(g.nodes.size());
  ag::Var<float> result;
  for (const auto& node : g.nodes) {
    const auto& in = preds[node.id];
    auto arg = [&](std::size_t i) -> const ag::Var<float>& { return values[in.at(i)]; };
    const int p = first_param[node.id];
    ag::Var<float> out;
    switch (node.op) {
      case OpKind::input:
        out = input;
        break;
      case OpKind::conv:
        out = ag::conv2d(arg(0), params[p], static_cast<int>(node.attr("stride", 1)),
                         static_cast<int>(node.attr("padding", 0)));
        break;
      case OpKind::batchnorm:
        out = ag::batch_norm_train(arg(0), params[p], params[p + 1], 1e-5f);
        break;
      case OpKind::relu:
        out = ag::relu(arg(0));
        break;
      case OpKind::add:
        out = ag::add(arg(0), arg(1));
        break;
      case OpKind::pool:
        out = ag::avg_pool2(arg(0));
        break;
      case OpKind::global_pool:
        out = ag::global_avg_pool(arg(0));
        break;
      case OpKind::linear:
        // Bias precedes the weight in enumerate_params.
        out = ag::add_rowvec(ag::matmul(arg(0), params[p + 1], false, true), params[p]);
        break;
      case OpKind::output:
        result = arg(0);
        break;
    }
    values[node.id] = std::move(out);
    for (int src : in) {
      if (last_use[src] == node.id) values[src] = ag::Var<float>();
    }
  }
  return result;
}

std::vector<std::pair<std::int64_t, std::int64_t>> eval_batches(std::int64_t n,
                                                                std::int64_t max_batch) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  if (n <= 0) return out;
  const std::int64_t count = (n + max_batch - 1) / max_batch;
  std::int64_t start = 0;
  for (std::int64_t b = 0; b < count; ++b) {
    const std::int64_t len = n / count + (b < n % count ? 1 : 0);
    out.emplace_back(start, len);
    start += len;
  }
  return out;
}

Tensor<float> predict_logits(const CompGraph& g, const WeightSet& ws, const LabeledDataset& data,
                             std::int64_t max_batch) {
  ag::NoGradGuard no_grad;
  const auto params = as_constants(ws);
  Tensor<float> logits;
  std::int64_t classes = 0;
  for (const auto& [start, len] : eval_batches(data.size(), max_batch)) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    const auto x = ag::Var<float>::constant(batch_cnhw(data, idx));
    const auto out = forward(g, params, x);
    if (classes == 0) {
      classes = out.shape().at(1);
      logits = Tensor<float>({data.size(), classes});
    }
    std::copy(out.value().data.begin(), out.value().data.end(),
              logits.data.begin() + start * classes);
  }
  return logits;
}

Tensor<double> softmax_rows(const Tensor<float>& logits) {
  const std::int64_t n = logits.shape.at(0), c = logits.shape.at(1);
  Tensor<double> out({n, c});
  for (std::int64_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = std::exp(row[j] - m) / z;
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
  const std::int64_t n = logits.shape.at(0), c = logits.shape.at(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate_accuracy(const CompGraph& g, const WeightSet& ws, const LabeledDataset& data) {
  return accuracy(argmax_rows(predict_logits(g, ws, data)), data.labels);
}

std::vector<Milestone> step_decay_schedule(int epochs) {
  std::vector<Milestone> out;
  const int a = epochs * 80 / 120, b = epochs * 100 / 120;
  if (a > 0) out.push_back({a, 0.2});
  if (b > a) out.push_back({b, 0.5});
  return out;
}

std::vector<Milestone> finetune_schedule() { return {{20, 0.5}, {30, 0.2}}; }

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr", "must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum", "must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay", "must be non-negative");
  if (batch_size < 2) throw ConfigError("batch_size", "must be at least 2");
  if (epochs < 0) throw ConfigError("epochs", "must be non-negative");
  if (eval_every_batches < 0) throw ConfigError("eval_every_batches", "must be non-negative");
  if (eval_every_epochs < 1) throw ConfigError("eval_every_epochs", "must be at least 1");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    const std::string at = "schedule[" + std::to_string(i) + "]";
    if (!(schedule[i].factor > 0)) throw ConfigError(at + ".factor", "must be positive");
    if (schedule[i].epoch < 0) throw ConfigError(at + ".epoch", "must be non-negative");
    if (i > 0 && schedule[i].epoch <= schedule[i - 1].epoch) {
      throw ConfigError(at + ".epoch", "milestones must be strictly increasing");
    }
  }
}

double TrainConfig::lr_at_epoch(int epoch) const {
  double rate = lr;
  for (const auto& m : schedule) {
    if (epoch >= m.epoch) rate *= m.factor;
  }
  return rate;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& m : schedule) sched.push_back({m.epoch, m.factor});
  return {{"lr", lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"schedule", sched},
          {"seed", seed},
          {"dataset", dataset},
          {"eval_every_batches", eval_every_batches},
          {"eval_every_epochs", eval_every_epochs},
          {"keep_best", keep_best}};
}

namespace {

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(prefix + key, "has the wrong type");
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("", "training config must be an object");
  TrainConfig c;
  read_field(j, "lr", c.lr, "");
  read_field(j, "momentum", c.momentum, "");
  read_field(j, "weight_decay", c.weight_decay, "");
  read_field(j, "batch_size", c.batch_size, "");
  read_field(j, "epochs", c.epochs, "");
  read_field(j, "seed", c.seed, "");
  read_field(j, "dataset", c.dataset, "");
  read_field(j, "eval_every_batches", c.eval_every_batches, "");
  read_field(j, "eval_every_epochs", c.eval_every_epochs, "");
  read_field(j, "keep_best", c.keep_best, "");
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    if (!s.is_array()) throw ConfigError("schedule", "must be a list of [epoch, factor]");
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& e = s[i];
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number()) {
        throw ConfigError("schedule[" + std::to_string(i) + "]", "must be [epoch, factor]");
      }
      c.schedule.push_back({e[0].get<int>(), e[1].get<double>()});
    }
  }
  c.validate();
  return c;
}

TrainResult train_classifier(const CompGraph& g, const WeightSet& init, const TrainConfig& cfg,
                             const LabeledDataset& train, const LabeledDataset& val) {
  cfg.validate();
  init.check(g);
  train.check();
  if (train.size() < 2) throw std::invalid_argument("training set needs at least 2 samples");

  TrainResult result;
  result.trajectory.cadence = cfg.eval_every_batches > 0
                                  ? "batches:" + std::to_string(cfg.eval_every_batches)
                                  : "epochs:" + std::to_string(cfg.eval_every_epochs);
  auto params = as_params(init);
  Sgd<float> opt(params, static_cast<float>(cfg.momentum), static_cast<float>(cfg.weight_decay));

  auto snapshot = [&] {
    WeightSet ws;
    ws.arch = init.arch;
    ws.specs = init.specs;
    for (const auto& p : params) ws.tensors.push_back(p.value());
    return ws;
  };
  WeightSet best;
  auto record = [&] {
    WeightSet current = snapshot();
    const double acc = val.size() > 0 ? evaluate_accuracy(g, current, val) : 0.0;
    const int index = static_cast<int>(result.trajectory.points.size());
    result.trajectory.points.push_back({index, acc});
    result.final_val_accuracy = acc;
    if (index == 0 || acc > result.best_val_accuracy) {
      result.best_val_accuracy = acc;
      if (cfg.keep_best) best = std::move(current);
    }
  };
  record();

  const std::int64_t n = train.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  bool evaluated_last = true;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const float lr = static_cast<float>(cfg.lr_at_epoch(epoch));
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t len = std::min<std::int64_t>(cfg.batch_size, n - start);
      if (len < 2) break;  // batch statistics need two samples
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(len));
      opt.zero_grad();
      const auto x = ag::Var<float>::constant(batch_cnhw(train, idx));
      const auto labels = batch_labels(train, idx);
      const auto loss = ag::softmax_cross_entropy(forward(g, params, x), labels);
      ++result.steps;
      if (!std::isfinite(loss.item())) throw NumericError(result.steps, "non-finite training loss");
      ag::backward(loss);
      opt.step(lr);
      evaluated_last = false;
      if (cfg.eval_every_batches > 0 && result.steps % cfg.eval_every_batches == 0) {
        record();
        evaluated_last = true;
      }
    }
    if (cfg.eval_every_batches == 0 && (epoch + 1) % cfg.eval_every_epochs == 0) {
      record();
      evaluated_last = true;
    }
  }
  if (!evaluated_last && cfg.keep_best) record();
  result.weights = cfg.keep_best ? std::move(best) : snapshot();
  return result;
}

}  // namespace initforge
