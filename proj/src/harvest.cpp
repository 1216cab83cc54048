// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/harvest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "initforge/errors.hpp"
#include "initforge/localinit.hpp"

namespace initforge {

Archive WeightDataset::to_archive() const {
  Archive a;
  a.meta["type"] = "weight_dataset";
  a.meta["arch"] = arch;
  a.meta["num_sources"] = num_sources;
  a.meta["filter_fraction"] = filter_fraction;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [id, s] : per_layer) {
    layers.push_back(id);
    a.put("layer" + std::to_string(id) + "_slices", s.slices);
    Tensor<double> runs({static_cast<std::int64_t>(s.source_run_ids.size())});
    std::copy(s.source_run_ids.begin(), s.source_run_ids.end(), runs.data.begin());
    a.put("layer" + std::to_string(id) + "_runs", std::move(runs));
  }
  a.meta["layers"] = std::move(layers);
  return a;
}

WeightDataset WeightDataset::from_archive(const Archive& a) {
  if (a.meta.value("type", "") != "weight_dataset") {
    throw ArtifactError("archive is not a weight dataset");
  }
  WeightDataset ds;
  ds.arch = a.meta.at("arch").get<std::string>();
  ds.num_sources = a.meta.at("num_sources").get<int>();
  ds.filter_fraction = a.meta.at("filter_fraction").get<double>();
  for (int id : a.meta.at("layers")) {
    SliceSet s;
    s.layer_id = id;
    s.slices = a.f32("layer" + std::to_string(id) + "_slices");
    for (double r : a.f64("layer" + std::to_string(id) + "_runs").data) {
      s.source_run_ids.push_back(static_cast<int>(r));
    }
    ds.per_layer.emplace(id, std::move(s));
  }
  return ds;
}

Archive Checkpoint::to_archive() const {
  Archive a = weights.to_archive();
  a.meta["type"] = "checkpoint";
  a.meta["run_id"] = run_id;
  a.meta["config"] = config.to_json();
  a.meta["val_accuracy"] = val_accuracy;
  return a;
}

Checkpoint Checkpoint::from_archive(const Archive& a) {
  if (a.meta.value("type", "") != "checkpoint") throw ArtifactError("archive is not a checkpoint");
  Archive inner = a;
  inner.meta["type"] = "weightset";
  Checkpoint ck;
  ck.weights = WeightSet::from_archive(inner);
  ck.run_id = a.meta.at("run_id").get<int>();
  ck.config = TrainConfig::from_json(a.meta.at("config"));
  ck.val_accuracy = a.meta.at("val_accuracy").get<double>();
  return ck;
}

std::string checkpoint_name(const std::string& arch, std::uint64_t seed) {
  return "base_" + arch + "_" + std::to_string(seed) + ".ckpt";
}

std::string weight_dataset_name(const std::string& arch) { return "weights_" + arch + ".wds"; }

Checkpoint train_base_network(const CompGraph& g, const TrainConfig& cfg, const DatasetSplits& data) {
  TrainConfig c = cfg;
  c.keep_best = true;
  const WeightSet init = baseline_init(g, InitScheme::he, cfg.seed);
  auto result = train_classifier(g, init, c, data.train, data.val);
  Checkpoint ck;
  ck.run_id = static_cast<int>(cfg.seed);
  ck.weights = std::move(result.weights);
  ck.config = cfg;
  ck.val_accuracy = result.best_val_accuracy;
  return ck;
}

std::vector<int> slice_layers(const CompGraph& g) {
  std::vector<int> out;
  for (const auto& n : g.nodes) {
    if (n.op == OpKind::conv && n.param_shape && (*n.param_shape)[2] == 3 &&
        (*n.param_shape)[3] == 3) {
      out.push_back(n.id);
    }
  }
  return out;
}

std::map<int, Tensor<float>> extract_slices(const Checkpoint& ck, const CompGraph& g) {
  std::map<int, Tensor<float>> out;
  for (int id : slice_layers(g)) {
    const Shape& expected = *g.nodes[id].param_shape;
    const Tensor<float>* t = nullptr;
    try {
      t = &ck.weights.at(id, ParamKind::conv_kernel);
    } catch (const GraphError&) {
      throw GraphError("checkpoint has no kernel for conv node " + std::to_string(id));
    }
    if (t->shape != expected) {
      throw GraphError("checkpoint kernel of node " + std::to_string(id) + " is " +
                       to_string(t->shape) + ", graph expects " + to_string(expected));
    }
    // Row-major O x I x 3 x 3 already lists slices in (out, in) order.
    out.emplace(id, Tensor<float>({expected[0] * expected[1], 3, 3}, t->data));
  }
  return out;
}

SliceSet filter_low_norm(const SliceSet& s, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("filter fraction must be in [0, 1)");
  }
  const std::int64_t n = s.size();
  const auto removed = static_cast<std::int64_t>(std::floor(fraction * static_cast<double>(n)));
  if (removed == 0) return s;

  std::vector<double> norms(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = 0; k < 9; ++k) {
      const double v = s.slices[i * 9 + k];
      acc += v * v;
    }
    norms[i] = std::sqrt(acc);
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return norms[a] != norms[b] ? norms[a] < norms[b] : a > b;
  });
  std::vector<bool> drop(static_cast<std::size_t>(n), false);
  for (std::int64_t i = 0; i < removed; ++i) drop[order[i]] = true;

  SliceSet out;
  out.layer_id = s.layer_id;
  out.slices = Tensor<float>({n - removed, 3, 3});
  std::int64_t w = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (drop[i]) continue;
    std::copy_n(s.slices.ptr() + i * 9, 9, out.slices.ptr() + w * 9);
    if (!s.source_run_ids.empty()) out.source_run_ids.push_back(s.source_run_ids[i]);
    ++w;
  }
  return out;
}

WeightDataset assemble_weight_dataset(std::span<const Checkpoint> checkpoints, const CompGraph& g,
                                      double fraction) {
  if (checkpoints.empty()) throw std::invalid_argument("need at least one checkpoint");
  WeightDataset ds;
  ds.arch = g.name;
  ds.num_sources = static_cast<int>(checkpoints.size());
  ds.filter_fraction = fraction;
  std::map<int, std::vector<float>> pooled;
  std::map<int, std::vector<int>> runs;
  for (const auto& ck : checkpoints) {
    if (ck.weights.arch != g.name) {
      throw GraphError("checkpoint of run " + std::to_string(ck.run_id) + " is for '" +
                       ck.weights.arch + "', expected '" + g.name + "'");
    }
    for (auto& [id, slices] : extract_slices(ck, g)) {
      pooled[id].insert(pooled[id].end(), slices.data.begin(), slices.data.end());
      runs[id].insert(runs[id].end(), static_cast<std::size_t>(slices.shape[0]), ck.run_id);
    }
  }
  for (auto& [id, values] : pooled) {
    SliceSet s;
    s.layer_id = id;
    const auto count = static_cast<std::int64_t>(values.size() / 9);
    s.slices = Tensor<float>({count, 3, 3}, std::move(values));
    s.source_run_ids = std::move(runs[id]);
    ds.per_layer.emplace(id, filter_low_norm(s, fraction));
  }
  return ds;
}

}  // namespace initforge
