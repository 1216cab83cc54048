// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "initforge/errors.hpp"
#include "initforge/rng.hpp"

namespace initforge {

std::string method_name(InitMethod m) {
  switch (m) {
    case InitMethod::he:
      return "he";
    case InitMethod::xavier:
      return "xavier";
    case InitMethod::vae:
      return "vae";
    case InitMethod::vqvae:
      return "vqvae";
    case InitMethod::ghn:
      return "ghn";
    case InitMethod::noise_ghn:
      return "noise_ghn";
  }
  return {};
}

InitMethod method_from_name(const std::string& name, const std::string& field) {
  for (auto m : {InitMethod::he, InitMethod::xavier, InitMethod::vae, InitMethod::vqvae, InitMethod::ghn,
                 InitMethod::noise_ghn}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError(field, "unknown initialisation method '" + name +
                               "' (expected he, xavier, vae, vqvae, ghn or noise_ghn)");
}

InitRecord make_init(InitMethod method, const CompGraph& g, std::uint64_t seed,
                     const InitSources& sources) {
  auto need = [&](const auto& opt) -> const auto& {
    if (!opt) throw ArtifactError("no " + method_name(method) + " generator available for initialisation");
    return *opt;
  };
  switch (method) {
    case InitMethod::he:
      return {baseline_init(g, InitScheme::he, seed), std::nullopt};
    case InitMethod::xavier:
      return {baseline_init(g, InitScheme::xavier, seed), std::nullopt};
    case InitMethod::vae:
      return {initialize_network_local(g, need(sources.vae), seed), std::nullopt};
    case InitMethod::vqvae:
      return {initialize_network_local(g, need(sources.vqvae), seed), std::nullopt};
    case InitMethod::ghn:
      return {ghn_forward(g, need(sources.ghn)), std::nullopt};
    case InitMethod::noise_ghn: {
      const auto& model = need(sources.noise_ghn);
      auto xi = sample_noise(model, seed);
      return {ghn_forward(g, model, xi), xi};
    }
  }
  throw std::logic_error("unhandled initialisation method");
}

Archive RunResult::to_archive() const {
  Archive a;
  a.meta["type"] = "run";
  a.meta["run_id"] = run_id;
  a.meta["method"] = method_name(method);
  a.meta["seed"] = seed;
  a.meta["test_accuracy"] = test_accuracy;
  a.meta["cadence"] = trajectory.cadence;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : trajectory.points) pts.push_back({p.eval_index, p.val_accuracy});
  a.meta["trajectory"] = pts;
  const auto wi = init.to_archive(), wf = weights.to_archive();
  a.meta["init_meta"] = wi.meta;
  a.meta["weights_meta"] = wf.meta;
  for (const auto& n : wi.names()) a.put("init/" + n, wi.f32(n));
  for (const auto& n : wf.names()) a.put("final/" + n, wf.f32(n));
  return a;
}

RunResult RunResult::from_archive(const Archive& a) {
  if (a.meta.value("type", "") != "run") throw ArtifactError("archive is not a training run");
  RunResult r;
  r.run_id = a.meta.at("run_id");
  r.method = method_from_name(a.meta.at("method"));
  r.seed = a.meta.at("seed");
  r.test_accuracy = a.meta.at("test_accuracy");
  r.trajectory.cadence = a.meta.at("cadence");
  for (const auto& p : a.meta.at("trajectory")) r.trajectory.points.push_back({p.at(0), p.at(1)});
  Archive wi, wf;
  wi.meta = a.meta.at("init_meta");
  wf.meta = a.meta.at("weights_meta");
  for (const auto& n : a.names()) {
    if (n.rfind("init/", 0) == 0) wi.put(n.substr(5), a.f32(n));
    if (n.rfind("final/", 0) == 0) wf.put(n.substr(6), a.f32(n));
  }
  r.init = WeightSet::from_archive(wi);
  r.weights = WeightSet::from_archive(wf);
  return r;
}

std::string run_id(InitMethod method, const std::string& arch, std::uint64_t seed) {
  return method_name(method) + "_" + arch + "_s" + std::to_string(seed);
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& t) {
  std::string out = "eval_index,val_acc\n";
  char buf[64];
  for (const auto& p : t.points) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", p.eval_index, p.val_accuracy);
    out += buf;
  }
  write_file(path, out);
}

std::optional<RunResult> RunStore::load(const std::string& id, const std::string& fingerprint) const {
  if (dir_.empty()) return std::nullopt;
  const auto path = dir_ / (id + ".run");
  if (!std::filesystem::exists(path)) return std::nullopt;
  const auto a = Archive::load(path);
  if (a.meta.value("fingerprint", "") != fingerprint) return std::nullopt;
  return RunResult::from_archive(a);
}

void RunStore::save(const RunResult& r, const std::string& fingerprint) const {
  if (dir_.empty()) return;
  auto a = r.to_archive();
  a.meta["fingerprint"] = fingerprint;
  a.save(dir_ / (r.run_id + ".run"));
}

namespace {

std::string fingerprint(const EvalSetup& setup, InitMethod method, std::uint64_t seed,
                        const DatasetSplits& data) {
  nlohmann::json j;
  j["arch"] = setup.graph.name;
  j["train"] = setup.train.to_json();
  j["method"] = method_name(method);
  j["seed"] = seed;
  j["sizes"] = {data.train.size(), data.val.size(), data.test.size()};
  j["sources"] = setup.source_tag;
  return j.dump();
}

double median_or_inf(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  const double a = v[n / 2 - 1], b = v[n / 2];
  if (std::isinf(a) || std::isinf(b)) return std::numeric_limits<double>::infinity();
  return 0.5 * (a + b);
}

}  // namespace

std::vector<RunResult> run_population(const EvalSetup& setup, const DatasetSplits& data,
                                      const InitSources& sources, const RunStore& store,
                                      InitMethod method) {
  std::vector<RunResult> out;
  for (auto seed : setup.seeds) {
    const auto id = run_id(method, setup.graph.name, seed);
    const auto fp = fingerprint(setup, method, seed, data);
    if (auto cached = store.load(id, fp)) {
      out.push_back(std::move(*cached));
      continue;
    }
    RunResult r;
    r.run_id = id;
    r.method = method;
    r.seed = seed;
    r.init = make_init(method, setup.graph, seed, sources).weights;
    TrainConfig cfg = setup.train;
    cfg.seed = derive_seed(seed, 0x7a11);
    auto trained = train_from_init(r.init, setup.graph, cfg, data.train, data.val);
    r.weights = std::move(trained.weights);
    r.trajectory = std::move(trained.trajectory);
    r.test_accuracy = evaluate_accuracy(setup.graph, r.weights, data.test);
    store.save(r, fp);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ConvergenceRow> convergence_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                                   const InitSources& sources, const RunStore& store) {
  std::vector<ConvergenceRow> rows;
  for (auto m : setup.methods) {
    ConvergenceRow row;
    row.method = m;
    for (const auto& r : run_population(setup, data, sources, store, m)) {
      row.per_seed.push_back(steps_to_threshold(r.trajectory, setup.thresholds));
      row.first_eval_accuracy.push_back(r.trajectory.points.size() > 1 ? r.trajectory.points[1].val_accuracy
                                                                      : std::nan(""));
    }
    for (std::size_t t = 0; t < setup.thresholds.size(); ++t) {
      std::vector<double> steps;
      for (const auto& s : row.per_seed) {
        steps.push_back(s[t].step ? static_cast<double>(*s[t].step) : std::numeric_limits<double>::infinity());
      }
      const double med = median_or_inf(steps);
      row.median_steps.push_back(std::isinf(med) ? std::nullopt : std::optional<double>(med));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<AccuracyRow> accuracy_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                             const InitSources& sources, const RunStore& store) {
  std::vector<AccuracyRow> rows;
  for (auto m : setup.methods) {
    AccuracyRow row;
    row.method = m;
    for (const auto& r : run_population(setup, data, sources, store, m)) row.test_accuracy.push_back(r.test_accuracy);
    row.quantiles = quantile_row(row.test_accuracy);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<EnsembleRow> ensemble_ood_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                                 const InitSources& sources, const RunStore& store) {
  std::vector<LabeledDataset> test_sets{data.test};
  for (int s = 1; s <= 5; ++s) test_sets.push_back(corrupt(data.test, setup.corruption, s, setup.corruption_seed));
  std::vector<EnsembleRow> rows;
  for (auto m : setup.methods) {
    EnsembleRow row;
    row.method = m;
    const auto runs = run_population(setup, data, sources, store, m);
    std::vector<std::string> pool;
    for (const auto& r : runs) pool.push_back(r.run_id);
    row.ensembles = sample_ensembles(pool, setup.ensemble_size, setup.num_ensembles, setup.ensemble_seed);
    // Member probabilities per severity, computed once per run.
    std::vector<std::vector<Tensor<double>>> probs(test_sets.size());
    std::vector<std::vector<Tensor<float>>> logits(test_sets.size());
    for (std::size_t sev = 0; sev < test_sets.size(); ++sev) {
      for (const auto& r : runs) {
        const auto l = predict_logits(setup.graph, r.weights, test_sets[sev]);
        if (setup.combine == EnsembleCombine::probabilities) {
          probs[sev].push_back(softmax_rows(l));
        } else {
          logits[sev].push_back(l);
        }
      }
    }
    row.ece.assign(test_sets.size(), {});
    row.accuracy.assign(test_sets.size(), {});
    for (const auto& spec : row.ensembles) {
      std::vector<std::size_t> idx;
      for (const auto& id : spec.members) idx.push_back(std::find(pool.begin(), pool.end(), id) - pool.begin());
      for (std::size_t sev = 0; sev < test_sets.size(); ++sev) {
        Tensor<double> mean;
        for (auto i : idx) {
          Tensor<double> part;
          if (setup.combine == EnsembleCombine::probabilities) {
            part = probs[sev][i];
          } else {
            part = Tensor<double>(logits[sev][i].shape);
            std::copy(logits[sev][i].data.begin(), logits[sev][i].data.end(), part.data.begin());
          }
          if (mean.data.empty()) {
            mean = std::move(part);
          } else {
            for (std::size_t k = 0; k < mean.data.size(); ++k) mean.data[k] += part.data[k];
          }
        }
        for (auto& v : mean.data) v /= static_cast<double>(idx.size());
        const std::int64_t n = mean.shape[0], c = mean.shape[1];
        if (setup.combine == EnsembleCombine::logits) {
          for (std::int64_t r = 0; r < n; ++r) {
            double* row_p = mean.ptr() + r * c;
            const double mx = *std::max_element(row_p, row_p + c);
            double z = 0.0;
            for (std::int64_t j = 0; j < c; ++j) z += (row_p[j] = std::exp(row_p[j] - mx));
            for (std::int64_t j = 0; j < c; ++j) row_p[j] /= z;
          }
        }
        row.ece[sev].push_back(ece(mean, test_sets[sev].labels));
        std::int64_t hits = 0;
        for (std::int64_t r = 0; r < n; ++r) {
          const double* p = mean.ptr() + r * c;
          hits += (std::max_element(p, p + c) - p) == test_sets[sev].labels[r] ? 1 : 0;
        }
        row.accuracy[sev].push_back(static_cast<double>(hits) / static_cast<double>(n));
      }
    }
    for (std::size_t sev = 0; sev < test_sets.size(); ++sev) {
      row.median_ece.push_back(median(row.ece[sev]));
      row.median_accuracy.push_back(median(row.accuracy[sev]));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SimilarityRow> similarity_experiment(const EvalSetup& setup, const DatasetSplits& data,
                                                 const InitSources& sources, const RunStore& store) {
  std::vector<SimilarityRow> rows;
  for (auto m : setup.methods) {
    SimilarityRow row;
    row.method = m;
    const auto runs = run_population(setup, data, sources, store, m);
    std::vector<Tensor<float>> logits;
    for (const auto& r : runs) {
      row.runs.push_back(r.run_id);
      logits.push_back(predict_logits(setup.graph, r.weights, data.test));
    }
    row.agreement = similarity_from_logits(logits, SimilarityKind::prediction_agreement);
    row.cosine = similarity_from_logits(logits, SimilarityKind::logit_cosine);
    row.inits_identical = true;
    row.inits_all_differ = true;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      for (std::size_t j = i + 1; j < runs.size(); ++j) {
        const bool same = runs[i].init == runs[j].init;
        row.inits_identical = row.inits_identical && same;
        row.inits_all_differ = row.inits_all_differ && !same;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<TransferRow> transfer_experiment(const EvalSetup& setup, const DatasetSplits& small,
                                             const InitSources& sources) {
  std::vector<TransferRow> rows;
  for (auto m : setup.methods) {
    TransferRow row;
    row.method = m;
    for (auto seed : setup.seeds) {
      const auto init = make_init(m, setup.graph, seed, sources).weights;
      TrainConfig cfg = setup.train;
      cfg.seed = derive_seed(seed, 0x7a11);
      row.test_accuracy.push_back(transfer_eval(init, setup.graph, small.train, small.val, small.test, cfg));
    }
    row.median_accuracy = median(row.test_accuracy);
    rows.push_back(std::move(row));
  }
  return rows;
}

// ------------------------------------------------------------------- JSON

nlohmann::json to_json(const QuantileRow& q) {
  return {{"n", q.n},           {"median", q.median},           {"q1", q.q1},
          {"q3", q.q3},         {"whisker_low", q.whisker_low}, {"whisker_high", q.whisker_high},
          {"outliers", q.outliers}};
}

namespace {
nlohmann::json matrix_json(const SimilarityMatrix& m) {
  return {{"kind", similarity_kind_name(m.kind)}, {"values", m.values}, {"upper_mean", m.upper_mean}};
}
nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
}  // namespace

nlohmann::json to_json(const std::vector<ConvergenceRow>& rows, std::span<const double> thresholds) {
  nlohmann::json out;
  out["thresholds"] = std::vector<double>(thresholds.begin(), thresholds.end());
  out["methods"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j;
    j["method"] = method_name(r.method);
    j["steps_per_seed"] = nlohmann::json::array();
    for (const auto& s : r.per_seed) {
      nlohmann::json steps = nlohmann::json::array();
      for (const auto& t : s) steps.push_back(t.step ? nlohmann::json(*t.step) : nlohmann::json(nullptr));
      j["steps_per_seed"].push_back(steps);
    }
    j["median_steps"] = nlohmann::json::array();
    for (const auto& m : r.median_steps) j["median_steps"].push_back(optional_json(m));
    j["first_eval_accuracy"] = r.first_eval_accuracy;
    out["methods"].push_back(j);
  }
  return out;
}

nlohmann::json to_json(const std::vector<AccuracyRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"method", method_name(r.method)}, {"test_accuracy", r.test_accuracy},
                   {"quantiles", to_json(r.quantiles)}});
  }
  return {{"methods", out}};
}

nlohmann::json to_json(const std::vector<EnsembleRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json ens = nlohmann::json::array();
    for (const auto& e : r.ensembles) ens.push_back(e.members);
    out.push_back({{"method", method_name(r.method)},
                   {"ensembles", ens},
                   {"severities", {0, 1, 2, 3, 4, 5}},
                   {"ece", r.ece},
                   {"accuracy", r.accuracy},
                   {"median_ece", r.median_ece},
                   {"median_accuracy", r.median_accuracy}});
  }
  return {{"methods", out}};
}

nlohmann::json to_json(const std::vector<SimilarityRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"method", method_name(r.method)},
                   {"runs", r.runs},
                   {"prediction_agreement", matrix_json(r.agreement)},
                   {"logit_cosine", matrix_json(r.cosine)},
                   {"inits_identical", r.inits_identical},
                   {"inits_all_differ", r.inits_all_differ}});
  }
  return {{"methods", out}};
}

nlohmann::json to_json(const std::vector<TransferRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"method", method_name(r.method)},
                   {"test_accuracy", r.test_accuracy},
                   {"median_accuracy", r.median_accuracy}});
  }
  return {{"methods", out}};
}

}  // namespace initforge
