// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "initforge/errors.hpp"
#include "initforge/rng.hpp"

namespace initforge {

TrainResult train_from_init(const WeightSet& ws, const CompGraph& g, const TrainConfig& cfg,
                            const LabeledDataset& train, const LabeledDataset& val) {
  ws.check(g);
  return train_classifier(g, ws, cfg, train, val);
}

std::vector<ThresholdStep> steps_to_threshold(const Trajectory& t,
                                              std::span<const double> thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw std::invalid_argument("steps_to_threshold: thresholds must be sorted ascending");
  }
  std::vector<ThresholdStep> out;
  for (double th : thresholds) {
    ThresholdStep s{th, std::nullopt};
    for (const auto& p : t.points) {
      if (p.eval_index >= 1 && p.val_accuracy >= th) {
        s.step = p.eval_index;
        break;
      }
    }
    out.push_back(s);
  }
  return out;
}

namespace {

// Bucket i holds confidences in (i/s, (i+1)/s]; the ceil estimate is
// corrected against the exact boundary values.
int bucket_of(double p, int s) {
  int k = static_cast<int>(std::ceil(p * s)) - 1;
  k = std::clamp(k, 0, s - 1);
  while (k > 0 && p <= static_cast<double>(k) / s) --k;
  while (k < s - 1 && p > static_cast<double>(k + 1) / s) ++k;
  return k;
}

}  // namespace

CalibrationBins calibration_bins(const Tensor<double>& probs, std::span<const int> labels, int s) {
  if (s < 1) throw std::invalid_argument("ece: bucket count must be positive");
  if (probs.shape.size() != 2) throw std::invalid_argument("ece: probabilities must be N x C");
  const std::int64_t n = probs.shape[0], c = probs.shape[1];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw std::invalid_argument("ece: label count does not match probabilities");
  }
  CalibrationBins bins;
  bins.s = s;
  for (int i = 0; i <= s; ++i) bins.boundaries.push_back(static_cast<double>(i) / s);
  bins.count.assign(s, 0);
  std::vector<double> correct(s, 0.0), conf(s, 0.0);
  for (std::int64_t r = 0; r < n; ++r) {
    const double* row = probs.ptr() + r * c;
    double total = 0.0;
    for (std::int64_t j = 0; j < c; ++j) total += row[j];
    if (std::abs(total - 1.0) > 1e-6) {
      throw std::invalid_argument("ece: row " + std::to_string(r) + " does not sum to 1");
    }
    if (labels[r] < 0 || labels[r] >= c) {
      throw std::invalid_argument("ece: label " + std::to_string(labels[r]) + " out of range");
    }
    const auto pred = static_cast<int>(std::max_element(row, row + c) - row);
    const double p = row[pred];
    const int k = bucket_of(p, s);
    ++bins.count[k];
    conf[k] += p;
    correct[k] += pred == labels[r] ? 1.0 : 0.0;
  }
  bins.accuracy.assign(s, 0.0);
  bins.confidence.assign(s, 0.0);
  for (int k = 0; k < s; ++k) {
    if (bins.count[k] == 0) continue;
    bins.accuracy[k] = correct[k] / static_cast<double>(bins.count[k]);
    bins.confidence[k] = conf[k] / static_cast<double>(bins.count[k]);
  }
  return bins;
}

double ece(const Tensor<double>& probs, std::span<const int> labels, int s) {
  const auto bins = calibration_bins(probs, labels, s);
  const double n = static_cast<double>(labels.size());
  double out = 0.0;
  for (int k = 0; k < s; ++k) {
    if (bins.count[k] == 0) continue;
    out += static_cast<double>(bins.count[k]) / n * std::abs(bins.accuracy[k] - bins.confidence[k]);
  }
  return out;
}

Tensor<double> ensemble_predict(std::span<const WeightSet> members, const CompGraph& g,
                                const LabeledDataset& data, EnsembleCombine combine) {
  if (members.empty()) throw std::invalid_argument("ensemble_predict: no members");
  Tensor<double> acc;
  for (const auto& m : members) {
    m.check(g);
    const auto logits = predict_logits(g, m, data);
    Tensor<double> part;
    if (combine == EnsembleCombine::probabilities) {
      part = softmax_rows(logits);
    } else {
      part = Tensor<double>(logits.shape);
      std::copy(logits.data.begin(), logits.data.end(), part.data.begin());
    }
    if (acc.data.empty()) {
      acc = std::move(part);
    } else {
      for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += part.data[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto& v : acc.data) v *= inv;
  if (combine == EnsembleCombine::probabilities) return acc;
  // Softmax of the mean logits, in double.
  const std::int64_t n = acc.shape[0], c = acc.shape[1];
  for (std::int64_t r = 0; r < n; ++r) {
    double* row = acc.ptr() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::int64_t j = 0; j < c; ++j) row[j] /= z;
  }
  return acc;
}

std::vector<EnsembleSpec> sample_ensembles(const std::vector<std::string>& pool, int k, int n,
                                           std::uint64_t seed) {
  const std::set<std::string> distinct(pool.begin(), pool.end());
  if (distinct.size() != pool.size()) throw std::invalid_argument("sample_ensembles: duplicate run ids");
  if (k < 1 || n < 0) throw std::invalid_argument("sample_ensembles: k must be positive, n non-negative");
  if (static_cast<int>(pool.size()) < k) {
    throw std::invalid_argument("sample_ensembles: pool of " + std::to_string(pool.size()) +
                                " is smaller than ensemble size " + std::to_string(k));
  }
  auto rng = make_rng(seed, 0xe45e);
  std::vector<EnsembleSpec> out;
  std::vector<std::size_t> idx(pool.size());
  for (int e = 0; e < n; ++e) {
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates: the first k positions are a uniform k-subset.
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + k);
    std::sort(chosen.begin(), chosen.end());
    EnsembleSpec spec;
    spec.seed = seed;
    for (auto i : chosen) spec.members.push_back(pool[i]);
    out.push_back(std::move(spec));
  }
  return out;
}

double prediction_agreement(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw std::invalid_argument("prediction_agreement: length mismatch");
  if (a.empty()) throw std::invalid_argument("prediction_agreement: empty predictions");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double logit_cosine(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape != b.shape || a.shape.size() != 2 || a.shape[0] < 1) {
    throw std::invalid_argument("logit_cosine: logits must be matching N x C tensors");
  }
  const std::int64_t n = a.shape[0], c = a.shape[1];
  double total = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double x = a.data[r * c + j], y = b.data[r * c + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na > 1e-12 && nb > 1e-12) total += dot / (na * nb);
  }
  return total / static_cast<double>(n);
}

std::string similarity_kind_name(SimilarityKind kind) {
  return kind == SimilarityKind::logit_cosine ? "logit_cosine" : "prediction_agreement";
}

SimilarityMatrix similarity_from_logits(std::span<const Tensor<float>> logits, SimilarityKind kind) {
  const std::size_t m = logits.size();
  if (m < 2) throw std::invalid_argument("pairwise_similarity: need at least two models");
  std::vector<std::vector<int>> preds;
  if (kind == SimilarityKind::prediction_agreement) {
    for (const auto& l : logits) preds.push_back(argmax_rows(l));
  }
  SimilarityMatrix out;
  out.kind = kind;
  out.values.assign(m, std::vector<double>(m, 1.0));
  double sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const double v = kind == SimilarityKind::logit_cosine ? logit_cosine(logits[i], logits[j])
                                                            : prediction_agreement(preds[i], preds[j]);
      out.values[i][j] = out.values[j][i] = v;
      sum += v;
    }
  }
  out.upper_mean = sum / static_cast<double>(m * (m - 1) / 2);
  return out;
}

SimilarityMatrix pairwise_similarity(std::span<const WeightSet> models, const CompGraph& g,
                                     const LabeledDataset& data, SimilarityKind kind) {
  if (models.size() < 2) throw std::invalid_argument("pairwise_similarity: need at least two models");
  std::vector<Tensor<float>> logits;
  for (const auto& ws : models) {
    ws.check(g);
    logits.push_back(predict_logits(g, ws, data));
  }
  return similarity_from_logits(logits, kind);
}

namespace {

// Linear interpolation between order statistics at position q * (n - 1).
double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty sample");
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, 0.5);
}

QuantileRow quantile_row(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("quantile_row of an empty sample");
  std::sort(values.begin(), values.end());
  QuantileRow r;
  r.n = values.size();
  r.median = quantile_sorted(values, 0.5);
  r.q1 = quantile_sorted(values, 0.25);
  r.q3 = quantile_sorted(values, 0.75);
  const double iqr = r.q3 - r.q1;
  const double lo_fence = r.q1 - 1.5 * iqr, hi_fence = r.q3 + 1.5 * iqr;
  r.whisker_low = r.q1;
  r.whisker_high = r.q3;
  bool have_low = false;
  for (double v : values) {
    if (v < lo_fence || v > hi_fence) {
      r.outliers.push_back(v);
      continue;
    }
    if (!have_low) {
      r.whisker_low = std::min(v, r.q1);
      have_low = true;
    }
    r.whisker_high = std::max(v, r.q3);
  }
  return r;
}

// ------------------------------------------------------------- corruptions

std::string corruption_name(Corruption kind) {
  switch (kind) {
    case Corruption::gauss_noise:
      return "gauss_noise";
    case Corruption::blur:
      return "blur";
    case Corruption::contrast:
      return "contrast";
    case Corruption::pixelate:
      return "pixelate";
  }
  return {};
}

Corruption corruption_from_name(const std::string& name) {
  for (auto k : {Corruption::gauss_noise, Corruption::blur, Corruption::contrast, Corruption::pixelate}) {
    if (corruption_name(k) == name) return k;
  }
  throw ConfigError("corruption", "unknown corruption '" + name + "'");
}

double corruption_parameter(Corruption kind, int severity) {
  if (severity < 1 || severity > 5) throw std::invalid_argument("corruption severity must be in 1..5");
  static constexpr double kNoise[5] = {0.04, 0.08, 0.13, 0.19, 0.26};
  static constexpr double kBlur[5] = {0.5, 0.75, 1.0, 1.5, 2.0};
  static constexpr double kContrast[5] = {0.75, 0.5, 0.4, 0.3, 0.15};
  static constexpr double kPixelate[5] = {0.8, 0.6, 0.5, 0.4, 0.25};
  const int i = severity - 1;
  switch (kind) {
    case Corruption::gauss_noise:
      return kNoise[i];
    case Corruption::blur:
      return kBlur[i];
    case Corruption::contrast:
      return kContrast[i];
    case Corruption::pixelate:
      return kPixelate[i];
  }
  return 0.0;
}

namespace {

// Separable Gaussian blur of one H x W plane with reflected borders.
void blur_plane(float* plane, std::int64_t h, std::int64_t w, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double z = 0.0;
  for (int i = -radius; i <= radius; ++i) z += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= z;
  auto reflect = [](std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * plane[y * w + reflect(x + i, w)];
      tmp[y * w + x] = acc;
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[reflect(y + i, h) * w + x];
      plane[y * w + x] = static_cast<float>(acc);
    }
}

// Area-average down to round(f * size) cells, then nearest-neighbour back up.
void pixelate_plane(float* plane, std::int64_t h, std::int64_t w, double factor) {
  const std::int64_t mh = std::max<std::int64_t>(1, std::llround(factor * h));
  const std::int64_t mw = std::max<std::int64_t>(1, std::llround(factor * w));
  std::vector<double> sum(static_cast<std::size_t>(mh * mw), 0.0);
  std::vector<int> cnt(sum.size(), 0);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto cell = (y * mh / h) * mw + x * mw / w;
      sum[cell] += plane[y * w + x];
      ++cnt[cell];
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto cell = (y * mh / h) * mw + x * mw / w;
      plane[y * w + x] = static_cast<float>(sum[cell] / cnt[cell]);
    }
}

}  // namespace

LabeledDataset corrupt(const LabeledDataset& data, Corruption kind, int severity, std::uint64_t seed) {
  const double param = corruption_parameter(kind, severity);
  LabeledDataset out = data;
  const std::int64_t n = data.size(), c = data.channels(), h = data.height(), w = data.width();
  const std::int64_t hw = h * w;
  auto rng = make_rng(seed, 0xc0220000ULL + static_cast<std::uint64_t>(kind) * 8 + severity);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::int64_t i = 0; i < n; ++i) {
    float* img = out.images.ptr() + i * c * hw;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      float* plane = img + ch * hw;
      switch (kind) {
        case Corruption::gauss_noise:
          for (std::int64_t p = 0; p < hw; ++p) plane[p] = static_cast<float>(plane[p] + param * normal(rng));
          break;
        case Corruption::blur:
          blur_plane(plane, h, w, param);
          break;
        case Corruption::contrast: {
          const double m = std::accumulate(plane, plane + hw, 0.0) / static_cast<double>(hw);
          for (std::int64_t p = 0; p < hw; ++p) plane[p] = static_cast<float>((plane[p] - m) * param + m);
          break;
        }
        case Corruption::pixelate:
          pixelate_plane(plane, h, w, param);
          break;
      }
      for (std::int64_t p = 0; p < hw; ++p) plane[p] = std::clamp(plane[p], 0.0f, 1.0f);
    }
  }
  return out;
}

double mean_distortion(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.images.shape != b.images.shape) throw std::invalid_argument("mean_distortion: shape mismatch");
  const std::int64_t n = a.size(), per = a.images.numel() / std::max<std::int64_t>(n, 1);
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t p = 0; p < per; ++p) {
      const double d = a.images.data[i * per + p] - b.images.data[i * per + p];
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

// ---------------------------------------------------------------- transfer

bool is_class_balanced(const LabeledDataset& data) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(data.num_classes), 0);
  for (int l : data.labels) ++counts.at(l);
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  return *hi - *lo <= 1;
}

double transfer_eval(const WeightSet& init, const CompGraph& g, const LabeledDataset& small_train,
                     const LabeledDataset& val, const LabeledDataset& test, TrainConfig cfg) {
  if (!is_class_balanced(small_train)) {
    throw std::invalid_argument("transfer_eval: training set classes differ by more than one sample");
  }
  if (cfg.schedule.empty()) cfg.schedule = finetune_schedule();
  cfg.keep_best = false;
  const auto r = train_from_init(init, g, cfg, small_train, val);
  return evaluate_accuracy(g, r.weights, test);
}

}  // namespace initforge
