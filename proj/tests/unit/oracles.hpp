// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Independent brute-force reference implementations shared by the unit tests
// and the acceptance binary. They favour directness over speed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "initforge/tensor.hpp"

namespace initforge::testing {

// Expected calibration error computed bucket by bucket: for every bucket
// (i/s, (i+1)/s] scan all samples, then weight |accuracy - confidence| by the
// bucket's share of samples.
inline double brute_force_ece(const Tensor<double>& probs, const std::vector<int>& labels, int s) {
  const std::int64_t n = probs.shape[0], c = probs.shape[1];
  double total = 0.0;
  for (int i = 0; i < s; ++i) {
    const double lo = static_cast<double>(i) / s, hi = static_cast<double>(i + 1) / s;
    std::int64_t count = 0;
    double hits = 0.0, conf = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
      int pred = 0;
      for (std::int64_t j = 1; j < c; ++j)
        if (probs.data[r * c + j] > probs.data[r * c + pred]) pred = static_cast<int>(j);
      const double p = probs.data[r * c + pred];
      if (!(p > lo && p <= hi)) continue;
      ++count;
      conf += p;
      if (pred == labels[r]) hits += 1.0;
    }
    if (count == 0) continue;
    const double acc = hits / count, mean_conf = conf / count;
    total += static_cast<double>(count) / n * std::abs(acc - mean_conf);
  }
  return total;
}

struct PredictionSet {
  Tensor<double> probs;
  std::vector<int> labels;
};

// N <= 500, C in [2, 10]. A third of the sets use probabilities on a 1/20
// grid, so confidences often land exactly on bucket boundaries.
inline PredictionSet random_prediction_set(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick_n(1, 500), pick_c(2, 10);
  const int n = pick_n(rng), c = pick_c(rng);
  const int mode = static_cast<int>(rng() % 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> temp(0.1, 5.0);
  PredictionSet out{Tensor<double>({n, c}), std::vector<int>(n)};
  for (int r = 0; r < n; ++r) {
    double* row = out.probs.ptr() + static_cast<std::int64_t>(r) * c;
    if (mode == 0) {
      // Grid probabilities: 20 units spread over the classes.
      std::vector<int> units(c, 0);
      for (int u = 0; u < 20; ++u) ++units[rng() % c];
      for (int j = 0; j < c; ++j) row[j] = units[j] / 20.0;
    } else {
      const double t = temp(rng);
      double z = 0.0;
      for (int j = 0; j < c; ++j) z += (row[j] = std::exp(normal(rng) * t));
      for (int j = 0; j < c; ++j) row[j] /= z;
    }
    out.labels[r] = static_cast<int>(rng() % c);
  }
  return out;
}

// Index of the nearest row of `codebook` (K x D) to `z` by full Euclidean
// distance, lowest index on ties.
inline int brute_force_nearest(const double* z, const Tensor<double>& codebook) {
  const std::int64_t k = codebook.shape[0], d = codebook.shape[1];
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < k; ++i) {
    double dist = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = z[j] - codebook.data[i * d + j];
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Inverse standard normal CDF: rational approximation refined by one Halley
// step, accurate to double rounding for u in (0, 1).
inline double normal_quantile(double u) {
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00, 2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  double x;
  if (u < 0.02425) {
    const double q = std::sqrt(-2 * std::log(u));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (u > 1 - 0.02425) {
    const double q = std::sqrt(-2 * std::log(1 - u));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else {
    const double q = u - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - u;
  const double g = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - g / (1 + x * g / 2);
}

// Monte Carlo estimate of KL(q || p) for diagonal Gaussians from `samples`
// draws of q: the sample mean of log q(x) - log p(x). Draws are Latin
// hypercube stratified per dimension, which keeps the estimator unbiased and
// removes most of its variance because the log ratio is a sum over
// dimensions.
inline double monte_carlo_kl(const std::vector<double>& mq, const std::vector<double>& lvq,
                             const std::vector<double>& mp, const std::vector<double>& lvp,
                             int samples, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t d = mq.size();
  std::vector<std::vector<int>> strata(d, std::vector<int>(samples));
  for (auto& perm : strata) {
    for (int s = 0; s < samples; ++s) perm[s] = s;
    std::shuffle(perm.begin(), perm.end(), rng);
  }
  double total = 0.0;
  for (int s = 0; s < samples; ++s) {
    double log_ratio = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double u = (strata[i][s] + unit(rng)) / samples;
      u = std::clamp(u, 1e-300, 1.0 - 1e-16);
      const double eps = normal_quantile(u);
      const double sq = std::exp(0.5 * lvq[i]), sp = std::exp(0.5 * lvp[i]);
      const double x = mq[i] + sq * eps;
      const double zp = (x - mp[i]) / sp;
      log_ratio += -0.5 * eps * eps - std::log(sq) + 0.5 * zp * zp + std::log(sp);
    }
    total += log_ratio;
  }
  return total / samples;
}

}  // namespace initforge::testing
