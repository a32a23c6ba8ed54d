#pragma once

// Recomputes k-means invariants from scratch: assignments by brute-force
// nearest centroid, centroids as plain member means, SSE trace order.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "encodenet/clustering.hpp"

namespace kmeans_oracle {

struct Verdict {
  bool sse_monotone = true;     // trace never increases
  bool fixed_point = true;      // reassignment changes nothing
  double centroid_error = 0.0;  // max |centroid - member mean|
  bool no_empty_cluster = true;
  bool ok(double tol = 1e-5) const { return sse_monotone && fixed_point && no_empty_cluster && centroid_error <= tol; }
};

inline Verdict check(const encodenet::FeatureMatrix& f, const encodenet::ClusterModel& m) {
  Verdict v;
  for (std::size_t i = 1; i < m.sse_trace.size(); ++i) {
    // relative slack for summation-order noise only
    if (m.sse_trace[i] > m.sse_trace[i - 1] * (1 + 1e-12) + 1e-12) v.sse_monotone = false;
  }
  const std::size_t k = static_cast<std::size_t>(m.k), d = f.cols;
  std::vector<double> sum(k * d, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < f.rows; ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(f.values[i * d + j]) - m.centroids[c * d + j];
        s += diff * diff;
      }
      if (s < best_d) {
        best_d = s;
        best = c;
      }
    }
    // A tie with the current owner is not a change.
    const auto own = static_cast<std::size_t>(m.assignments[i]);
    double own_d = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(f.values[i * d + j]) - m.centroids[own * d + j];
      own_d += diff * diff;
    }
    if (best != own && own_d > best_d * (1 + 1e-9) + 1e-12) v.fixed_point = false;
    ++count[own];
    for (std::size_t j = 0; j < d; ++j) sum[own * d + j] += f.values[i * d + j];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] == 0) {
      v.no_empty_cluster = false;
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) {
      const double mean = sum[c * d + j] / static_cast<double>(count[c]);
      v.centroid_error = std::max(v.centroid_error, std::abs(mean - m.centroids[c * d + j]));
    }
  }
  return v;
}

}  // namespace kmeans_oracle
