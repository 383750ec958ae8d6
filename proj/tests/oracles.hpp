#pragma once

// Brute-force reference computations for the test suites.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace oracle {

// Weighted distortion of a labeling with every center at its weighted mean,
// plus the entropy of the label histogram (empty labels contribute nothing).
struct PartitionCost {
  double distortion = 0.0;
  double entropy = 0.0;
};

inline PartitionCost partition_cost(std::span<const double> w, std::span<const double> h,
                                    const std::vector<std::uint32_t>& labels, std::size_t k) {
  std::vector<double> sw(k, 0.0), swx(k, 0.0);
  std::vector<std::size_t> n(k, 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    sw[labels[i]] += h[i];
    swx[labels[i]] += h[i] * w[i];
    ++n[labels[i]];
  }
  PartitionCost c;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double center = swx[labels[i]] / sw[labels[i]];
    c.distortion += h[i] * (w[i] - center) * (w[i] - center);
  }
  const double total = static_cast<double>(w.size());
  for (std::size_t j = 0; j < k; ++j) {
    if (n[j] == 0) continue;
    const double p = static_cast<double>(n[j]) / total;
    c.entropy -= p * std::log2(p);
  }
  return c;
}

// Calls fn on every labeling of n items with labels in [0, k).
inline void for_each_labeling(std::size_t n, std::size_t k,
                              const std::function<void(const std::vector<std::uint32_t>&)>& fn) {
  std::vector<std::uint32_t> labels(n, 0);
  while (true) {
    fn(labels);
    std::size_t i = 0;
    while (i < n && ++labels[i] == k) labels[i++] = 0;
    if (i == n) return;
  }
}

// Minimum of D (lambda == 0) or D/N + lambda H over all labelings.
inline double global_optimum(std::span<const double> w, std::span<const double> h, std::size_t k,
                             double lambda, bool normalized) {
  double best = std::numeric_limits<double>::infinity();
  for_each_labeling(w.size(), k, [&](const std::vector<std::uint32_t>& labels) {
    const auto c = partition_cost(w, h, labels, k);
    const double j = normalized ? c.distortion / static_cast<double>(w.size()) + lambda * c.entropy
                                : c.distortion;
    if (j < best) best = j;
  });
  return best;
}

// Minimum of sum_i counts_i * len_i over integer lengths in [1, k-1] with
// sum 2^-len_i <= 1 (k >= 2). Exhaustive; meant for k <= 6.
inline std::uint64_t optimal_prefix_cost(const std::vector<std::size_t>& counts) {
  const std::size_t k = counts.size();
  const unsigned max_len = static_cast<unsigned>(k - 1);
  std::vector<unsigned> len(k, 1);
  std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
  while (true) {
    double kraft = 0.0;
    std::uint64_t cost = 0;
    for (std::size_t i = 0; i < k; ++i) {
      kraft += std::ldexp(1.0, -static_cast<int>(len[i]));
      cost += counts[i] * len[i];
    }
    if (kraft <= 1.0 && cost < best) best = cost;
    std::size_t i = 0;
    while (i < k && ++len[i] > max_len) len[i++] = 1;
    if (i == k) return best;
  }
}

// Central finite-difference gradient of f at x.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const double up = f(x);
    x[i] = x0 - step;
    const double down = f(x);
    x[i] = x0;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// Second derivative of f along coordinate i by central differences of f.
inline double fd_second(const std::function<double(std::span<const double>)>& f, std::vector<double> x,
                        std::size_t i, double step) {
  const double x0 = x[i];
  const double mid = f(x);
  x[i] = x0 + step;
  const double up = f(x);
  x[i] = x0 - step;
  const double down = f(x);
  return (up - 2.0 * mid + down) / (step * step);
}

// True when no single parameter can move to another cluster and lower the
// objective (centers recomputed as weighted means). Moves that empty a
// cluster are considered only when allow_emptying is set; moves into empty
// clusters never are.
inline bool one_point_stable(std::span<const double> w, std::span<const double> h,
                             std::vector<std::uint32_t> labels, std::size_t k, double lambda, bool normalized,
                             bool allow_emptying, double rel_tol = 1e-9) {
  auto objective = [&](const std::vector<std::uint32_t>& l) {
    const auto c = partition_cost(w, h, l, k);
    return normalized ? c.distortion / static_cast<double>(w.size()) + lambda * c.entropy : c.distortion;
  };
  std::vector<std::size_t> counts(k, 0);
  for (auto l : labels) ++counts[l];
  const double base = objective(labels);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::uint32_t from = labels[i];
    if (counts[from] == 1 && !allow_emptying) continue;
    for (std::uint32_t to = 0; to < k; ++to) {
      if (to == from || counts[to] == 0) continue;
      labels[i] = to;
      const double moved = objective(labels);
      labels[i] = from;
      if (moved < base - rel_tol * std::abs(base) - 1e-15) return false;
    }
  }
  return true;
}

}  // namespace oracle
