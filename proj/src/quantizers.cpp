#include "nq/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "nq/coding.hpp"

namespace nq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double nlog2n(double n) { return n > 0.0 ? n * std::log2(n) : 0.0; }

void check_lengths(std::span<const double> values, std::span<const double> curvature) {
  if (curvature.size() != values.size()) {
    throw std::invalid_argument("curvature length does not match parameter count");
  }
}

void check_assignment(std::size_t n, const Assignment& assignment, const Codebook& codebook) {
  if (assignment.size() != n) throw std::invalid_argument("assignment length mismatch");
  for (auto a : assignment) {
    if (a >= codebook.k()) throw std::out_of_range("assignment refers to a missing cluster");
  }
}

struct EngineMode {
  double lambda = 0.0;
  bool retire_empty = false;  // ECSQ: empty clusters leave the codebook
  bool normalized = false;    // report J = T / N instead of T
};

// Shared Lloyd-style iteration for the k-means variants and ECSQ. The running
// cost is T = sum_i h_i |w_i - c_a(i)|^2 + lambda * N * H; with lambda = 0 the
// entropy term is skipped entirely so the weighted k-means and ECSQ paths
// perform identical arithmetic.
class LloydEngine {
 public:
  LloydEngine(std::span<const double> values, std::span<const double> weights,
              std::vector<double> centers, const EngineMode& mode, const ClusterConfig& cfg)
      : values_(values),
        weights_(weights),
        mode_(mode),
        cfg_(cfg),
        centers_(std::move(centers)),
        counts_(centers_.size(), 0),
        active_(centers_.size(), true),
        log2p_(centers_.size(), -std::log2(static_cast<double>(centers_.size()))),
        assignment_(values.size(), 0) {}

  QuantizeResult run() {
    QuantizeResult out;
    double prev = kInf;
    bool first = true;
    while (out.iterations < cfg_.max_iters) {
      const bool changed = assign() || first;
      first = false;
      if (!mode_.retire_empty) out.reseeds += reseed_empty();
      update();
      double cost = total_cost();
      out.trace.push_back(report(cost));
      ++out.iterations;

      const bool stalled = !changed || cost == 0.0 || (prev - cost) <= cfg_.rel_tol * prev;
      prev = cost;
      if (!stalled) continue;
      if (out.iterations >= cfg_.max_iters) break;

      const std::size_t moves = refine(cost);
      if (moves == 0) {
        out.converged = true;
        break;
      }
      out.refinement_moves += moves;
      update();
      cost = total_cost();
      out.trace.push_back(report(cost));
      ++out.iterations;
      prev = cost;
    }
    out.assignment = std::move(assignment_);
    out.codebook = Codebook{std::move(centers_), std::move(counts_)};
    return out;
  }

 private:
  // Nearest center under d(i, j) = |w_i - c_j|^2 - (lambda / h_i) log2 p_j,
  // which has the same argmin as h_i |w_i - c_j|^2 - lambda log2 p_j.
  bool assign() {
    bool changed = false;
    const std::size_t k = centers_.size();
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double w = values_[i];
      const double rate = mode_.lambda > 0.0 ? mode_.lambda / weights_[i] : 0.0;
      std::uint32_t best = 0;
      double best_cost = kInf;
      for (std::size_t j = 0; j < k; ++j) {
        if (!active_[j]) continue;
        const double diff = w - centers_[j];
        double d = diff * diff;
        if (rate > 0.0) d -= rate * log2p_[j];
        if (d < best_cost) {
          best_cost = d;
          best = static_cast<std::uint32_t>(j);
        }
      }
      if (assignment_[i] != best) changed = true;
      assignment_[i] = best;
    }
    recount();
    return changed;
  }

  void recount() {
    std::fill(counts_.begin(), counts_.end(), 0);
    for (auto a : assignment_) ++counts_[a];
  }

  // Moves the worst-served parameter into each empty cluster.
  std::size_t reseed_empty() {
    std::size_t reseeded = 0;
    for (std::size_t j = 0; j < centers_.size(); ++j) {
      if (counts_[j] != 0) continue;
      std::size_t worst = values_.size();
      double worst_d = -1.0;
      for (std::size_t i = 0; i < values_.size(); ++i) {
        const auto a = assignment_[i];
        if (counts_[a] < 2) continue;
        const double diff = values_[i] - centers_[a];
        const double d = weights_[i] * diff * diff;
        if (d > worst_d) {
          worst_d = d;
          worst = i;
        }
      }
      if (worst == values_.size()) break;
      --counts_[assignment_[worst]];
      assignment_[worst] = static_cast<std::uint32_t>(j);
      counts_[j] = 1;
      centers_[j] = values_[worst];
      ++reseeded;
    }
    return reseeded;
  }

  void update() {
    const std::size_t k = centers_.size();
    std::vector<double> wsum(k, 0.0), msum(k, 0.0);
    recount();
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const auto a = assignment_[i];
      wsum[a] += weights_[i];
      msum[a] += weights_[i] * values_[i];
    }
    const double n = static_cast<double>(values_.size());
    for (std::size_t j = 0; j < k; ++j) {
      if (counts_[j] > 0) {
        centers_[j] = msum[j] / wsum[j];
        log2p_[j] = std::log2(static_cast<double>(counts_[j]) / n);
      } else if (mode_.retire_empty) {
        active_[j] = false;
      }
    }
  }

  double total_cost() const {
    double d = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double diff = values_[i] - centers_[assignment_[i]];
      d += weights_[i] * diff * diff;
    }
    if (mode_.lambda == 0.0) return d;
    const double n = static_cast<double>(values_.size());
    double nh = nlog2n(n);
    for (auto c : counts_) nh -= nlog2n(static_cast<double>(c));
    return d + mode_.lambda * nh;
  }

  double report(double cost) const {
    return mode_.normalized ? cost / static_cast<double>(values_.size()) : cost;
  }

  // Single-point moves with exact cost deltas (centers and proportions
  // recomputed). Returns the number of moves made.
  std::size_t refine(double cost) {
    if (cost <= 0.0) return 0;
    const std::size_t k = centers_.size();
    const double threshold = 1e-12 * cost;
    const bool may_empty = mode_.retire_empty && mode_.lambda > 0.0;

    std::vector<double> wsum(k, 0.0), msum(k, 0.0);
    for (std::size_t i = 0; i < values_.size(); ++i) {
      wsum[assignment_[i]] += weights_[i];
      msum[assignment_[i]] += weights_[i] * values_[i];
    }

    std::size_t moves = 0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const auto from = assignment_[i];
      const std::size_t n_from = counts_[from];
      if (n_from == 1 && !may_empty) continue;
      const double w = values_[i];
      const double h = weights_[i];

      double removal = 0.0;
      if (n_from > 1) {
        const double rest = std::max(wsum[from] - h, std::numeric_limits<double>::min());
        const double diff = w - centers_[from];
        removal = -h * wsum[from] / rest * diff * diff;
      }

      double best_delta = -threshold;
      std::size_t best = k;
      for (std::size_t j = 0; j < k; ++j) {
        if (j == from || !active_[j]) continue;
        if (counts_[j] == 0 && mode_.retire_empty) continue;
        double add = 0.0;
        if (counts_[j] > 0) {
          const double diff = w - centers_[j];
          add = h * wsum[j] / (wsum[j] + h) * diff * diff;
        }
        double delta = removal + add;
        if (mode_.lambda > 0.0) {
          const double nf = static_cast<double>(n_from);
          const double nt = static_cast<double>(counts_[j]);
          const double d_nlogn =
              nlog2n(nf - 1) - nlog2n(nf) + nlog2n(nt + 1) - nlog2n(nt);
          delta -= mode_.lambda * d_nlogn;
        }
        if (delta < best_delta) {
          best_delta = delta;
          best = j;
        }
      }
      if (best == k) continue;

      wsum[from] -= h;
      msum[from] -= h * w;
      --counts_[from];
      if (counts_[from] == 0) {
        wsum[from] = msum[from] = 0.0;
        if (mode_.retire_empty) active_[from] = false;
      } else {
        centers_[from] = msum[from] / wsum[from];
      }
      wsum[best] += h;
      msum[best] += h * w;
      ++counts_[best];
      centers_[best] = msum[best] / wsum[best];
      assignment_[i] = static_cast<std::uint32_t>(best);
      ++moves;
    }
    return moves;
  }

  std::span<const double> values_;
  std::span<const double> weights_;
  EngineMode mode_;
  ClusterConfig cfg_;
  std::vector<double> centers_;
  std::vector<std::size_t> counts_;
  std::vector<bool> active_;
  std::vector<double> log2p_;
  Assignment assignment_;
};

void require_nonempty(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("no parameters to quantize");
}

}  // namespace

std::size_t Codebook::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::size_t Codebook::effective_k() const {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
}

std::vector<double> Codebook::proportions() const {
  const double n = static_cast<double>(total());
  std::vector<double> p(counts.size(), 0.0);
  if (n == 0.0) return p;
  for (std::size_t j = 0; j < counts.size(); ++j) p[j] = static_cast<double>(counts[j]) / n;
  return p;
}

std::string to_string(InitMethod m) {
  switch (m) {
    case InitMethod::linspace: return "linspace";
    case InitMethod::quantile: return "quantile";
    case InitMethod::seeded_random: return "seeded_random";
  }
  return "unknown";
}

InitMethod init_method_from_string(const std::string& s) {
  if (s == "linspace") return InitMethod::linspace;
  if (s == "quantile") return InitMethod::quantile;
  if (s == "seeded_random" || s == "random") return InitMethod::seeded_random;
  throw std::invalid_argument("unknown init method '" + s + "'");
}

void ClusterConfig::validate() const {
  if (k == 0) throw std::invalid_argument("k must be at least 1");
  if (max_iters == 0) throw std::invalid_argument("max_iters must be at least 1");
  if (!(rel_tol > 0.0)) throw std::invalid_argument("rel_tol must be positive");
}

double msqe(std::span<const double> values, const Assignment& assignment, const Codebook& codebook) {
  check_assignment(values.size(), assignment, codebook);
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double diff = values[i] - codebook.centers[assignment[i]];
    sum += diff * diff;
  }
  return sum;
}

double hw_distortion(std::span<const double> values, std::span<const double> curvature,
                     const Assignment& assignment, const Codebook& codebook) {
  check_lengths(values, curvature);
  check_assignment(values.size(), assignment, codebook);
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double diff = values[i] - codebook.centers[assignment[i]];
    sum += curvature[i] * diff * diff;
  }
  return sum;
}

double lagrangian_cost(std::span<const double> values, std::span<const double> curvature,
                       const Assignment& assignment, const Codebook& codebook, double lambda) {
  const double d = hw_distortion(values, curvature, assignment, codebook);
  std::vector<std::size_t> counts(codebook.k(), 0);
  for (auto a : assignment) ++counts[a];
  return d / static_cast<double>(values.size()) + lambda * entropy_bits(counts);
}

std::vector<double> initial_centers(std::span<const double> values, const ClusterConfig& cfg) {
  cfg.validate();
  require_nonempty(values);
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  const std::size_t k = cfg.k;
  std::vector<double> centers(k);
  switch (cfg.init) {
    case InitMethod::linspace:
      if (k == 1) {
        centers[0] = 0.5 * (lo + hi);
      } else {
        for (std::size_t j = 0; j < k; ++j) {
          centers[j] = lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(k - 1);
        }
      }
      break;
    case InitMethod::quantile: {
      std::vector<double> sorted(values.begin(), values.end());
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t j = 0; j < k; ++j) {
        const double q = (static_cast<double>(j) + 0.5) / static_cast<double>(k);
        auto idx = static_cast<std::size_t>(q * static_cast<double>(sorted.size()));
        centers[j] = sorted[std::min(idx, sorted.size() - 1)];
      }
      break;
    }
    case InitMethod::seeded_random: {
      std::mt19937_64 rng(cfg.seed);
      std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
      for (auto& c : centers) c = values[pick(rng)];
      std::sort(centers.begin(), centers.end());
      break;
    }
  }
  return centers;
}

QuantizeResult kmeans_lloyd(std::span<const double> values, const ClusterConfig& cfg) {
  require_nonempty(values);
  const std::vector<double> ones(values.size(), 1.0);
  LloydEngine engine(values, ones, initial_centers(values, cfg), EngineMode{}, cfg);
  return engine.run();
}

QuantizeResult hw_kmeans_lloyd(std::span<const double> values, std::span<const double> curvature,
                               const ClusterConfig& cfg) {
  require_nonempty(values);
  check_lengths(values, curvature);
  LloydEngine engine(values, curvature, initial_centers(values, cfg), EngineMode{}, cfg);
  return engine.run();
}

QuantizeResult ecsq_iterate(std::span<const double> values, std::span<const double> curvature,
                            const EcsqConfig& cfg) {
  require_nonempty(values);
  check_lengths(values, curvature);
  if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) {
    throw std::invalid_argument("lambda must be a finite nonnegative number");
  }
  EngineMode mode{.lambda = cfg.lambda, .retire_empty = true, .normalized = true};
  LloydEngine engine(values, curvature, initial_centers(values, cfg.cluster), mode, cfg.cluster);
  return engine.run();
}

QuantizeResult uniform_quantize(std::span<const double> values,
                                std::optional<std::span<const double>> curvature, std::size_t k,
                                CenterRule rule) {
  require_nonempty(values);
  if (k == 0) throw std::invalid_argument("k must be at least 1");
  if (rule == CenterRule::hessian_weighted_mean) {
    if (!curvature) throw std::invalid_argument("Hessian-weighted centers need curvature");
    check_lengths(values, *curvature);
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;

  Assignment bins(values.size(), 0);
  std::size_t nbins = 1;
  if (hi > lo) {
    nbins = k;
    const double width = (hi - lo) / static_cast<double>(k);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto b = static_cast<std::size_t>(std::floor((values[i] - lo) / width));
      bins[i] = static_cast<std::uint32_t>(std::min(b, k - 1));
    }
  }

  std::vector<double> wsum(nbins, 0.0), msum(nbins, 0.0);
  std::vector<std::size_t> counts(nbins, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double h = rule == CenterRule::hessian_weighted_mean ? (*curvature)[i] : 1.0;
    wsum[bins[i]] += h;
    msum[bins[i]] += h * values[i];
    ++counts[bins[i]];
  }
  QuantizeResult out;
  out.assignment = std::move(bins);
  out.codebook.centers.resize(nbins, 0.0);
  out.codebook.counts = counts;
  for (std::size_t b = 0; b < nbins; ++b) {
    if (counts[b] > 0) out.codebook.centers[b] = msum[b] / wsum[b];
  }
  drop_empty_clusters(out.assignment, out.codebook);
  out.trace.push_back(rule == CenterRule::hessian_weighted_mean
                          ? hw_distortion(values, *curvature, out.assignment, out.codebook)
                          : msqe(values, out.assignment, out.codebook));
  out.iterations = 1;
  out.converged = true;
  return out;
}

double lambda_upper_bound(std::span<const double> values, std::span<const double> curvature) {
  require_nonempty(values);
  check_lengths(values, curvature);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  const double hmax = *std::max_element(curvature.begin(), curvature.end());
  return 10.0 * hmax * range * range;
}

LambdaSearchResult solve_lambda(std::span<const double> values, std::span<const double> curvature,
                                std::size_t k, double target_bits, const LambdaSearchOptions& opts) {
  if (!(target_bits > 0.0)) throw std::invalid_argument("entropy target must be positive");
  if (k == 0) throw std::invalid_argument("k must be at least 1");
  if (target_bits > std::log2(static_cast<double>(k)) + 1e-12) {
    throw std::invalid_argument("entropy target exceeds log2(k)");
  }
  EcsqConfig cfg{opts.cluster, 0.0};
  cfg.cluster.k = k;
  const double limit = target_bits + opts.tolerance;

  LambdaSearchResult best;
  double best_distortion = kInf;
  bool have_best = false;
  std::size_t evaluations = 0;

  // Runs ECSQ at lambda; records the result when feasible. Returns feasibility.
  auto evaluate = [&](double lambda) {
    cfg.lambda = lambda;
    QuantizeResult r = ecsq_iterate(values, curvature, cfg);
    ++evaluations;
    const double h = entropy_bits(r.codebook.counts);
    const bool feasible = h <= limit;
    if (feasible) {
      const double d = hw_distortion(values, curvature, r.assignment, r.codebook);
      if (!have_best || d < best_distortion) {
        best_distortion = d;
        best = LambdaSearchResult{lambda, std::move(r), h, true, 0};
        have_best = true;
      }
    }
    return std::pair{feasible, h};
  };

  if (evaluate(0.0).first) {
    best.evaluations = evaluations;
    return best;
  }
  const double upper = lambda_upper_bound(values, curvature);
  {
    cfg.lambda = upper;
    QuantizeResult r = ecsq_iterate(values, curvature, cfg);
    ++evaluations;
    const double h = entropy_bits(r.codebook.counts);
    if (h > limit) {
      return LambdaSearchResult{upper, std::move(r), h, false, evaluations};
    }
    best_distortion = hw_distortion(values, curvature, r.assignment, r.codebook);
    best = LambdaSearchResult{upper, std::move(r), h, true, 0};
    have_best = true;
  }

  // Geometric descent brackets the transition (lambda spans many decades),
  // then bisection refines it.
  double lo = 0.0;
  double hi = upper;
  while (evaluations < opts.max_evaluations) {
    const double probe = hi / 16.0;
    if (probe < upper * 1e-15) break;
    if (evaluate(probe).first) {
      hi = probe;
    } else {
      lo = probe;
      break;
    }
  }
  while (evaluations < opts.max_evaluations && hi - lo > 1e-9 * hi) {
    const double mid = 0.5 * (lo + hi);
    if (evaluate(mid).first) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  best.evaluations = evaluations;
  return best;
}

std::vector<double> dequantize(const Assignment& assignment, const Codebook& codebook) {
  std::vector<double> out(assignment.size());
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= codebook.k()) throw std::out_of_range("assignment refers to a missing cluster");
    out[i] = codebook.centers[assignment[i]];
  }
  return out;
}

void drop_empty_clusters(Assignment& assignment, Codebook& codebook) {
  std::vector<std::uint32_t> remap(codebook.k(), 0);
  Codebook compact;
  for (std::size_t j = 0; j < codebook.k(); ++j) {
    if (codebook.counts[j] == 0) continue;
    remap[j] = static_cast<std::uint32_t>(compact.centers.size());
    compact.centers.push_back(codebook.centers[j]);
    compact.counts.push_back(codebook.counts[j]);
  }
  for (auto& a : assignment) {
    if (a >= codebook.k()) throw std::out_of_range("assignment refers to a missing cluster");
    a = remap[a];
  }
  codebook = std::move(compact);
}

void round_centers(Codebook& codebook, unsigned bits) {
  if (bits == 64) return;
  if (bits != 32) throw std::invalid_argument("centers can be stored with 32 or 64 bits");
  for (auto& c : codebook.centers) c = static_cast<double>(static_cast<float>(c));
}

}  // namespace nq
