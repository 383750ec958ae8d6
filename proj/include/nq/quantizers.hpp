#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nq {

// Cluster index of every quantized parameter.
using Assignment = std::vector<std::uint32_t>;

// Cluster centers and member counts. A zero count marks an empty (or retired)
// cluster.
struct Codebook {
  std::vector<double> centers;
  std::vector<std::size_t> counts;

  std::size_t k() const { return centers.size(); }
  std::size_t total() const;
  std::size_t effective_k() const;
  std::vector<double> proportions() const;
};

enum class InitMethod { linspace, quantile, seeded_random };

std::string to_string(InitMethod m);
InitMethod init_method_from_string(const std::string& s);

struct ClusterConfig {
  std::size_t k = 8;
  InitMethod init = InitMethod::linspace;
  std::size_t max_iters = 200;
  double rel_tol = 1e-7;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EcsqConfig {
  ClusterConfig cluster;
  double lambda = 0.0;  // bits-to-distortion exchange rate
};

struct QuantizeResult {
  Assignment assignment;
  Codebook codebook;
  // Objective after every iteration: MSQE for k-means, Hessian-weighted
  // distortion for the weighted variant, J = D/N + lambda*H for ECSQ.
  std::vector<double> trace;
  std::size_t iterations = 0;
  std::size_t reseeds = 0;        // Lloyd variants: emptied clusters re-seeded
  std::size_t refinement_moves = 0;  // single-point moves after Lloyd convergence
  bool converged = false;
};

// Sum over parameters of |w - c|^2 (not normalized).
double msqe(std::span<const double> values, const Assignment& assignment, const Codebook& codebook);

// Sum over parameters of h_i |w - c|^2 (the constant 1/2 is omitted).
double hw_distortion(std::span<const double> values, std::span<const double> curvature,
                     const Assignment& assignment, const Codebook& codebook);

// J = D/N + lambda * H with D the Hessian-weighted distortion and H the entropy
// of the cluster proportions.
double lagrangian_cost(std::span<const double> values, std::span<const double> curvature,
                       const Assignment& assignment, const Codebook& codebook, double lambda);

// Starting centers for the iterative quantizers.
std::vector<double> initial_centers(std::span<const double> values, const ClusterConfig& cfg);

// Lloyd iterations (nearest center, ties to the lowest index; arithmetic-mean
// centers) followed by single-point refinement until no move of one parameter
// to another cluster lowers the objective. Emptied clusters are re-seeded at
// the parameter with the largest distortion.
QuantizeResult kmeans_lloyd(std::span<const double> values, const ClusterConfig& cfg);

// As kmeans_lloyd with distortion h_i |w_i - c_j|^2 and Hessian-weighted means.
QuantizeResult hw_kmeans_lloyd(std::span<const double> values, std::span<const double> curvature,
                               const ClusterConfig& cfg);

enum class CenterRule { mean, hessian_weighted_mean };

// k equal-width bins over [min, max]; centers per `rule`. Empty bins are
// dropped, so codebook.k() may be smaller than k.
QuantizeResult uniform_quantize(std::span<const double> values,
                                std::optional<std::span<const double>> curvature, std::size_t k,
                                CenterRule rule);

// Entropy-constrained iterative quantizer. Each parameter goes to the cluster
// minimizing h_i |w_i - c_j|^2 - lambda log2 p_j; centers are Hessian-weighted
// means and p_j = |C_j| / N. Clusters that empty are retired for good.
QuantizeResult ecsq_iterate(std::span<const double> values, std::span<const double> curvature,
                            const EcsqConfig& cfg);

struct LambdaSearchOptions {
  ClusterConfig cluster;  // cluster.k is overridden by the k argument
  double tolerance = 0.05;  // accepted entropy excess over the target, bits
  std::size_t max_evaluations = 60;
};

struct LambdaSearchResult {
  double lambda = 0.0;
  QuantizeResult result;
  double entropy = 0.0;
  bool target_met = false;
  std::size_t evaluations = 0;
};

// Upper end of the lambda search: 10 * max(h) * range^2.
double lambda_upper_bound(std::span<const double> values, std::span<const double> curvature);

// Searches lambda in [0, lambda_upper_bound] for the lowest-distortion ECSQ
// solution whose entropy is at most target_bits + tolerance. When even the upper
// bound misses the target, returns that endpoint with target_met = false.
LambdaSearchResult solve_lambda(std::span<const double> values, std::span<const double> curvature,
                                std::size_t k, double target_bits,
                                const LambdaSearchOptions& opts = {});

// w_i = c_{assignment(i)}.
std::vector<double> dequantize(const Assignment& assignment, const Codebook& codebook);

// Drops zero-count clusters and renumbers the assignment (order preserved).
void drop_empty_clusters(Assignment& assignment, Codebook& codebook);

// Rounds centers to the precision they are stored with (32 or 64 bits).
void round_centers(Codebook& codebook, unsigned bits);

}  // namespace nq
