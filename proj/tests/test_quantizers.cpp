#include <doctest.h>

#include <cmath>
#include <random>

#include "nq/coding.hpp"
#include "nq/quantizers.hpp"
#include "oracles.hpp"

using namespace nq;

namespace {

Codebook book(std::vector<double> centers, std::vector<std::size_t> counts) {
  return Codebook{std::move(centers), std::move(counts)};
}

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  return v;
}

std::vector<double> random_curvature(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.05, 5.0);
  std::vector<double> h(n);
  for (auto& x : h) x = u(rng);
  return h;
}

ClusterConfig with_k(std::size_t k) {
  ClusterConfig c;
  c.k = k;
  return c;
}

bool non_increasing(const std::vector<double>& trace) {
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace[i] > trace[i - 1] + 1e-12 * std::abs(trace[i - 1])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("msqe examples") {
  CHECK(msqe(std::vector<double>{1, 2, 3, 4}, {0, 0, 0, 0}, book({2.5}, {4})) == doctest::Approx(5.0));
  const std::vector<double> v{0.3, -1.0, 7.0};
  CHECK(msqe(v, {0, 1, 2}, book(v, {1, 1, 1})) == 0.0);
  CHECK(msqe(std::vector<double>{0, 0, 10, 10}, {0, 0, 1, 1}, book({0, 10}, {2, 2})) == 0.0);
}

TEST_CASE("hw_distortion examples") {
  const std::vector<double> v{0.5, -2.0, 3.0};
  const std::vector<double> ones(3, 1.0);
  const Assignment a{0, 1, 0};
  const Codebook cb = book({1.0, -1.0}, {2, 1});
  CHECK(hw_distortion(v, ones, a, cb) == doctest::Approx(msqe(v, a, cb)));
  CHECK(hw_distortion(std::vector<double>{0, 4}, std::vector<double>{1, 3}, {0, 0}, book({3}, {2})) ==
        doctest::Approx(12.0));
  CHECK(hw_distortion(v, std::vector<double>{2, 3, 4}, {0, 1, 2}, book(v, {1, 1, 1})) == 0.0);
}

TEST_CASE("lagrangian cost is D/N + lambda H") {
  const std::vector<double> v{0, 1, 9, 10};
  const std::vector<double> h{1, 1, 1, 1};
  const Codebook cb = book({0.5, 9.5}, {2, 2});
  CHECK(lagrangian_cost(v, h, {0, 0, 1, 1}, cb, 0.25) == doctest::Approx(1.0 / 4.0 + 0.25 * 1.0));
}

TEST_CASE("ClusterConfig validation") {
  ClusterConfig c;
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.k = 2;
  c.max_iters = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.max_iters = 10;
  c.rel_tol = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  EcsqConfig e{with_k(2), -1.0};
  CHECK_THROWS_AS(ecsq_iterate(std::vector<double>{1, 2}, std::vector<double>{1, 1}, e), std::invalid_argument);
}

TEST_CASE("initial centers") {
  const std::vector<double> v{4, 0, 2, 8};
  ClusterConfig c = with_k(3);
  CHECK(initial_centers(v, c) == std::vector<double>{0, 4, 8});
  c.k = 1;
  CHECK(initial_centers(v, c) == std::vector<double>{4});
  c.k = 2;
  c.init = InitMethod::quantile;
  const auto q = initial_centers(v, c);
  CHECK(q.size() == 2);
  CHECK(q[0] <= q[1]);
  c.init = InitMethod::seeded_random;
  c.seed = 5;
  CHECK(initial_centers(v, c) == initial_centers(v, c));
}

TEST_CASE("kmeans_lloyd examples") {
  SUBCASE("separable symmetric clusters") {
    const auto r = kmeans_lloyd(std::vector<double>{0, 0, 10, 10}, with_k(2));
    CHECK(r.codebook.centers == std::vector<double>{0, 10});
    CHECK(msqe(std::vector<double>{0, 0, 10, 10}, r.assignment, r.codebook) == 0.0);
  }
  SUBCASE("{0,1,9}") {
    const std::vector<double> v{0, 1, 9};
    const auto r = kmeans_lloyd(v, with_k(2));
    CHECK(r.assignment == Assignment{0, 0, 1});
    CHECK(r.codebook.centers[0] == doctest::Approx(0.5));
    CHECK(r.codebook.centers[1] == doctest::Approx(9.0));
    CHECK(msqe(v, r.assignment, r.codebook) == doctest::Approx(0.5));
    CHECK(oracle::global_optimum(v, std::vector<double>(3, 1.0), 2, 0.0, false) == doctest::Approx(0.5));
  }
  SUBCASE("k=1 gives the mean") {
    const auto r = kmeans_lloyd(std::vector<double>{1, 2, 6}, with_k(1));
    CHECK(r.codebook.centers[0] == doctest::Approx(3.0));
    CHECK(r.converged);
  }
}

TEST_CASE("hw_kmeans_lloyd examples") {
  SUBCASE("weighted mean for k=1") {
    const auto r = hw_kmeans_lloyd(std::vector<double>{0, 4}, std::vector<double>{1, 3}, with_k(1));
    CHECK(r.codebook.centers[0] == doctest::Approx(3.0));
  }
  SUBCASE("weighting breaks the plain tie") {
    const std::vector<double> v{-1, 0, 1};
    const std::vector<double> h{4, 1, 1};
    const auto r = hw_kmeans_lloyd(v, h, with_k(2));
    CHECK(r.assignment == Assignment{0, 1, 1});
    CHECK(r.codebook.centers[0] == doctest::Approx(-1.0));
    CHECK(r.codebook.centers[1] == doctest::Approx(0.5));
    CHECK(hw_distortion(v, h, r.assignment, r.codebook) == doctest::Approx(0.5));
    const Codebook other = book({-0.8, 1.0}, {2, 1});
    CHECK(hw_distortion(v, h, {0, 0, 1}, other) == doctest::Approx(0.8));
    CHECK(oracle::global_optimum(v, h, 2, 0.0, false) == doctest::Approx(0.5));
  }
  SUBCASE("constant curvature reproduces plain k-means") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
      const auto v = random_values(rng, 200);
      const std::vector<double> h(v.size(), 2.5);
      CHECK(hw_kmeans_lloyd(v, h, with_k(6)).assignment == kmeans_lloyd(v, with_k(6)).assignment);
    }
  }
}

TEST_CASE("uniform_quantize examples") {
  SUBCASE("two bins") {
    const auto r = uniform_quantize(std::vector<double>{0, 1, 2, 3}, std::nullopt, 2, CenterRule::mean);
    CHECK(r.assignment == Assignment{0, 0, 1, 1});
    CHECK(r.codebook.centers == std::vector<double>{0.5, 2.5});
  }
  SUBCASE("k=1 is the mean") {
    const auto r = uniform_quantize(std::vector<double>{1, 2, 6}, std::nullopt, 1, CenterRule::mean);
    CHECK(r.codebook.k() == 1);
    CHECK(r.codebook.centers[0] == doctest::Approx(3.0));
  }
  SUBCASE("empty bins are removed") {
    const auto r = uniform_quantize(std::vector<double>{0, 0, 0, 4}, std::nullopt, 4, CenterRule::mean);
    CHECK(r.codebook.k() == 2);
    CHECK(r.codebook.effective_k() == 2);
    CHECK(r.assignment == Assignment{0, 0, 0, 1});
    CHECK(r.codebook.centers == std::vector<double>{0, 4});
  }
  SUBCASE("degenerate range") {
    const auto r = uniform_quantize(std::vector<double>{2, 2, 2}, std::nullopt, 5, CenterRule::mean);
    CHECK(r.codebook.k() == 1);
    CHECK(r.codebook.centers[0] == 2.0);
  }
  SUBCASE("Hessian-weighted centers") {
    const std::vector<double> h{1, 3, 1, 1};
    const auto r = uniform_quantize(std::vector<double>{0, 1, 2, 3}, std::span<const double>(h), 2,
                                    CenterRule::hessian_weighted_mean);
    CHECK(r.codebook.centers[0] == doctest::Approx(0.75));
    CHECK(r.codebook.centers[1] == doctest::Approx(2.5));
  }
  SUBCASE("weighted rule without curvature") {
    CHECK_THROWS_AS(uniform_quantize(std::vector<double>{0, 1}, std::nullopt, 2, CenterRule::hessian_weighted_mean),
                    std::invalid_argument);
  }
}

TEST_CASE("ecsq_iterate examples") {
  SUBCASE("lambda 0 follows Hessian-weighted Lloyd") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 20; ++t) {
      const auto v = random_values(rng, 150);
      const auto h = random_curvature(rng, 150);
      const auto hw = hw_kmeans_lloyd(v, h, with_k(5));
      if (hw.reseeds > 0) continue;
      CHECK(ecsq_iterate(v, h, EcsqConfig{with_k(5), 0.0}).assignment == hw.assignment);
    }
  }
  SUBCASE("huge lambda collapses to one cluster") {
    const std::vector<double> v{0, 1, 9};
    const std::vector<double> h(3, 1.0);
    const auto r = ecsq_iterate(v, h, EcsqConfig{with_k(3), 1e6 * 81.0});
    CHECK(r.codebook.effective_k() == 1);
    CHECK(entropy_bits(r.codebook) == 0.0);
    // The enumerated optimum is the single cluster as well.
    const auto single = oracle::partition_cost(v, h, {0, 0, 0}, 3);
    CHECK(oracle::global_optimum(v, h, 3, 1e6 * 81.0, true) == doctest::Approx(single.distortion / 3.0));
  }
  SUBCASE("small instances stay above the enumerated optimum") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 25; ++t) {
      const std::size_t n = 4 + rng() % 7;
      const std::size_t k = 2 + rng() % 2;
      const auto v = random_values(rng, n);
      const auto h = random_curvature(rng, n);
      const double lambda = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
      const auto r = ecsq_iterate(v, h, EcsqConfig{with_k(k), lambda});
      const double j = lagrangian_cost(v, h, r.assignment, r.codebook, lambda);
      CHECK(j >= oracle::global_optimum(v, h, k, lambda, true) - 1e-12);
      CHECK(j == doctest::Approx(r.trace.back()).epsilon(1e-9));
    }
  }
  SUBCASE("retired clusters stay empty") {
    std::mt19937_64 rng(13);
    const auto v = random_values(rng, 300);
    const auto h = random_curvature(rng, 300);
    const auto r = ecsq_iterate(v, h, EcsqConfig{with_k(16), 0.2});
    CHECK(r.codebook.k() == 16);
    CHECK(r.codebook.effective_k() < 16);
    CHECK(r.codebook.total() == 300);
  }
}

TEST_CASE("solve_lambda examples") {
  std::mt19937_64 rng(21);
  std::vector<double> v;
  std::normal_distribution<double> left(-1.0, 0.2), right(1.5, 0.3);
  for (int i = 0; i < 600; ++i) v.push_back(i % 3 == 0 ? right(rng) : left(rng));
  const std::vector<double> h(v.size(), 1.0);

  SUBCASE("log2 k target is met at lambda 0") {
    const auto s = solve_lambda(v, h, 8, 3.0);
    CHECK(s.target_met);
    CHECK(s.lambda == 0.0);
    CHECK(s.evaluations == 1);
  }
  SUBCASE("tiny target collapses") {
    const auto s = solve_lambda(v, h, 8, 0.0001);
    CHECK(s.target_met);
    CHECK(s.entropy <= 0.05);
  }
  SUBCASE("mid-range target on a bimodal source") {
    const auto s = solve_lambda(v, h, 8, 1.5);
    CHECK(s.target_met);
    CHECK(s.entropy >= 1.45);
    CHECK(s.entropy <= 1.55);
    CHECK(entropy_bits(s.result.codebook) == doctest::Approx(s.entropy));
  }
  SUBCASE("invalid targets") {
    CHECK_THROWS_AS(solve_lambda(v, h, 8, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(solve_lambda(v, h, 8, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(solve_lambda(v, h, 8, 3.5), std::invalid_argument);
  }
}

TEST_CASE("dequantize") {
  CHECK(dequantize({0, 1, 0}, book({2.0, -1.0}, {2, 1})) == std::vector<double>{2.0, -1.0, 2.0});
  const std::vector<double> v{3.0, -4.5, 0.25};
  CHECK(dequantize({0, 1, 2}, book(v, {1, 1, 1})) == v);
  CHECK(dequantize({}, book({1.0}, {0})).empty());
  CHECK_THROWS_AS(dequantize({0, 2}, book({1.0, 2.0}, {1, 1})), std::out_of_range);
}

TEST_CASE("drop_empty_clusters and round_centers") {
  Assignment a{2, 0, 2};
  Codebook cb = book({1.0, 5.0, 0.1}, {1, 0, 2});
  drop_empty_clusters(a, cb);
  CHECK(a == Assignment{1, 0, 1});
  CHECK(cb.centers == std::vector<double>{1.0, 0.1});
  CHECK(cb.counts == std::vector<std::size_t>{1, 2});
  round_centers(cb, 32);
  CHECK(cb.centers[1] == static_cast<double>(0.1f));
  CHECK_THROWS_AS(round_centers(cb, 16), std::invalid_argument);
}

TEST_CASE("codebook proportions sum to one") {
  const Codebook cb = book({0, 1, 2}, {3, 0, 7});
  const auto p = cb.proportions();
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cb.effective_k() == 2);
  CHECK(cb.total() == 10);
}

TEST_CASE("property: objectives never increase and fixed points are stable") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 10 + rng() % 200;
    const std::size_t k = 2 + rng() % 6;
    const auto v = random_values(rng, n);
    const auto h = random_curvature(rng, n);
    const std::vector<double> ones(n, 1.0);

    const auto km = kmeans_lloyd(v, with_k(k));
    CHECK(non_increasing(km.trace));
    CHECK(km.converged);
    CHECK(oracle::one_point_stable(v, ones, km.assignment, k, 0.0, false, false));

    const auto hw = hw_kmeans_lloyd(v, h, with_k(k));
    CHECK(non_increasing(hw.trace));
    CHECK(oracle::one_point_stable(v, h, hw.assignment, k, 0.0, false, false));

    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto ec = ecsq_iterate(v, h, EcsqConfig{with_k(k), lambda});
    CHECK(non_increasing(ec.trace));
    CHECK(oracle::one_point_stable(v, h, ec.assignment, k, lambda, true, lambda > 0.0));
  }
}

TEST_CASE("property: perturbing a converged center never helps") {
  std::mt19937_64 rng(37);
  for (int t = 0; t < 20; ++t) {
    const auto v = random_values(rng, 120);
    const auto h = random_curvature(rng, 120);
    const auto r = hw_kmeans_lloyd(v, h, with_k(4));
    const double range = *std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end());
    const double base = hw_distortion(v, h, r.assignment, r.codebook);
    for (std::size_t j = 0; j < r.codebook.k(); ++j) {
      for (double sign : {-1.0, 1.0}) {
        Codebook moved = r.codebook;
        moved.centers[j] += sign * 1e-3 * range;
        CHECK(hw_distortion(v, h, r.assignment, moved) >= base);
      }
    }
  }
}

TEST_CASE("property: scaling the data scales k-means centers") {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 10; ++t) {
    const auto v = random_values(rng, 100);
    std::vector<double> scaled(v);
    for (auto& x : scaled) x *= 4.0;  // power of two keeps the arithmetic exact
    const auto a = kmeans_lloyd(v, with_k(5));
    const auto b = kmeans_lloyd(scaled, with_k(5));
    CHECK(a.assignment == b.assignment);
    for (std::size_t j = 0; j < a.codebook.k(); ++j) {
      CHECK(b.codebook.centers[j] == doctest::Approx(4.0 * a.codebook.centers[j]));
    }
  }
}

TEST_CASE("property: k = N distinct values quantize exactly") {
  const std::vector<double> v{0.5, -2.0, 3.25, 7.0, 1.0};
  ClusterConfig c = with_k(5);
  const auto r = kmeans_lloyd(v, c);
  CHECK(dequantize(r.assignment, r.codebook) == v);
}
