#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "nq/coding.hpp"
#include "nq/error.hpp"
#include "oracles.hpp"

using namespace nq;

namespace {

std::uint64_t weighted_length(const PrefixCode& code, const std::vector<std::size_t>& counts) {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) s += counts[i] * code.lengths[i];
  return s;
}

struct RandomModel {
  Assignment assignment;
  Codebook codebook;
};

RandomModel random_model(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  RandomModel m;
  // Skewed cluster distribution so Huffman lengths differ.
  std::vector<double> weights(k);
  for (auto& w : weights) w = std::exp(std::normal_distribution<double>(0.0, 1.5)(rng));
  std::discrete_distribution<std::uint32_t> pick(weights.begin(), weights.end());
  m.codebook.centers.resize(k);
  m.codebook.counts.assign(k, 0);
  for (std::size_t j = 0; j < k; ++j) m.codebook.centers[j] = static_cast<float>(std::normal_distribution<double>()(rng));
  m.assignment.resize(n);
  for (auto& a : m.assignment) {
    a = pick(rng);
    ++m.codebook.counts[a];
  }
  return m;
}

}  // namespace

TEST_CASE("entropy examples") {
  CHECK(entropy_bits(std::vector<std::size_t>{250, 250, 250, 250}) == doctest::Approx(2.0));
  CHECK(entropy_bits(std::vector<std::size_t>{1000}) == 0.0);
  CHECK(entropy_bits(std::vector<std::size_t>{3, 1}) == doctest::Approx(0.811278).epsilon(1e-6));
  CHECK(entropy_bits(std::vector<std::size_t>{5, 0, 5}) == doctest::Approx(1.0));
}

TEST_CASE("build_huffman examples") {
  SUBCASE("dyadic") {
    const std::vector<std::size_t> c{2, 1, 1};
    const auto code = build_huffman(c);
    CHECK(code.lengths == std::vector<std::uint8_t>{1, 2, 2});
    CHECK(code.average_length(c) == doctest::Approx(1.5));
    CHECK(code.average_length(c) == doctest::Approx(entropy_bits(c)));
  }
  SUBCASE("0.4 0.3 0.2 0.1") {
    const std::vector<std::size_t> c{4, 3, 2, 1};
    const auto code = build_huffman(c);
    CHECK(code.lengths == std::vector<std::uint8_t>{1, 2, 3, 3});
    CHECK(code.average_length(c) == doctest::Approx(1.9));
    CHECK(entropy_bits(c) == doctest::Approx(1.8464).epsilon(1e-4));
  }
  SUBCASE("one symbol") {
    const auto code = build_huffman(std::vector<std::size_t>{7});
    CHECK(code.lengths == std::vector<std::uint8_t>{1});
  }
  SUBCASE("zero counts get no codeword") {
    const auto code = build_huffman(std::vector<std::size_t>{5, 0, 3});
    CHECK(code.lengths[1] == 0);
    CHECK(code.lengths[0] == 1);
    CHECK(code.lengths[2] == 1);
  }
  SUBCASE("canonical ordering") {
    const auto code = build_huffman(std::vector<std::size_t>{1, 1, 2});
    CHECK(code.lengths == std::vector<std::uint8_t>{2, 2, 1});
    CHECK(code.codewords[2] == 0b0);
    CHECK(code.codewords[0] == 0b10);
    CHECK(code.codewords[1] == 0b11);
    CHECK(code.is_prefix_free());
  }
}

TEST_CASE("fixed_length_code examples") {
  CHECK(fixed_length_code(4).lengths == std::vector<std::uint8_t>(4, 2));
  CHECK(fixed_length_code(5).lengths == std::vector<std::uint8_t>(5, 3));
  CHECK(fixed_length_code(1).lengths == std::vector<std::uint8_t>{1});
  CHECK(fixed_length_code(8).lengths == std::vector<std::uint8_t>(8, 3));
  CHECK(fixed_length_code(9).kraft_sum() <= 1.0);
  CHECK_THROWS_AS(fixed_length_code(0), std::invalid_argument);
}

TEST_CASE("bit writer and reader") {
  BitWriter w;
  w.write(0b101, 3);
  w.write(0xABCD, 16);
  w.write(1, 1);
  CHECK(w.bit_count() == 20);
  const auto bytes = w.finish();
  CHECK(bytes.size() == 3);
  CHECK(bytes[0] == 0b10110101);
  BitReader r(bytes, 20);
  CHECK(r.read(3) == 0b101);
  CHECK(r.read(16) == 0xABCD);
  CHECK(r.read_bit());
  CHECK(r.remaining() == 0);
  CHECK_THROWS_AS(r.read(1), FormatError);
}

TEST_CASE("encode_assignments examples") {
  SUBCASE("payload is the sum of codeword lengths") {
    const Codebook cb{{1.0, 2.0}, {2, 1}};
    const auto code = canonical_code({1, 2}, CodeScheme::huffman);
    const auto em = encode_assignments({0, 0, 1}, cb, code);
    CHECK(em.breakdown.payload_bits == 4);
    CHECK(em.breakdown.codeword_table_bits == 3);
    CHECK(em.breakdown.center_bits == 64);
  }
  SUBCASE("N=1000 fixed k=4") {
    Assignment a(1000);
    Codebook cb{{-1.5, -0.5, 0.5, 1.5}, {250, 250, 250, 250}};
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<std::uint32_t>(i % 4);
    const auto em = encode_assignments(a, cb, fixed_length_code(4));
    CHECK(em.breakdown.payload_bits == 2000);
    CHECK(em.breakdown.ratio_denominator_bits() == 2136);
    CHECK(compression_ratio_exact(1000, 32, cb.counts, fixed_length_code(4)) == doctest::Approx(14.981).epsilon(1e-4));
    const auto back = decode_assignments(em);
    CHECK(back.assignment == a);
    CHECK(back.codebook.centers == cb.centers);
  }
  SUBCASE("cluster without codeword") {
    const Codebook cb{{1.0, 2.0}, {1, 1}};
    PrefixCode code = canonical_code({1, 0}, CodeScheme::huffman);
    CHECK_THROWS_AS(encode_assignments({0, 1}, cb, code), std::invalid_argument);
  }
}

TEST_CASE("decode_assignments rejects malformed input") {
  const Codebook cb{{0.25, -4.0, 9.0}, {3, 2, 1}};
  const Assignment a{0, 1, 0, 2, 1, 0};
  const auto em = encode_assignments(a, cb, build_huffman(cb));

  SUBCASE("truncated by one bit") {
    EncodedModel cut = em;
    cut.total_bits -= 1;
    CHECK_THROWS_AS(decode_assignments(cut), FormatError);
  }
  SUBCASE("truncated by one byte") {
    std::vector<std::uint8_t> bytes(em.bytes.begin(), em.bytes.end() - 1);
    CHECK_THROWS_AS(decode_assignments(bytes), FormatError);
  }
  SUBCASE("bad magic") {
    auto bytes = em.bytes;
    bytes[0] ^= 0xFF;
    CHECK_THROWS_AS(decode_assignments(bytes), FormatError);
  }
  SUBCASE("header k = 0") {
    BitWriter w;
    w.write(0x4E513031, 32);
    w.write(1, 8);
    w.write(32, 8);
    w.write(0, 32);
    w.write(0, 32);
    w.write(0, 8);
    CHECK_THROWS_AS(decode_assignments(w.finish()), FormatError);
  }
  SUBCASE("trailing garbage") {
    auto bytes = em.bytes;
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_assignments(bytes), FormatError);
  }
  SUBCASE("pattern that matches no codeword") {
    // Lengths {2, 2} leave 10 and 11 unused.
    const Codebook two{{1.0, 2.0}, {1, 1}};
    auto code = canonical_code({2, 2}, CodeScheme::huffman);
    auto good = encode_assignments({0, 1}, two, code);
    // Payload starts after header (120), lengths (16), centers (64), table (4).
    BitWriter w;
    BitReader r(good.bytes, good.total_bits);
    for (int i = 0; i < 120 + 16 + 64 + 4; ++i) w.write(r.read_bit() ? 1 : 0, 1);
    w.write(0b11, 2);
    w.write(0b01, 2);
    EncodedModel bad{w.finish(), w.bit_count(), good.breakdown};
    CHECK_THROWS_AS(decode_assignments(bad), FormatError);
  }
}

TEST_CASE("compression ratio formulas") {
  const std::size_t n = 100000;
  const double k1 = compression_ratio_exact(n, 32, std::vector<std::size_t>{n}, fixed_length_code(1));
  CHECK(k1 == doctest::Approx(32.0 * n / static_cast<double>((n + 1) + 32)));
  CHECK(k1 > 31.9);

  const auto approx = compression_ratio_entropy(32, 2.0, 4, 8, 1000000);
  CHECK(approx.approximate == doctest::Approx(16.0));

  const std::vector<std::size_t> counts{500, 300, 150, 50};
  const auto code = build_huffman(counts);
  const double avg = code.average_length(counts);
  const auto er = compression_ratio_entropy(32, avg, 4, code.table_bits(), 1000);
  CHECK(er.with_overhead == doctest::Approx(compression_ratio_exact(1000, 32, counts, code)).epsilon(1e-12));

  const auto zero = compression_ratio_entropy(32, 0.0, 1, 1, 10);
  CHECK(zero.approximate == doctest::Approx(10.0 * 32.0 / 33.0));

  CHECK(entropy_budget(32, 16.0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(entropy_budget(32, 0.0), std::invalid_argument);
}

TEST_CASE("index difference coding") {
  SUBCASE("definition") {
    const std::vector<std::size_t> pos{0, 3, 4, 9};
    const auto ic = index_diff_code(pos, 10);
    CHECK(ic.diffs == std::vector<std::uint32_t>{0, 3, 1, 5});
    CHECK(positions_from_diffs(ic.diffs) == pos);
  }
  SUBCASE("dense mask") {
    std::vector<std::size_t> pos(500);
    std::iota(pos.begin(), pos.end(), 0);
    const auto ic = index_diff_code(pos, 500);
    CHECK(ic.alphabet == std::vector<std::uint32_t>{0, 1});
    CHECK(ic.code.lengths == std::vector<std::uint8_t>{1, 1});
    CHECK(ic.total_bits == 500);
  }
  SUBCASE("dense mask starting at 1") {
    std::vector<std::size_t> pos(400);
    std::iota(pos.begin(), pos.end(), 1);
    const auto ic = index_diff_code(pos, 401);
    CHECK(ic.alphabet == std::vector<std::uint32_t>{1});
    CHECK(ic.code.lengths == std::vector<std::uint8_t>{1});
    CHECK(ic.total_bits == 400);
  }
  SUBCASE("non-monotone input") {
    CHECK_THROWS_AS(index_diff_code(std::vector<std::size_t>{3, 2}, 10), std::invalid_argument);
    CHECK_THROWS_AS(index_diff_code(std::vector<std::size_t>{1, 1}, 10), std::invalid_argument);
    CHECK_THROWS_AS(index_diff_code(std::vector<std::size_t>{1, 10}, 10), std::invalid_argument);
  }
  SUBCASE("pruned model roundtrip") {
    std::mt19937_64 rng(3);
    const std::size_t original = 2000;
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < original; ++i) {
      if (rng() % 5 == 0) pos.push_back(i);
    }
    Assignment a(pos.size());
    Codebook cb{{-0.5, 0.0, 0.75}, {0, 0, 0}};
    for (auto& x : a) {
      x = static_cast<std::uint32_t>(rng() % 3);
      ++cb.counts[x];
    }
    const auto em = encode_assignments(a, cb, build_huffman(cb), 32, PrunedLayout{pos, original});
    const auto back = decode_assignments(em);
    CHECK(back.assignment == a);
    REQUIRE(back.positions.has_value());
    CHECK(*back.positions == pos);
    CHECK(back.original_n == original);
    CHECK(em.total_bits == em.breakdown.total_bits());
    const auto ic = index_diff_code(pos, original);
    CHECK(em.breakdown.index_payload_bits == ic.total_bits);
  }
}

TEST_CASE("property: Shannon bounds and Kraft equality") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 300; ++t) {
    const std::size_t k = 2 + rng() % 63;
    std::vector<std::size_t> counts(k);
    for (auto& c : counts) c = 1 + rng() % 1000;
    const auto code = build_huffman(counts);
    const double h = entropy_bits(counts);
    const double avg = code.average_length(counts);
    CHECK(h <= avg + 1e-12);
    CHECK(avg < h + 1.0);
    CHECK(code.kraft_sum() == 1.0);
    CHECK(code.is_prefix_free());
  }
}

TEST_CASE("property: Huffman matches exhaustive optimal prefix lengths") {
  std::mt19937_64 rng(19);
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 2 + rng() % 5;
    std::vector<std::size_t> counts(k);
    for (auto& c : counts) c = 1 + rng() % 50;
    CHECK(weighted_length(build_huffman(counts), counts) == oracle::optimal_prefix_cost(counts));
  }
}

TEST_CASE("property: encode/decode are exact inverses and match the ratio formula") {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 60; ++t) {
    const std::size_t n = 1 + rng() % 3000;
    const std::size_t k = 1 + rng() % 40;
    const auto m = random_model(rng, n, k);
    for (auto scheme : {CodeScheme::fixed, CodeScheme::huffman}) {
      // Codes cover every cluster; zero-count clusters keep a codeword only in the fixed scheme.
      Assignment a = m.assignment;
      Codebook cb = m.codebook;
      if (scheme == CodeScheme::huffman) drop_empty_clusters(a, cb);
      const auto code = scheme == CodeScheme::huffman ? build_huffman(cb) : fixed_length_code(cb.k());
      for (unsigned b : {32u, 64u}) {
        const auto em = encode_assignments(a, cb, code, b);
        const auto back = decode_assignments(em);
        CHECK(back.assignment == a);
        CHECK(back.codebook.centers == cb.centers);
        CHECK(back.codebook.counts == cb.counts);
        CHECK(back.code.lengths == code.lengths);
        CHECK(back.code.codewords == code.codewords);
        CHECK(em.total_bits == em.breakdown.total_bits());
        CHECK(decode_assignments(em.bytes).assignment == a);
        const double exact = compression_ratio_exact(n, b, cb.counts, code);
        CHECK(exact == static_cast<double>(n) * b / static_cast<double>(em.breakdown.ratio_denominator_bits()));
      }
    }
  }
}
