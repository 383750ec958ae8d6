#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nq/quantizers.hpp"

namespace nq {

// -0 log 0 is taken as 0.
double entropy_bits(std::span<const std::size_t> counts);
double entropy_bits(const Codebook& codebook);

enum class CodeScheme : std::uint8_t { fixed = 0, huffman = 1 };

std::string to_string(CodeScheme s);
CodeScheme code_scheme_from_string(const std::string& s);

// Per-symbol codeword lengths and bit patterns (right-aligned in a uint64).
// A length of 0 means the symbol has no codeword (zero-count symbol).
struct PrefixCode {
  CodeScheme scheme = CodeScheme::fixed;
  std::vector<std::uint8_t> lengths;
  std::vector<std::uint64_t> codewords;

  std::size_t size() const { return lengths.size(); }
  double kraft_sum() const;
  bool is_prefix_free() const;
  std::uint64_t table_bits() const;  // sum of codeword lengths
  // sum_i counts_i * b_i / sum_i counts_i
  double average_length(std::span<const std::size_t> counts) const;
};

// Assigns canonical codewords (ordered by length, then symbol index) to the
// given lengths.
PrefixCode canonical_code(std::vector<std::uint8_t> lengths, CodeScheme scheme);

// Optimal prefix code for the counts. Zero counts get no codeword. A single
// used symbol gets a 1-bit codeword.
PrefixCode build_huffman(std::span<const std::size_t> counts);
PrefixCode build_huffman(const Codebook& codebook);

// ceil(log2 k) bits for every symbol; 1 bit when k == 1.
PrefixCode fixed_length_code(std::size_t k);

// MSB-first bit packing.
class BitWriter {
 public:
  void write(std::uint64_t value, unsigned nbits);
  std::uint64_t bit_count() const { return bits_; }
  // Pads the final byte with zeros.
  std::vector<std::uint8_t> finish() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint64_t bits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_limit);

  // Throws FormatError when fewer than nbits remain.
  std::uint64_t read(unsigned nbits);
  bool read_bit();
  std::uint64_t position() const { return pos_; }
  std::uint64_t remaining() const { return limit_ - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t limit_;
  std::uint64_t pos_ = 0;
};

// Decodes symbols of a prefix code bit by bit.
class PrefixDecoder {
 public:
  explicit PrefixDecoder(const PrefixCode& code);
  // Throws FormatError on a bit pattern that matches no codeword.
  std::uint32_t decode(BitReader& reader) const;

 private:
  struct Entry {
    std::uint8_t length;
    std::uint64_t codeword;
    std::uint32_t symbol;
  };
  std::vector<Entry> entries_;  // sorted by (length, codeword)
  std::vector<std::size_t> first_of_length_;
  std::uint8_t max_length_ = 0;
};

void encode_symbols(BitWriter& out, const PrefixCode& code, std::span<const std::uint32_t> symbols);

// Index-difference coding of the kept positions of a pruned model:
// d_0 = p_0, d_i = p_i - p_{i-1}, Huffman-coded over the distinct differences.
struct IndexDiffCode {
  std::vector<std::uint32_t> diffs;
  std::vector<std::uint32_t> alphabet;  // distinct differences, ascending
  std::vector<std::uint32_t> symbols;   // alphabet index of every diff
  std::vector<std::size_t> counts;      // occurrences per alphabet entry
  PrefixCode code;
  std::uint64_t total_bits = 0;  // coded difference stream only
};

IndexDiffCode index_diff_code(std::span<const std::size_t> positions, std::size_t n);
std::vector<std::size_t> positions_from_diffs(std::span<const std::uint32_t> diffs);

// Bit accounting of a serialized model. centers + codeword table + payload is
// exactly the denominator of the compression-ratio formula; the rest is
// container overhead.
struct BitBreakdown {
  std::uint64_t header_bits = 0;        // magic, scheme, b, k, N, flags
  std::uint64_t length_table_bits = 0;  // 8 bits per cluster
  std::uint64_t center_bits = 0;        // k * b
  std::uint64_t codeword_table_bits = 0;  // sum of b_i
  std::uint64_t payload_bits = 0;       // sum over parameters of b_{a(i)}
  std::uint64_t index_header_bits = 0;
  std::uint64_t index_table_bits = 0;
  std::uint64_t index_payload_bits = 0;
  std::uint64_t padding_bits = 0;

  std::uint64_t ratio_denominator_bits() const { return center_bits + codeword_table_bits + payload_bits; }
  std::uint64_t index_bits() const { return index_header_bits + index_table_bits + index_payload_bits; }
  std::uint64_t overhead_bits() const { return header_bits + length_table_bits + index_header_bits; }
  std::uint64_t total_bits() const {
    return header_bits + length_table_bits + ratio_denominator_bits() + index_bits();
  }
};

// Serialized quantized model ("NQ01" container).
struct EncodedModel {
  std::vector<std::uint8_t> bytes;
  std::uint64_t total_bits = 0;  // bits before end-of-stream padding
  BitBreakdown breakdown;
};

struct PrunedLayout {
  std::span<const std::size_t> positions;  // increasing, one per quantized parameter
  std::size_t original_n = 0;
};

// Writes header, centers (b bits each), codeword table, payload and the
// optional index-difference section. Throws std::invalid_argument when a used
// cluster has no codeword or shapes disagree.
EncodedModel encode_assignments(const Assignment& assignment, const Codebook& codebook,
                                const PrefixCode& code, unsigned source_bits = 32,
                                std::optional<PrunedLayout> pruned = std::nullopt);

struct DecodedModel {
  Assignment assignment;
  Codebook codebook;
  PrefixCode code;
  unsigned source_bits = 32;
  std::size_t original_n = 0;  // N of the unpruned model
  std::optional<std::vector<std::size_t>> positions;
  std::optional<IndexDiffCode> index_code;
  BitBreakdown breakdown;
  std::uint64_t total_bits = 0;
};

// Exact inverse of encode_assignments. Throws FormatError on truncation, bad
// magic, k == 0, unknown codewords or trailing garbage.
DecodedModel decode_assignments(const EncodedModel& em);
DecodedModel decode_assignments(std::span<const std::uint8_t> bytes);

// N b / (sum_i (|C_i| + 1) b_i + k b), k = counts.size().
double compression_ratio_exact(std::size_t n, unsigned b, std::span<const std::size_t> counts,
                               const PrefixCode& code);

struct EntropyRatio {
  double with_overhead = 0.0;  // b / (avg_len + (sum b_i + k b) / N)
  double approximate = 0.0;    // b / avg_len (overhead neglected)
};

EntropyRatio compression_ratio_entropy(unsigned b, double avg_len, std::size_t k,
                                       std::uint64_t sum_lengths, std::size_t n);

// Entropy budget R = b / C for a target compression ratio C.
double entropy_budget(unsigned b, double target_ratio);

}  // namespace nq
