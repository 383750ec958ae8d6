#include "nq/coding.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <queue>
#include <stdexcept>

#include "nq/error.hpp"

namespace nq {

namespace {

constexpr std::uint32_t kMagic = 0x4E513031;  // "NQ01"
constexpr std::uint8_t kFlagIndexSection = 0x1;
constexpr unsigned kHeaderBits = 32 + 8 + 8 + 32 + 32 + 8;
constexpr unsigned kMaxCodeLength = 64;

unsigned ceil_log2(std::size_t k) {
  unsigned bits = 0;
  while ((std::size_t{1} << bits) < k) ++bits;
  return bits;
}

std::uint64_t center_bits_of(double c, unsigned b) {
  if (b == 32) return std::bit_cast<std::uint32_t>(static_cast<float>(c));
  return std::bit_cast<std::uint64_t>(c);
}

double center_from_bits(std::uint64_t bits, unsigned b) {
  if (b == 32) return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
  return std::bit_cast<double>(bits);
}

void check_storage_bits(unsigned b) {
  if (b != 32 && b != 64) throw std::invalid_argument("source_bits must be 32 or 64");
}

}  // namespace

double entropy_bits(std::span<const std::size_t> counts) {
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  if (n == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return std::max(h, 0.0);
}

double entropy_bits(const Codebook& codebook) { return entropy_bits(codebook.counts); }

std::string to_string(CodeScheme s) { return s == CodeScheme::fixed ? "fixed" : "huffman"; }

CodeScheme code_scheme_from_string(const std::string& s) {
  if (s == "fixed") return CodeScheme::fixed;
  if (s == "huffman") return CodeScheme::huffman;
  throw std::invalid_argument("unknown coding scheme '" + s + "'");
}

double PrefixCode::kraft_sum() const {
  double sum = 0.0;
  for (auto len : lengths) {
    if (len > 0) sum += std::ldexp(1.0, -static_cast<int>(len));
  }
  return sum;
}

bool PrefixCode::is_prefix_free() const {
  struct Word {
    std::uint64_t aligned;
    std::uint8_t length;
    std::uint64_t code;
  };
  std::vector<Word> words;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) continue;
    const std::uint64_t aligned = lengths[i] == 64 ? codewords[i] : codewords[i] << (64 - lengths[i]);
    words.push_back({aligned, lengths[i], codewords[i]});
  }
  std::sort(words.begin(), words.end(), [](const Word& a, const Word& b) {
    return a.aligned != b.aligned ? a.aligned < b.aligned : a.length < b.length;
  });
  for (std::size_t i = 1; i < words.size(); ++i) {
    const auto& a = words[i - 1];
    const auto& b = words[i];
    // A prefix always sorts directly before some word that extends it.
    if (b.length >= a.length && b.code >> (b.length - a.length) == a.code) return false;
  }
  return true;
}

std::uint64_t PrefixCode::table_bits() const {
  return std::accumulate(lengths.begin(), lengths.end(), std::uint64_t{0});
}

double PrefixCode::average_length(std::span<const std::size_t> counts) const {
  if (counts.size() != lengths.size()) throw std::invalid_argument("counts/code size mismatch");
  std::uint64_t bits = 0;
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    bits += counts[i] * lengths[i];
    n += counts[i];
  }
  return n == 0 ? 0.0 : static_cast<double>(bits) / static_cast<double>(n);
}

PrefixCode canonical_code(std::vector<std::uint8_t> lengths, CodeScheme scheme) {
  PrefixCode code;
  code.scheme = scheme;
  code.codewords.assign(lengths.size(), 0);
  std::vector<std::uint32_t> order;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] > kMaxCodeLength) throw std::invalid_argument("codeword longer than 64 bits");
    if (lengths[i] > 0) order.push_back(static_cast<std::uint32_t>(i));
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return lengths[a] < lengths[b]; });
  std::uint64_t next = 0;
  unsigned prev_len = order.empty() ? 0 : lengths[order.front()];
  for (auto sym : order) {
    next <<= (lengths[sym] - prev_len);
    prev_len = lengths[sym];
    code.codewords[sym] = next++;
  }
  code.lengths = std::move(lengths);
  return code;
}

PrefixCode build_huffman(std::span<const std::size_t> counts) {
  const std::size_t k = counts.size();
  std::vector<std::uint8_t> lengths(k, 0);
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < k; ++i) {
    if (counts[i] > 0) used.push_back(i);
  }
  if (used.size() == 1) lengths[used.front()] = 1;
  if (used.size() <= 1) return canonical_code(std::move(lengths), CodeScheme::huffman);

  // Nodes 0..used-1 are leaves; merged nodes are appended. Ties on weight go to
  // the lower node id so the tree is deterministic.
  struct Node {
    std::uint64_t weight;
    std::size_t id;
  };
  auto heavier = [](const Node& a, const Node& b) {
    return a.weight != b.weight ? a.weight > b.weight : a.id > b.id;
  };
  std::priority_queue<Node, std::vector<Node>, decltype(heavier)> queue(heavier);
  std::vector<std::size_t> parent(2 * used.size() - 1, 0);
  for (std::size_t i = 0; i < used.size(); ++i) queue.push({counts[used[i]], i});
  std::size_t next_id = used.size();
  while (queue.size() > 1) {
    const Node a = queue.top();
    queue.pop();
    const Node b = queue.top();
    queue.pop();
    parent[a.id] = parent[b.id] = next_id;
    queue.push({a.weight + b.weight, next_id});
    ++next_id;
  }
  const std::size_t root = next_id - 1;
  // Parents always have larger ids, so depths resolve in one descending pass.
  std::vector<unsigned> depth(next_id, 0);
  for (std::size_t id = root; id-- > 0;) depth[id] = depth[parent[id]] + 1;
  for (std::size_t i = 0; i < used.size(); ++i) {
    if (depth[i] > kMaxCodeLength) throw std::invalid_argument("Huffman code exceeds 64 bits");
    lengths[used[i]] = static_cast<std::uint8_t>(depth[i]);
  }
  return canonical_code(std::move(lengths), CodeScheme::huffman);
}

PrefixCode build_huffman(const Codebook& codebook) { return build_huffman(codebook.counts); }

PrefixCode fixed_length_code(std::size_t k) {
  if (k == 0) throw std::invalid_argument("fixed-length code needs k >= 1");
  const auto len = static_cast<std::uint8_t>(std::max(1u, ceil_log2(k)));
  return canonical_code(std::vector<std::uint8_t>(k, len), CodeScheme::fixed);
}

void BitWriter::write(std::uint64_t value, unsigned nbits) {
  for (unsigned i = nbits; i-- > 0;) {
    if (bits_ % 8 == 0) bytes_.push_back(0);
    if ((value >> i) & 1u) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
    ++bits_;
  }
}

BitReader::BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_limit)
    : bytes_(bytes), limit_(std::min<std::uint64_t>(bit_limit, bytes.size() * 8)) {}

bool BitReader::read_bit() {
  if (pos_ >= limit_) throw FormatError("bitstream truncated");
  const bool bit = (bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1u;
  ++pos_;
  return bit;
}

std::uint64_t BitReader::read(unsigned nbits) {
  if (nbits > remaining()) throw FormatError("bitstream truncated");
  std::uint64_t value = 0;
  for (unsigned i = 0; i < nbits; ++i) value = (value << 1) | (read_bit() ? 1u : 0u);
  return value;
}

PrefixDecoder::PrefixDecoder(const PrefixCode& code) {
  for (std::size_t i = 0; i < code.size(); ++i) {
    if (code.lengths[i] == 0) continue;
    entries_.push_back({code.lengths[i], code.codewords[i], static_cast<std::uint32_t>(i)});
    max_length_ = std::max(max_length_, code.lengths[i]);
  }
  std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) {
    return a.length != b.length ? a.length < b.length : a.codeword < b.codeword;
  });
  first_of_length_.assign(max_length_ + 2u, entries_.size());
  for (std::size_t e = entries_.size(); e-- > 0;) first_of_length_[entries_[e].length] = e;
  for (std::size_t len = max_length_ + 1u; len-- > 0;) {
    first_of_length_[len] = std::min(first_of_length_[len], first_of_length_[len + 1]);
  }
}

std::uint32_t PrefixDecoder::decode(BitReader& reader) const {
  std::uint64_t acc = 0;
  for (unsigned len = 1; len <= max_length_; ++len) {
    acc = (acc << 1) | (reader.read_bit() ? 1u : 0u);
    auto begin = entries_.begin() + static_cast<std::ptrdiff_t>(first_of_length_[len]);
    auto end = entries_.begin() + static_cast<std::ptrdiff_t>(first_of_length_[len + 1]);
    auto it = std::lower_bound(begin, end, acc,
                               [](const Entry& e, std::uint64_t v) { return e.codeword < v; });
    if (it != end && it->codeword == acc) return it->symbol;
  }
  throw FormatError("bit pattern matches no codeword");
}

void encode_symbols(BitWriter& out, const PrefixCode& code, std::span<const std::uint32_t> symbols) {
  for (auto s : symbols) {
    if (s >= code.size() || code.lengths[s] == 0) {
      throw std::invalid_argument("symbol " + std::to_string(s) + " has no codeword");
    }
    out.write(code.codewords[s], code.lengths[s]);
  }
}

IndexDiffCode index_diff_code(std::span<const std::size_t> positions, std::size_t n) {
  if (n > 0xFFFFFFFFu) throw std::invalid_argument("index coding supports at most 2^32-1 parameters");
  IndexDiffCode out;
  out.diffs.reserve(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= n) throw std::invalid_argument("position out of range");
    if (i > 0 && positions[i] <= positions[i - 1]) {
      throw std::invalid_argument("positions must be strictly increasing");
    }
    out.diffs.push_back(static_cast<std::uint32_t>(i == 0 ? positions[0] : positions[i] - positions[i - 1]));
  }
  out.alphabet = out.diffs;
  std::sort(out.alphabet.begin(), out.alphabet.end());
  out.alphabet.erase(std::unique(out.alphabet.begin(), out.alphabet.end()), out.alphabet.end());
  out.counts.assign(out.alphabet.size(), 0);
  out.symbols.reserve(out.diffs.size());
  for (auto d : out.diffs) {
    const auto idx = static_cast<std::uint32_t>(
        std::lower_bound(out.alphabet.begin(), out.alphabet.end(), d) - out.alphabet.begin());
    out.symbols.push_back(idx);
    ++out.counts[idx];
  }
  out.code = build_huffman(out.counts);
  for (auto s : out.symbols) out.total_bits += out.code.lengths[s];
  return out;
}

std::vector<std::size_t> positions_from_diffs(std::span<const std::uint32_t> diffs) {
  std::vector<std::size_t> positions;
  positions.reserve(diffs.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (i > 0 && diffs[i] == 0) throw FormatError("zero index difference after the first position");
    pos += diffs[i];
    positions.push_back(pos);
  }
  return positions;
}

EncodedModel encode_assignments(const Assignment& assignment, const Codebook& codebook,
                                const PrefixCode& code, unsigned source_bits,
                                std::optional<PrunedLayout> pruned) {
  check_storage_bits(source_bits);
  const std::size_t k = codebook.k();
  if (k == 0) throw std::invalid_argument("empty codebook");
  if (code.size() != k) throw std::invalid_argument("code size does not match codebook");
  if (codebook.counts.size() != k) throw std::invalid_argument("codebook counts size mismatch");
  if (k > 0xFFFFFFFFu || assignment.size() > 0xFFFFFFFFu) {
    throw std::invalid_argument("k and N must fit in 32 bits");
  }
  for (auto a : assignment) {
    if (a >= k) throw std::invalid_argument("assignment refers to a missing cluster");
    if (code.lengths[a] == 0) throw std::invalid_argument("cluster " + std::to_string(a) + " has no codeword");
  }
  std::optional<IndexDiffCode> index;
  if (pruned) {
    if (pruned->positions.size() != assignment.size()) {
      throw std::invalid_argument("one position per quantized parameter is required");
    }
    index = index_diff_code(pruned->positions, pruned->original_n);
  }

  EncodedModel em;
  BitWriter out;
  BitBreakdown& bd = em.breakdown;
  auto mark = [&](std::uint64_t& field, auto&& body) {
    const auto start = out.bit_count();
    body();
    field += out.bit_count() - start;
  };

  mark(bd.header_bits, [&] {
    out.write(kMagic, 32);
    out.write(static_cast<std::uint8_t>(code.scheme), 8);
    out.write(source_bits, 8);
    out.write(k, 32);
    out.write(assignment.size(), 32);
    out.write(index ? kFlagIndexSection : 0, 8);
  });
  mark(bd.length_table_bits, [&] {
    for (auto len : code.lengths) out.write(len, 8);
  });
  mark(bd.center_bits, [&] {
    for (double c : codebook.centers) out.write(center_bits_of(c, source_bits), source_bits);
  });
  mark(bd.codeword_table_bits, [&] {
    for (std::size_t j = 0; j < k; ++j) out.write(code.codewords[j], code.lengths[j]);
  });
  mark(bd.payload_bits, [&] { encode_symbols(out, code, assignment); });
  if (index) {
    mark(bd.index_header_bits, [&] {
      out.write(pruned->original_n, 32);
      out.write(index->alphabet.size(), 32);
    });
    mark(bd.index_table_bits, [&] {
      for (std::size_t s = 0; s < index->alphabet.size(); ++s) {
        out.write(index->alphabet[s], 32);
        out.write(index->code.lengths[s], 8);
        out.write(index->code.codewords[s], index->code.lengths[s]);
      }
    });
    mark(bd.index_payload_bits, [&] { encode_symbols(out, index->code, index->symbols); });
  }
  em.total_bits = out.bit_count();
  em.bytes = out.finish();
  bd.padding_bits = em.bytes.size() * 8 - em.total_bits;
  return em;
}

namespace {

DecodedModel decode_stream(std::span<const std::uint8_t> bytes, std::uint64_t bit_limit, bool exact_end) {
  BitReader in(bytes, bit_limit);
  DecodedModel dm;
  BitBreakdown& bd = dm.breakdown;
  auto mark = [&](std::uint64_t& field, auto&& body) {
    const auto start = in.position();
    body();
    field += in.position() - start;
  };

  std::size_t k = 0;
  std::size_t n = 0;
  std::uint8_t flags = 0;
  CodeScheme scheme = CodeScheme::fixed;
  mark(bd.header_bits, [&] {
    if (in.read(32) != kMagic) throw FormatError("bad magic (expected NQ01)");
    const auto s = in.read(8);
    if (s > 1) throw FormatError("unknown coding scheme " + std::to_string(s));
    scheme = static_cast<CodeScheme>(s);
    dm.source_bits = static_cast<unsigned>(in.read(8));
    if (dm.source_bits != 32 && dm.source_bits != 64) throw FormatError("unsupported center width");
    k = in.read(32);
    if (k == 0) throw FormatError("header declares k = 0");
    n = in.read(32);
    flags = static_cast<std::uint8_t>(in.read(8));
    if (flags & ~kFlagIndexSection) throw FormatError("unknown header flags");
  });
  // Every cluster needs at least its 8-bit length entry and b-bit center.
  if (k > in.remaining() / (8 + dm.source_bits)) throw FormatError("bitstream truncated");

  std::vector<std::uint8_t> lengths(k);
  mark(bd.length_table_bits, [&] {
    for (auto& len : lengths) {
      len = static_cast<std::uint8_t>(in.read(8));
      if (len > kMaxCodeLength) throw FormatError("codeword length exceeds 64");
    }
  });
  if (scheme == CodeScheme::fixed) {
    const auto expect = std::max(1u, ceil_log2(k));
    for (auto len : lengths) {
      if (len != expect) throw FormatError("fixed-length code with inconsistent lengths");
    }
  }
  dm.codebook.centers.resize(k);
  mark(bd.center_bits, [&] {
    for (auto& c : dm.codebook.centers) c = center_from_bits(in.read(dm.source_bits), dm.source_bits);
  });
  dm.code.scheme = scheme;
  dm.code.lengths = lengths;
  dm.code.codewords.assign(k, 0);
  mark(bd.codeword_table_bits, [&] {
    for (std::size_t j = 0; j < k; ++j) dm.code.codewords[j] = in.read(lengths[j]);
  });
  if (!dm.code.is_prefix_free()) throw FormatError("codeword table is not prefix-free");

  if (n > in.remaining()) throw FormatError("bitstream truncated");
  const PrefixDecoder decoder(dm.code);
  dm.assignment.resize(n);
  dm.codebook.counts.assign(k, 0);
  mark(bd.payload_bits, [&] {
    for (auto& a : dm.assignment) {
      a = decoder.decode(in);
      ++dm.codebook.counts[a];
    }
  });
  dm.original_n = n;

  if (flags & kFlagIndexSection) {
    std::size_t alphabet_size = 0;
    mark(bd.index_header_bits, [&] {
      dm.original_n = in.read(32);
      alphabet_size = in.read(32);
    });
    if (alphabet_size == 0 && n > 0) throw FormatError("empty index alphabet");
    if (alphabet_size > in.remaining() / 40) throw FormatError("bitstream truncated");
    IndexDiffCode index;
    index.alphabet.resize(alphabet_size);
    index.code.scheme = CodeScheme::huffman;
    index.code.lengths.resize(alphabet_size);
    index.code.codewords.resize(alphabet_size);
    mark(bd.index_table_bits, [&] {
      for (std::size_t s = 0; s < alphabet_size; ++s) {
        index.alphabet[s] = static_cast<std::uint32_t>(in.read(32));
        index.code.lengths[s] = static_cast<std::uint8_t>(in.read(8));
        if (index.code.lengths[s] > kMaxCodeLength) throw FormatError("codeword length exceeds 64");
        index.code.codewords[s] = in.read(index.code.lengths[s]);
      }
    });
    if (!index.code.is_prefix_free()) throw FormatError("index code table is not prefix-free");
    const PrefixDecoder index_decoder(index.code);
    index.counts.assign(alphabet_size, 0);
    mark(bd.index_payload_bits, [&] {
      for (std::size_t i = 0; i < n; ++i) {
        const auto s = index_decoder.decode(in);
        index.symbols.push_back(s);
        index.diffs.push_back(index.alphabet[s]);
        ++index.counts[s];
        index.total_bits += index.code.lengths[s];
      }
    });
    auto positions = positions_from_diffs(index.diffs);
    if (!positions.empty() && positions.back() >= dm.original_n) {
      throw FormatError("decoded position exceeds the original parameter count");
    }
    dm.positions = std::move(positions);
    dm.index_code = std::move(index);
  }

  dm.total_bits = in.position();
  if (exact_end) {
    if (in.remaining() != 0) throw FormatError("trailing bits after the encoded model");
  } else {
    if (in.remaining() >= 8) throw FormatError("trailing bytes after the encoded model");
    if (in.read(static_cast<unsigned>(in.remaining())) != 0) throw FormatError("nonzero padding bits");
  }
  bd.padding_bits = bytes.size() * 8 - dm.total_bits;
  return dm;
}

}  // namespace

DecodedModel decode_assignments(const EncodedModel& em) {
  if (em.total_bits > em.bytes.size() * 8) throw FormatError("bit count exceeds the byte buffer");
  return decode_stream(em.bytes, em.total_bits, true);
}

DecodedModel decode_assignments(std::span<const std::uint8_t> bytes) {
  return decode_stream(bytes, bytes.size() * 8, false);
}

double compression_ratio_exact(std::size_t n, unsigned b, std::span<const std::size_t> counts,
                               const PrefixCode& code) {
  if (code.size() != counts.size()) throw std::invalid_argument("counts/code size mismatch");
  if (std::accumulate(counts.begin(), counts.end(), std::size_t{0}) != n) {
    throw std::invalid_argument("counts do not sum to N");
  }
  std::uint64_t denominator = static_cast<std::uint64_t>(counts.size()) * b;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    denominator += (static_cast<std::uint64_t>(counts[i]) + 1) * code.lengths[i];
  }
  return static_cast<double>(static_cast<std::uint64_t>(n) * b) / static_cast<double>(denominator);
}

EntropyRatio compression_ratio_entropy(unsigned b, double avg_len, std::size_t k,
                                       std::uint64_t sum_lengths, std::size_t n) {
  if (n == 0) throw std::invalid_argument("N must be positive");
  const double overhead = static_cast<double>(sum_lengths) + static_cast<double>(k) * b;
  EntropyRatio r;
  r.with_overhead = b / (avg_len + overhead / static_cast<double>(n));
  r.approximate = avg_len > 0.0 ? b / avg_len : static_cast<double>(n) * b / overhead;
  return r;
}

double entropy_budget(unsigned b, double target_ratio) {
  if (!(target_ratio > 0.0)) throw std::invalid_argument("target ratio must be positive");
  return static_cast<double>(b) / target_ratio;
}

}  // namespace nq
