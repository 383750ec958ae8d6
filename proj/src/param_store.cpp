#include "nq/param_store.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "nq/error.hpp"

namespace nq {

namespace {

void check_spans(const std::vector<LayerSpan>& spans, std::size_t n) {
  std::size_t next = 0;
  for (const auto& s : spans) {
    if (s.offset != next || s.length == 0) {
      throw std::invalid_argument("layer spans must be contiguous, nonempty and start at 0 (span '" +
                                  s.name + "')");
    }
    next += s.length;
  }
  if (next != n) {
    throw std::invalid_argument("layer spans cover " + std::to_string(next) + " of " +
                                std::to_string(n) + " parameters");
  }
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

// Reads a payload listed in the manifest and verifies its digest.
std::vector<std::uint8_t> read_payload(const std::filesystem::path& dir, const Manifest& m,
                                       const std::string& name) {
  auto it = m.sha256.find(name);
  if (it == m.sha256.end()) throw FormatError("manifest has no checksum for " + name);
  auto bytes = read_file(dir / name);
  if (sha256_hex(bytes) != it->second) throw ChecksumError("checksum mismatch for " + name);
  return bytes;
}

std::vector<double> read_f32_payload(const std::filesystem::path& dir, const Manifest& m,
                                     const std::string& name) {
  auto bytes = read_payload(dir, m, name);
  if (bytes.size() != m.n_params * 4) {
    throw FormatError(name + " holds " + std::to_string(bytes.size()) + " bytes, manifest expects " +
                      std::to_string(m.n_params * 4));
  }
  auto values = decode_f32le(bytes);
  for (double v : values) {
    if (!std::isfinite(v)) throw FormatError("non-finite value in " + name);
  }
  return values;
}

}  // namespace

ParamSet::ParamSet(std::vector<double> values, std::vector<LayerSpan> spans, unsigned source_bits)
    : values_(std::move(values)), spans_(std::move(spans)), source_bits_(source_bits) {
  if (values_.empty()) throw std::invalid_argument("ParamSet needs at least one parameter");
  if (source_bits_ == 0) throw std::invalid_argument("source_bits must be positive");
  check_spans(spans_, values_.size());
  for (double v : values_) {
    if (!std::isfinite(v)) throw std::invalid_argument("ParamSet values must be finite");
  }
}

ParamSet ParamSet::flat(std::vector<double> values, std::string name, unsigned source_bits) {
  const std::size_t n = values.size();
  return ParamSet(std::move(values), {LayerSpan{std::move(name), 0, n}}, source_bits);
}

ParamSet ParamSet::with_values(std::vector<double> values) const {
  return ParamSet(std::move(values), spans_, source_bits_);
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size() || a.spans() != b.spans() || a.source_bits() != b.source_bits()) {
    return false;
  }
  return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

ParamSet round_to_float32(const ParamSet& ps) {
  std::vector<double> v(ps.values().begin(), ps.values().end());
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
  return ps.with_values(std::move(v));
}

std::string to_string(CurvatureSource s) {
  switch (s) {
    case CurvatureSource::exact_hessian: return "exact_hessian";
    case CurvatureSource::gauss_newton: return "gauss_newton";
    case CurvatureSource::adam_sqrt_moment: return "adam_sqrt_moment";
    case CurvatureSource::identity: return "identity";
  }
  return "unknown";
}

CurvatureSource curvature_source_from_string(const std::string& s) {
  if (s == "exact_hessian") return CurvatureSource::exact_hessian;
  if (s == "gauss_newton") return CurvatureSource::gauss_newton;
  if (s == "adam_sqrt_moment") return CurvatureSource::adam_sqrt_moment;
  if (s == "identity") return CurvatureSource::identity;
  throw FormatError("unknown curvature source '" + s + "'");
}

CurvatureDiag::CurvatureDiag(std::vector<double> values, CurvatureSource source)
    : values_(std::move(values)), source_(source) {
  if (values_.empty()) throw std::invalid_argument("CurvatureDiag needs at least one entry");
  for (auto& v : values_) {
    if (!std::isfinite(v)) throw std::invalid_argument("curvature values must be finite");
    if (v < kCurvatureFloor) {
      v = kCurvatureFloor;
      ++clamped_;
    }
  }
}

CurvatureDiag CurvatureDiag::identity(std::size_t n) {
  return CurvatureDiag(std::vector<double>(n, 1.0), CurvatureSource::identity);
}

PruneMask::PruneMask(std::vector<bool> kept) : kept_(std::move(kept)) {
  if (std::none_of(kept_.begin(), kept_.end(), [](bool k) { return k; })) {
    throw std::invalid_argument("prune mask must keep at least one parameter");
  }
}

std::size_t PruneMask::kept_count() const {
  return static_cast<std::size_t>(std::count(kept_.begin(), kept_.end(), true));
}

nlohmann::json Manifest::to_json() const {
  nlohmann::json j;
  j["model_name"] = model_name;
  j["n_params"] = n_params;
  j["bits_per_param"] = bits_per_param;
  j["spans"] = nlohmann::json::array();
  for (const auto& s : spans) {
    j["spans"].push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
  }
  j["sha256"] = sha256;
  j["metadata"] = metadata;
  return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.model_name = j.at("model_name").get<std::string>();
    m.n_params = j.at("n_params").get<std::size_t>();
    m.bits_per_param = j.at("bits_per_param").get<unsigned>();
    for (const auto& s : j.at("spans")) {
      m.spans.push_back(LayerSpan{s.at("name").get<std::string>(), s.at("offset").get<std::size_t>(),
                                  s.at("length").get<std::size_t>()});
    }
    m.sha256 = j.at("sha256").get<std::map<std::string, std::string>>();
    if (j.contains("metadata")) m.metadata = j["metadata"];
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
}

std::vector<std::uint8_t> encode_f32le(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return out;
}

std::vector<double> decode_f32le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4 != 0) throw FormatError("float32 payload size is not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

Manifest save_model(const ModelBundle& bundle, const std::filesystem::path& dir) {
  const std::size_t n = bundle.params.size();
  if (bundle.curvature && bundle.curvature->size() != n) {
    throw std::invalid_argument("curvature length does not match parameter count");
  }
  if (bundle.mask && bundle.mask->size() != n) {
    throw std::invalid_argument("mask length does not match parameter count");
  }
  if (bundle.adam_second_moment && bundle.adam_second_moment->size() != n) {
    throw std::invalid_argument("Adam moment length does not match parameter count");
  }

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  Manifest m;
  m.model_name = bundle.model_name;
  m.n_params = n;
  m.bits_per_param = bundle.params.source_bits();
  m.spans = bundle.params.spans();
  m.metadata = bundle.metadata;

  auto put = [&](const std::string& name, const std::vector<std::uint8_t>& bytes) {
    write_file(dir / name, bytes);
    m.sha256[name] = sha256_hex(bytes);
  };
  put(kParamsFile, encode_f32le(bundle.params.values()));
  if (bundle.curvature) {
    put(kCurvatureFile, encode_f32le(bundle.curvature->values()));
    m.metadata["curvature_source"] = to_string(bundle.curvature->source());
  }
  if (bundle.mask) {
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = bundle.mask->kept()[i] ? 1 : 0;
    put(kMaskFile, bytes);
  }
  if (bundle.adam_second_moment) put(kAdamFile, encode_f32le(*bundle.adam_second_moment));

  const std::string text = m.to_json().dump(2) + "\n";
  write_file(dir / kManifestFile, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return m;
}

ModelBundle load_model(const std::filesystem::path& dir) {
  const auto manifest_bytes = read_file(dir / kManifestFile);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  Manifest m = Manifest::from_json(j);
  if (m.n_params == 0) throw FormatError("manifest declares zero parameters");

  auto values = read_f32_payload(dir, m, kParamsFile);
  std::optional<ParamSet> params;
  try {
    params.emplace(std::move(values), m.spans, m.bits_per_param);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("inconsistent manifest: ") + e.what());
  }

  ModelBundle bundle{m.model_name, std::move(*params), std::nullopt, std::nullopt, std::nullopt};
  bundle.metadata = m.metadata;

  if (m.sha256.count(kCurvatureFile)) {
    const auto source = curvature_source_from_string(
        m.metadata.value("curvature_source", std::string("identity")));
    bundle.curvature.emplace(read_f32_payload(dir, m, kCurvatureFile), source);
  }
  if (m.sha256.count(kMaskFile)) {
    auto bytes = read_payload(dir, m, kMaskFile);
    if (bytes.size() != m.n_params) throw FormatError("mask length does not match manifest");
    std::vector<bool> kept(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      if (bytes[i] > 1) throw FormatError("mask bytes must be 0 or 1");
      kept[i] = bytes[i] == 1;
    }
    try {
      bundle.mask.emplace(std::move(kept));
    } catch (const std::invalid_argument& e) {
      throw FormatError(e.what());
    }
  }
  if (m.sha256.count(kAdamFile)) bundle.adam_second_moment = read_f32_payload(dir, m, kAdamFile);
  return bundle;
}

CompactedParams compact_unpruned(std::span<const double> values, std::span<const double> curvature,
                                 const PruneMask& mask) {
  if (values.size() != mask.size() || curvature.size() != values.size()) {
    throw std::invalid_argument("compact_unpruned: component lengths differ");
  }
  CompactedParams out;
  const std::size_t kept = mask.kept_count();
  out.values.reserve(kept);
  out.curvature.reserve(kept);
  out.positions.reserve(kept);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.kept()[i]) continue;
    out.values.push_back(values[i]);
    out.curvature.push_back(curvature[i]);
    out.positions.push_back(i);
  }
  return out;
}

}  // namespace nq
