#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace nq {

// A named contiguous slice of the flat parameter vector (one per layer tensor).
struct LayerSpan {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;

  bool operator==(const LayerSpan&) const = default;
};

// All trainable parameters of a network as one flat vector, plus the layer
// table. Values are held in double precision; the on-disk payload is 32-bit,
// so only float-representable values survive a save/load cycle bit-exactly.
class ParamSet {
 public:
  ParamSet(std::vector<double> values, std::vector<LayerSpan> spans,
           unsigned source_bits = 32);

  // Convenience for a parameter set with a single span covering everything.
  static ParamSet flat(std::vector<double> values, std::string name = "params",
                       unsigned source_bits = 32);

  std::span<const double> values() const { return values_; }
  const std::vector<LayerSpan>& spans() const { return spans_; }
  unsigned source_bits() const { return source_bits_; }
  std::size_t size() const { return values_.size(); }

  // Same layer table, new values.
  ParamSet with_values(std::vector<double> values) const;

 private:
  std::vector<double> values_;
  std::vector<LayerSpan> spans_;
  unsigned source_bits_;
};

// Bitwise equality of values (distinguishes -0.0 from 0.0), spans and bits.
bool bitwise_equal(const ParamSet& a, const ParamSet& b);

// Rounds every value to the nearest float32.
ParamSet round_to_float32(const ParamSet& ps);

enum class CurvatureSource { exact_hessian, gauss_newton, adam_sqrt_moment, identity };

std::string to_string(CurvatureSource s);
CurvatureSource curvature_source_from_string(const std::string& s);

inline constexpr double kCurvatureFloor = 1e-12;

// Per-parameter nonnegative curvature weights h_ii. Every entry is raised to at
// least kCurvatureFloor at construction; clamped() counts how many entries were
// below the floor (including negative raw second derivatives).
class CurvatureDiag {
 public:
  CurvatureDiag(std::vector<double> values, CurvatureSource source);

  static CurvatureDiag identity(std::size_t n);

  std::span<const double> values() const { return values_; }
  CurvatureSource source() const { return source_; }
  std::size_t size() const { return values_.size(); }
  std::size_t clamped() const { return clamped_; }

 private:
  std::vector<double> values_;
  CurvatureSource source_;
  std::size_t clamped_ = 0;
};

class PruneMask {
 public:
  explicit PruneMask(std::vector<bool> kept);

  static PruneMask all_kept(std::size_t n) { return PruneMask(std::vector<bool>(n, true)); }

  const std::vector<bool>& kept() const { return kept_; }
  std::size_t size() const { return kept_.size(); }
  std::size_t kept_count() const;
  bool all() const { return kept_count() == kept_.size(); }

  bool operator==(const PruneMask&) const = default;

 private:
  std::vector<bool> kept_;
};

struct Manifest {
  std::string model_name;
  std::size_t n_params = 0;
  unsigned bits_per_param = 32;
  std::vector<LayerSpan> spans;
  std::map<std::string, std::string> sha256;  // payload file name -> hex digest
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

// Everything stored in a model directory. adam_second_moment holds the
// bias-corrected Adam second moment estimates when the producer had them.
struct ModelBundle {
  std::string model_name = "model";
  ParamSet params;
  std::optional<CurvatureDiag> curvature;
  std::optional<PruneMask> mask;
  std::optional<std::vector<double>> adam_second_moment;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kParamsFile = "params.f32le";
inline constexpr const char* kCurvatureFile = "curvature.f32le";
inline constexpr const char* kMaskFile = "mask.u8";
inline constexpr const char* kAdamFile = "adam_vhat.f32le";

// Writes the bundle into `dir` (created if needed) and returns the manifest.
// Throws std::invalid_argument on component length mismatch, IoError on
// filesystem failures.
Manifest save_model(const ModelBundle& bundle, const std::filesystem::path& dir);

// Throws IoError for missing files, ChecksumError for digest mismatches and
// FormatError for inconsistent sizes or non-finite values.
ModelBundle load_model(const std::filesystem::path& dir);

struct CompactedParams {
  std::vector<double> values;
  std::vector<double> curvature;
  std::vector<std::size_t> positions;  // original index of each kept entry
};

// Keeps only unpruned entries, preserving order.
CompactedParams compact_unpruned(std::span<const double> values,
                                 std::span<const double> curvature, const PruneMask& mask);

// Little-endian float32 encoding used by every payload file.
std::vector<std::uint8_t> encode_f32le(std::span<const double> values);
std::vector<double> decode_f32le(std::span<const std::uint8_t> bytes);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace nq
