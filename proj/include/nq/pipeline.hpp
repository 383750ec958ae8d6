#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nq/coding.hpp"
#include "nq/param_store.hpp"
#include "nq/quantizers.hpp"
#include "nq/refnet.hpp"

namespace nq {

enum class QuantizerKind { kmeans, hw_kmeans, uniform, ecsq };
enum class CurvatureChoice { exact, gauss_newton, adam, identity, stored };

std::string to_string(QuantizerKind q);
std::string to_string(CurvatureChoice c);
QuantizerKind quantizer_from_string(const std::string& s);
CurvatureChoice curvature_choice_from_string(const std::string& s);

// Every setting of the command-line pipeline. Text form is flat key=value
// lines; keys are listed by PipelineConfig::keys().
struct PipelineConfig {
  // paths
  std::string model_dir;
  std::string dataset;  // CSV path, "synthetic", or empty for the model's own
  std::string output_dir;
  std::string encoded;  // model.nq input of the report command

  // quantization
  QuantizerKind quantizer = QuantizerKind::kmeans;
  CurvatureChoice curvature = CurvatureChoice::identity;
  CodeScheme coding = CodeScheme::fixed;
  std::optional<std::size_t> k;
  std::optional<double> target_ratio;
  double lambda = 0.0;
  std::size_t ecsq_clusters = 32;
  double lambda_tolerance = 0.05;
  InitMethod init = InitMethod::linspace;
  std::size_t max_iters = 200;
  CenterRule center_rule = CenterRule::mean;
  double adam_epsilon = 0.0;
  double fd_step = 1e-6;
  std::size_t hessian_samples = 0;  // 0: the whole hessian split
  double prune_fraction = 0.0;
  bool fine_tune = false;
  FineTuneConfig ft;
  std::uint64_t seed = 1;

  // sweep
  std::vector<QuantizerKind> sweep_quantizers;
  std::vector<std::size_t> sweep_k;
  std::vector<double> sweep_lambda;

  // reference training
  std::string model_name = "mlp";
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  TrainConfig train;
  BlobConfig blobs;
  double eval_fraction = 0.2;

  // Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Every key with its effective value, one "key=value" per line.
  std::string to_text() const;

  // Quantize-command invariants. Throws ConfigError.
  void validate_quantize() const;
};

// Applies "key=value" lines ('#' starts a comment) on top of `cfg`.
void apply_config_text(PipelineConfig& cfg, const std::string& text, const std::string& origin = "config");
void apply_config_file(PipelineConfig& cfg, const std::filesystem::path& path);

struct LoadedData {
  DataSplits splits;
  nlohmann::json description;
};

// Resolves cfg.dataset, falling back to the dataset recorded in the model
// metadata. Throws IoError when a named dataset file does not exist.
std::optional<LoadedData> resolve_dataset(const PipelineConfig& cfg, const nlohmann::json& model_metadata);

// MLP shape recorded by train-ref, when present.
std::optional<MlpSpec> model_spec(const nlohmann::json& model_metadata);

// Loaded model after pruning and compaction, with curvature for the kept
// parameters.
struct PreparedModel {
  ModelBundle bundle;
  std::optional<MlpSpec> spec;
  std::optional<LoadedData> data;
  std::vector<double> base;  // full parameter vector, pruned entries zeroed
  std::optional<PruneMask> mask;
  CompactedParams compact;
  CurvatureSource curvature_source = CurvatureSource::identity;
  std::size_t curvature_clamped = 0;
  std::optional<double> unquantized_accuracy;
};

PreparedModel prepare_model(const PipelineConfig& cfg);

// Curvature for the full parameter vector per cfg.curvature.
CurvatureDiag compute_curvature(const PipelineConfig& cfg, const ModelBundle& bundle,
                                std::span<const double> params, const std::optional<MlpSpec>& spec,
                                const std::optional<LoadedData>& data);

struct QuantizeOutcome {
  Assignment assignment;
  Codebook codebook;  // empty clusters dropped, centers at storage precision
  PrefixCode code;
  EncodedModel encoded;
  QuantizeResult stats;
  std::size_t k_requested = 0;
  double lambda = 0.0;
  std::optional<double> entropy_budget;
  std::optional<bool> target_met;
  std::size_t lambda_evaluations = 0;
  std::optional<double> accuracy_pre_ft;
  std::optional<double> accuracy_post_ft;
};

// Quantizes, codes and (optionally) fine-tunes one configuration. Throws
// InfeasibleError when an entropy target cannot be met.
QuantizeOutcome quantize_prepared(const PreparedModel& prepared, const PipelineConfig& cfg);

// Numbers derived from a serialized model alone.
nlohmann::json describe_encoded(const DecodedModel& decoded, std::uint64_t file_bytes);

// Weight vector of a decoded model: centers at the stored positions, zero
// elsewhere.
std::vector<double> reconstruct_params(const DecodedModel& decoded);

nlohmann::json quantize_report(const PreparedModel& prepared, const PipelineConfig& cfg,
                               const QuantizeOutcome& outcome);

// Human-readable summary with accuracy and compression-ratio rows.
std::string format_report(const nlohmann::json& report);

// Command bodies. Outputs are staged and moved into place only after every
// stage succeeded.
void cmd_train_ref(const PipelineConfig& cfg);
void cmd_prune(const PipelineConfig& cfg);
void cmd_curvature(const PipelineConfig& cfg);
nlohmann::json cmd_quantize(const PipelineConfig& cfg);
std::string cmd_sweep(const PipelineConfig& cfg);
nlohmann::json cmd_report(const PipelineConfig& cfg);

inline constexpr const char* kSweepHeader = "# nq-sweep-csv v1";
inline constexpr const char* kEncodedFile = "model.nq";
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kConfigUsedFile = "config.used";
inline constexpr const char* kSweepFile = "sweep.csv";

// Writes `files` (name -> bytes) into `dir` through a staging directory.
void write_outputs(const std::filesystem::path& dir,
                   const std::vector<std::pair<std::string, std::string>>& files);

std::string format_number(double v);

}  // namespace nq
