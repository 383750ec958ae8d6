#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nq/param_store.hpp"
#include "nq/quantizers.hpp"

namespace nq {

enum class Activation { relu, tanh, none };
enum class LossKind { softmax_cross_entropy, mean_square_error };

std::string to_string(Activation a);
std::string to_string(LossKind l);
Activation activation_from_string(const std::string& s);
LossKind loss_from_string(const std::string& s);

// Fully connected network. Layer l maps layer_widths[l] -> layer_widths[l+1];
// the activation is applied to hidden layers only, the output layer is linear.
// Parameter layout per layer: weights (out x in, row-major) then biases.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::relu;
  LossKind loss = LossKind::softmax_cross_entropy;

  void validate() const;
  std::size_t num_layers() const { return layer_widths.size() - 1; }
  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t output_dim() const { return layer_widths.back(); }
  std::size_t param_count() const;
  std::vector<LayerSpan> spans() const;

  nlohmann::json to_json() const;
  static MlpSpec from_json(const nlohmann::json& j);
};

// Samples are rows. Classification data carries labels; regression data
// carries targets (target_dim per row). For the mean-square loss, labeled data
// without targets is trained against one-hot vectors.
struct Dataset {
  std::size_t input_dim = 0;
  std::vector<double> inputs;
  std::vector<int> labels;
  std::size_t target_dim = 0;
  std::vector<double> targets;

  std::size_t size() const { return input_dim == 0 ? 0 : inputs.size() / input_dim; }
  bool empty() const { return size() == 0; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(inputs).subspan(i * input_dim, input_dim);
  }
  Dataset slice(std::size_t first, std::size_t count) const;
  Dataset gather(std::span<const std::size_t> rows) const;
};

struct DataSplits {
  Dataset train;
  Dataset eval;
  std::optional<Dataset> hessian;  // defaults to the training split

  const Dataset& hessian_split() const { return hessian ? *hessian : train; }
};

// Deterministic Gaussian-blob classification problem.
struct BlobConfig {
  std::size_t n_features = 16;
  std::size_t n_classes = 8;
  std::size_t n_train = 2000;
  std::size_t n_eval = 4000;
  double center_scale = 1.0;  // std. dev. of class means
  double noise = 1.0;         // std. dev. of per-sample noise
  std::size_t clusters_per_class = 2;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static BlobConfig from_json(const nlohmann::json& j);
};

DataSplits make_blobs(const BlobConfig& cfg);

// CSV rows: label first, features after. The last `eval_fraction` of the rows
// form the evaluation split.
Dataset load_csv(const std::filesystem::path& path);
DataSplits split_dataset(const Dataset& all, double eval_fraction);

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

// Mean loss over the batch and its gradient with respect to every parameter.
LossAndGradient forward_loss(const MlpSpec& spec, std::span<const double> params,
                             const Dataset& batch);

// Network outputs (logits) for one input row.
std::vector<double> forward_outputs(const MlpSpec& spec, std::span<const double> params,
                                    std::span<const double> input);

struct AdamState {
  std::size_t step = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // v / (1 - beta2^t); the raw moments when no step was taken.
  std::vector<double> bias_corrected_second_moment() const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1;
};

struct TrainedModel {
  ParamSet params;
  double final_loss = 0.0;
  double eval_accuracy = 0.0;
  AdamState adam;
};

// Seeded initial weights (He for relu, Glorot otherwise; zero biases).
std::vector<double> initial_params(const MlpSpec& spec, std::uint64_t seed);

// Mini-batch Adam. Deterministic for a fixed seed; zero epochs returns the
// initial parameters. Throws NumericError when the loss becomes non-finite.
TrainedModel train_adam(const MlpSpec& spec, const DataSplits& data, const TrainConfig& cfg);

struct HessianOptions {
  double step = 1e-6;  // central-difference step on each coordinate
};

// Diagonal of the Hessian of the mean loss over `data`, by central finite
// differences of the analytic gradient, one coordinate at a time. Only the
// part of the network downstream of the perturbed coordinate is re-evaluated.
CurvatureDiag hessian_diag_exact(const MlpSpec& spec, std::span<const double> params,
                                 const Dataset& data, const HessianOptions& opts = {});

// Diagonal curvature by one backward pass per sample that propagates squared
// weights and drops the activation second-derivative and off-diagonal terms.
// Nonnegative by construction; exact for linear models with the square loss.
CurvatureDiag hessian_diag_gn(const MlpSpec& spec, std::span<const double> params,
                              const Dataset& data);

// sqrt(v_hat) + epsilon_alt.
CurvatureDiag adam_curvature(const AdamState& state, double epsilon_alt);
CurvatureDiag adam_curvature(std::span<const double> bias_corrected_second_moment,
                             double epsilon_alt);

// Prunes floor(fraction * N) smallest-magnitude parameters, lower index first on ties.
PruneMask prune_magnitude(std::span<const double> params, double fraction);

// Fraction of correctly classified rows (argmax of the outputs).
double eval_accuracy(const MlpSpec& spec, std::span<const double> params, const Dataset& eval);

struct QuantizedLayout {
  // Original parameter index of each quantized entry; empty means identity.
  std::span<const std::size_t> positions;
};

// Full parameter vector with quantized entries replaced by their centers.
// Entries outside `layout` keep the values from `base`.
std::vector<double> apply_codebook(std::span<const double> base, const QuantizedLayout& layout,
                                   const Assignment& assignment, const Codebook& codebook);

double eval_accuracy(const MlpSpec& spec, std::span<const double> base,
                     const QuantizedLayout& layout, const Assignment& assignment,
                     const Codebook& codebook, const Dataset& eval);

// Gradient of each shared center: the sum of its members' gradients.
std::vector<double> center_gradients(const Assignment& assignment, std::size_t k,
                                     std::span<const double> member_gradients);

struct FineTuneConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  std::uint64_t seed = 1;
};

struct FineTuneResult {
  Codebook codebook;
  double accuracy = 0.0;
};

// Plain SGD on the cluster centers with assignments frozen. Parameters outside
// the quantized layout (pruned ones) stay at their base values.
FineTuneResult fine_tune_centers(const MlpSpec& spec, std::span<const double> base,
                                 const QuantizedLayout& layout, const Assignment& assignment,
                                 const Codebook& codebook, const DataSplits& data,
                                 const FineTuneConfig& cfg);

}  // namespace nq
