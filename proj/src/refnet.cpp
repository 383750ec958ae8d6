#include "nq/refnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "nq/error.hpp"

namespace nq {

namespace {

struct LayerView {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;  // out x in, row-major
  std::size_t bias_offset = 0;
};

std::vector<LayerView> layer_views(const MlpSpec& spec) {
  std::vector<LayerView> views;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    LayerView v;
    v.in = spec.layer_widths[l];
    v.out = spec.layer_widths[l + 1];
    v.weight_offset = offset;
    v.bias_offset = offset + v.in * v.out;
    offset = v.bias_offset + v.out;
    views.push_back(v);
  }
  return views;
}

double activate(Activation act, double x) {
  switch (act) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
    case Activation::none: return x;
  }
  return x;
}

double activate_derivative(Activation act, double x) {
  switch (act) {
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::none: return 1.0;
  }
  return 1.0;
}

void check_params(const MlpSpec& spec, std::span<const double> params) {
  if (params.size() != spec.param_count()) {
    throw std::invalid_argument("parameter vector has " + std::to_string(params.size()) +
                                " entries, network needs " + std::to_string(spec.param_count()));
  }
}

void check_data(const MlpSpec& spec, const Dataset& data) {
  if (data.input_dim != spec.input_dim()) {
    throw std::invalid_argument("dataset input dimension " + std::to_string(data.input_dim) +
                                " does not match network input " + std::to_string(spec.input_dim()));
  }
  const std::size_t n = data.size();
  if (spec.loss == LossKind::softmax_cross_entropy) {
    if (data.labels.size() != n) throw std::invalid_argument("cross-entropy loss needs one label per row");
    for (int y : data.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= spec.output_dim()) {
        throw std::invalid_argument("label out of range");
      }
    }
  } else if (data.target_dim > 0) {
    if (data.target_dim != spec.output_dim() || data.targets.size() != n * data.target_dim) {
      throw std::invalid_argument("target dimension does not match network output");
    }
  } else if (data.labels.size() != n) {
    throw std::invalid_argument("square loss needs targets or labels");
  }
}

// Loss of one sample and its derivative with respect to the logits.
double loss_and_grad(const MlpSpec& spec, const Dataset& data, std::size_t row,
                     std::span<const double> logits, std::span<double> grad) {
  const std::size_t c = logits.size();
  if (spec.loss == LossKind::softmax_cross_entropy) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[k] - mx);
    const double lse = mx + std::log(z);
    const auto y = static_cast<std::size_t>(data.labels[row]);
    for (std::size_t k = 0; k < c; ++k) grad[k] = std::exp(logits[k] - lse) - (k == y ? 1.0 : 0.0);
    return lse - logits[y];
  }
  double loss = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    double t;
    if (data.target_dim > 0) {
      t = data.targets[row * data.target_dim + k];
    } else {
      t = static_cast<std::size_t>(data.labels[row]) == k ? 1.0 : 0.0;
    }
    grad[k] = logits[k] - t;
    loss += 0.5 * grad[k] * grad[k];
  }
  return loss;
}

// Per-sample activations. pre[l] are layer l pre-activations, post[l] the
// input to layer l (post[0] is the sample itself).
struct Activations {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
};

class Network {
 public:
  Network(const MlpSpec& spec, std::span<const double> params)
      : spec_(spec), params_(params), views_(layer_views(spec)) {
    check_params(spec, params);
    acts_.pre.resize(views_.size());
    acts_.post.resize(views_.size());
    deltas_.resize(views_.size());
    for (std::size_t l = 0; l < views_.size(); ++l) {
      acts_.pre[l].resize(views_[l].out);
      acts_.post[l].resize(views_[l].in);
      deltas_[l].resize(views_[l].out);
    }
  }

  const std::vector<LayerView>& views() const { return views_; }
  const Activations& activations() const { return acts_; }

  std::span<const double> forward(std::span<const double> input) {
    std::copy(input.begin(), input.end(), acts_.post[0].begin());
    for (std::size_t l = 0; l < views_.size(); ++l) {
      const auto& v = views_[l];
      const double* w = params_.data() + v.weight_offset;
      const double* b = params_.data() + v.bias_offset;
      const auto& x = acts_.post[l];
      auto& a = acts_.pre[l];
      for (std::size_t o = 0; o < v.out; ++o) {
        double s = b[o];
        const double* row = w + o * v.in;
        for (std::size_t i = 0; i < v.in; ++i) s += row[i] * x[i];
        a[o] = s;
      }
      if (l + 1 < views_.size()) {
        for (std::size_t o = 0; o < v.out; ++o) acts_.post[l + 1][o] = activate(spec_.activation, a[o]);
      }
    }
    return acts_.pre.back();
  }

  // Accumulates the gradient of one sample (after forward) into grad.
  double backward(const Dataset& data, std::size_t row, std::span<double> grad) {
    const std::size_t last = views_.size() - 1;
    const double loss = loss_and_grad(spec_, data, row, acts_.pre[last], deltas_[last]);
    for (std::size_t l = views_.size(); l-- > 0;) {
      const auto& v = views_[l];
      const auto& delta = deltas_[l];
      const auto& x = acts_.post[l];
      double* gw = grad.data() + v.weight_offset;
      double* gb = grad.data() + v.bias_offset;
      for (std::size_t o = 0; o < v.out; ++o) {
        const double d = delta[o];
        gb[o] += d;
        if (d == 0.0) continue;
        double* row_grad = gw + o * v.in;
        for (std::size_t i = 0; i < v.in; ++i) row_grad[i] += d * x[i];
      }
      if (l == 0) break;
      const double* w = params_.data() + v.weight_offset;
      auto& below = deltas_[l - 1];
      std::fill(below.begin(), below.end(), 0.0);
      for (std::size_t o = 0; o < v.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row_w = w + o * v.in;
        for (std::size_t i = 0; i < v.in; ++i) below[i] += row_w[i] * d;
      }
      for (std::size_t i = 0; i < v.in; ++i) below[i] *= activate_derivative(spec_.activation, acts_.pre[l - 1][i]);
    }
    return loss;
  }

 private:
  const MlpSpec& spec_;
  std::span<const double> params_;
  std::vector<LayerView> views_;
  Activations acts_;
  std::vector<std::vector<double>> deltas_;
};

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::none: return "none";
  }
  return "unknown";
}

std::string to_string(LossKind l) {
  return l == LossKind::softmax_cross_entropy ? "softmax_cross_entropy" : "mean_square_error";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "none" || s == "linear") return Activation::none;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

LossKind loss_from_string(const std::string& s) {
  if (s == "softmax_cross_entropy" || s == "cross_entropy") return LossKind::softmax_cross_entropy;
  if (s == "mean_square_error" || s == "mse") return LossKind::mean_square_error;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

void MlpSpec::validate() const {
  if (layer_widths.size() < 2) throw std::invalid_argument("an MLP needs at least input and output widths");
  for (auto w : layer_widths) {
    if (w == 0) throw std::invalid_argument("layer widths must be positive");
  }
}

std::size_t MlpSpec::param_count() const {
  validate();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) {
    n += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
  }
  return n;
}

std::vector<LayerSpan> MlpSpec::spans() const {
  std::vector<LayerSpan> spans;
  for (const auto& v : layer_views(*this)) {
    const std::string base = "fc" + std::to_string(spans.size() / 2);
    spans.push_back({base + ".weight", v.weight_offset, v.in * v.out});
    spans.push_back({base + ".bias", v.bias_offset, v.out});
  }
  return spans;
}

nlohmann::json MlpSpec::to_json() const {
  return {{"layer_widths", layer_widths}, {"activation", to_string(activation)}, {"loss", to_string(loss)}};
}

MlpSpec MlpSpec::from_json(const nlohmann::json& j) {
  MlpSpec spec;
  spec.layer_widths = j.at("layer_widths").get<std::vector<std::size_t>>();
  spec.activation = activation_from_string(j.at("activation").get<std::string>());
  spec.loss = loss_from_string(j.at("loss").get<std::string>());
  spec.validate();
  return spec;
}

Dataset Dataset::slice(std::size_t first, std::size_t count) const {
  if (first + count > size()) throw std::out_of_range("dataset slice out of range");
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), first);
  return gather(rows);
}

Dataset Dataset::gather(std::span<const std::size_t> rows) const {
  Dataset out;
  out.input_dim = input_dim;
  out.target_dim = target_dim;
  out.inputs.reserve(rows.size() * input_dim);
  for (auto r : rows) {
    const auto x = row(r);
    out.inputs.insert(out.inputs.end(), x.begin(), x.end());
    if (!labels.empty()) out.labels.push_back(labels[r]);
    if (target_dim > 0) {
      const auto* t = targets.data() + r * target_dim;
      out.targets.insert(out.targets.end(), t, t + target_dim);
    }
  }
  return out;
}

nlohmann::json BlobConfig::to_json() const {
  return {{"kind", "synthetic_blobs"},
          {"n_features", n_features},
          {"n_classes", n_classes},
          {"n_train", n_train},
          {"n_eval", n_eval},
          {"center_scale", center_scale},
          {"noise", noise},
          {"clusters_per_class", clusters_per_class},
          {"seed", seed}};
}

BlobConfig BlobConfig::from_json(const nlohmann::json& j) {
  BlobConfig c;
  c.n_features = j.at("n_features").get<std::size_t>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_eval = j.at("n_eval").get<std::size_t>();
  c.center_scale = j.at("center_scale").get<double>();
  c.noise = j.at("noise").get<double>();
  c.clusters_per_class = j.at("clusters_per_class").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

DataSplits make_blobs(const BlobConfig& cfg) {
  if (cfg.n_features == 0 || cfg.n_classes == 0 || cfg.clusters_per_class == 0) {
    throw std::invalid_argument("blob dimensions must be positive");
  }
  if (cfg.n_train == 0 || cfg.n_eval == 0) throw std::invalid_argument("blob splits must be nonempty");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n_modes = cfg.n_classes * cfg.clusters_per_class;
  std::vector<double> means(n_modes * cfg.n_features);
  for (auto& m : means) m = cfg.center_scale * normal(rng);

  auto sample = [&](std::size_t count, std::mt19937_64& gen) {
    Dataset d;
    d.input_dim = cfg.n_features;
    d.inputs.reserve(count * cfg.n_features);
    std::uniform_int_distribution<std::size_t> pick_mode(0, cfg.clusters_per_class - 1);
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t label = s % cfg.n_classes;
      const std::size_t mode = label * cfg.clusters_per_class + pick_mode(gen);
      for (std::size_t f = 0; f < cfg.n_features; ++f) {
        d.inputs.push_back(means[mode * cfg.n_features + f] + cfg.noise * normal(gen));
      }
      d.labels.push_back(static_cast<int>(label));
    }
    return d;
  };
  std::mt19937_64 train_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::mt19937_64 eval_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 2);
  DataSplits splits;
  splits.train = sample(cfg.n_train, train_rng);
  splits.eval = sample(cfg.n_eval, eval_rng);
  return splits;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  Dataset d;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
      }
    }
    if (row.size() < 2) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": need label and features");
    if (d.input_dim == 0) d.input_dim = row.size() - 1;
    if (row.size() - 1 != d.input_dim) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": inconsistent column count");
    }
    const double label = row[0];
    if (label < 0 || label != std::floor(label)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": label must be a nonnegative integer");
    }
    d.labels.push_back(static_cast<int>(label));
    d.inputs.insert(d.inputs.end(), row.begin() + 1, row.end());
  }
  if (d.empty()) throw FormatError("dataset " + path.string() + " has no rows");
  return d;
}

DataSplits split_dataset(const Dataset& all, double eval_fraction) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw std::invalid_argument("eval fraction must be in (0, 1)");
  const auto n = all.size();
  const auto n_eval = static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(n)));
  if (n_eval == 0 || n_eval >= n) throw std::invalid_argument("dataset too small to split");
  DataSplits s;
  s.train = all.slice(0, n - n_eval);
  s.eval = all.slice(n - n_eval, n_eval);
  return s;
}

LossAndGradient forward_loss(const MlpSpec& spec, std::span<const double> params, const Dataset& batch) {
  check_params(spec, params);
  check_data(spec, batch);
  if (batch.empty()) throw std::invalid_argument("empty batch");
  Network net(spec, params);
  LossAndGradient out;
  out.gradient.assign(params.size(), 0.0);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    net.forward(batch.row(s));
    out.loss += net.backward(batch, s, out.gradient);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (auto& g : out.gradient) g *= inv;
  return out;
}

std::vector<double> forward_outputs(const MlpSpec& spec, std::span<const double> params,
                                    std::span<const double> input) {
  if (input.size() != spec.input_dim()) throw std::invalid_argument("input dimension mismatch");
  Network net(spec, params);
  auto out = net.forward(input);
  return {out.begin(), out.end()};
}

std::vector<double> AdamState::bias_corrected_second_moment() const {
  if (step == 0) return second_moment;
  const double correction = 1.0 - std::pow(beta2, static_cast<double>(step));
  std::vector<double> v(second_moment);
  for (auto& x : v) x /= correction;
  return v;
}

std::vector<double> initial_params(const MlpSpec& spec, std::uint64_t seed) {
  std::vector<double> params(spec.param_count(), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& v : layer_views(spec)) {
    const double scale = spec.activation == Activation::relu
                             ? std::sqrt(2.0 / static_cast<double>(v.in))
                             : std::sqrt(2.0 / static_cast<double>(v.in + v.out));
    for (std::size_t i = 0; i < v.in * v.out; ++i) params[v.weight_offset + i] = scale * normal(rng);
  }
  return params;
}

TrainedModel train_adam(const MlpSpec& spec, const DataSplits& data, const TrainConfig& cfg) {
  spec.validate();
  check_data(spec, data.train);
  if (data.train.empty()) throw std::invalid_argument("empty training split");
  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");

  std::vector<double> w = initial_params(spec, cfg.seed);
  AdamState adam;
  adam.first_moment.assign(w.size(), 0.0);
  adam.second_moment.assign(w.size(), 0.0);
  adam.learning_rate = cfg.learning_rate;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.epsilon = cfg.epsilon;

  std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      const Dataset batch = data.train.gather(std::span(order).subspan(start, count));
      const auto lg = forward_loss(spec, w, batch);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
      }
      ++adam.step;
      const double t = static_cast<double>(adam.step);
      const double c1 = 1.0 - std::pow(adam.beta1, t);
      const double c2 = 1.0 - std::pow(adam.beta2, t);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = lg.gradient[i];
        adam.first_moment[i] = adam.beta1 * adam.first_moment[i] + (1.0 - adam.beta1) * g;
        adam.second_moment[i] = adam.beta2 * adam.second_moment[i] + (1.0 - adam.beta2) * g * g;
        const double m_hat = adam.first_moment[i] / c1;
        const double v_hat = adam.second_moment[i] / c2;
        w[i] -= adam.learning_rate * m_hat / (std::sqrt(v_hat) + adam.epsilon);
      }
    }
  }

  const double final_loss = forward_loss(spec, w, data.train).loss;
  if (!std::isfinite(final_loss)) throw NumericError("training diverged (non-finite final loss)");
  const double acc = data.eval.empty() ? 0.0 : eval_accuracy(spec, w, data.eval);
  return TrainedModel{ParamSet(std::move(w), spec.spans()), final_loss, acc, std::move(adam)};
}

CurvatureDiag hessian_diag_exact(const MlpSpec& spec, std::span<const double> params,
                                 const Dataset& data, const HessianOptions& opts) {
  check_params(spec, params);
  check_data(spec, data);
  if (data.empty()) throw std::invalid_argument("empty Hessian split");
  if (!(opts.step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");

  const Activation act = spec.activation;
  Network net(spec, params);
  const auto views = net.views();
  const std::size_t n_layers = views.size();
  const std::size_t n_samples = data.size();

  // Cache every sample's activations once.
  std::vector<Activations> cache(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    net.forward(data.row(s));
    cache[s] = net.activations();
  }

  std::vector<std::vector<double>> pre(n_layers), delta(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    pre[l].resize(views[l].out);
    delta[l].resize(views[l].out);
  }

  // Backpropagated error at unit `o` of layer `l` when its pre-activation is
  // replaced by `a_new` (everything upstream unchanged).
  auto perturbed_delta = [&](std::size_t s, std::size_t l, std::size_t o, double a_new) {
    const Activations& c = cache[s];
    const std::size_t last = n_layers - 1;
    if (l == last) {
      std::copy(c.pre[last].begin(), c.pre[last].end(), pre[last].begin());
      pre[last][o] = a_new;
      loss_and_grad(spec, data, s, pre[last], delta[last]);
      return delta[last][o];
    }
    const double dz = activate(act, a_new) - c.post[l + 1][o];
    {
      const auto& v = views[l + 1];
      const double* w = params.data() + v.weight_offset;
      for (std::size_t k = 0; k < v.out; ++k) pre[l + 1][k] = c.pre[l + 1][k] + w[k * v.in + o] * dz;
    }
    for (std::size_t m = l + 2; m < n_layers; ++m) {
      const auto& v = views[m];
      const double* w = params.data() + v.weight_offset;
      const double* b = params.data() + v.bias_offset;
      for (std::size_t k = 0; k < v.out; ++k) {
        double sum = b[k];
        const double* row = w + k * v.in;
        for (std::size_t i = 0; i < v.in; ++i) sum += row[i] * activate(act, pre[m - 1][i]);
        pre[m][k] = sum;
      }
    }
    loss_and_grad(spec, data, s, pre[last], delta[last]);
    for (std::size_t m = last; m > l + 1; --m) {
      const auto& v = views[m];
      const double* w = params.data() + v.weight_offset;
      auto& below = delta[m - 1];
      std::fill(below.begin(), below.end(), 0.0);
      for (std::size_t k = 0; k < v.out; ++k) {
        const double d = delta[m][k];
        if (d == 0.0) continue;
        for (std::size_t i = 0; i < v.in; ++i) below[i] += w[k * v.in + i] * d;
      }
      for (std::size_t i = 0; i < v.in; ++i) below[i] *= activate_derivative(act, pre[m - 1][i]);
    }
    const auto& up = views[l + 1];
    const double* w = params.data() + up.weight_offset;
    double back = 0.0;
    for (std::size_t k = 0; k < up.out; ++k) back += w[k * up.in + o] * delta[l + 1][k];
    return activate_derivative(act, a_new) * back;
  };

  const double eps = opts.step;
  std::vector<double> h(params.size(), 0.0);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& v = views[l];
    for (std::size_t o = 0; o < v.out; ++o) {
      // Column i < in is weight (o, i); column in is the bias.
      for (std::size_t i = 0; i <= v.in; ++i) {
        double sum = 0.0;
        for (std::size_t s = 0; s < n_samples; ++s) {
          const double factor = i < v.in ? cache[s].post[l][i] : 1.0;
          if (factor == 0.0) continue;
          const double a0 = cache[s].pre[l][o];
          const double up = perturbed_delta(s, l, o, a0 + eps * factor);
          const double down = perturbed_delta(s, l, o, a0 - eps * factor);
          sum += (up - down) * factor;
        }
        const double value = sum / (2.0 * eps * static_cast<double>(n_samples));
        if (!std::isfinite(value)) throw NumericError("non-finite second derivative");
        const std::size_t p = i < v.in ? v.weight_offset + o * v.in + i : v.bias_offset + o;
        h[p] = value;
      }
    }
  }
  return CurvatureDiag(std::move(h), CurvatureSource::exact_hessian);
}

CurvatureDiag hessian_diag_gn(const MlpSpec& spec, std::span<const double> params, const Dataset& data) {
  check_params(spec, params);
  check_data(spec, data);
  if (data.empty()) throw std::invalid_argument("empty Hessian split");
  Network net(spec, params);
  const auto views = net.views();
  const std::size_t n_layers = views.size();
  std::vector<std::vector<double>> curv(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) curv[l].resize(views[l].out);
  std::vector<double> grad(spec.output_dim());

  std::vector<double> h(params.size(), 0.0);
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto logits = net.forward(data.row(s));
    const auto& acts = net.activations();
    auto& top = curv[n_layers - 1];
    if (spec.loss == LossKind::softmax_cross_entropy) {
      // grad = p - y, so p_k = grad_k + [k == y].
      loss_and_grad(spec, data, s, logits, grad);
      const auto y = static_cast<std::size_t>(data.labels[s]);
      for (std::size_t k = 0; k < top.size(); ++k) {
        const double p = grad[k] + (k == y ? 1.0 : 0.0);
        top[k] = p * (1.0 - p);
      }
    } else {
      std::fill(top.begin(), top.end(), 1.0);
    }
    for (std::size_t l = n_layers; l-- > 0;) {
      const auto& v = views[l];
      const auto& x = acts.post[l];
      for (std::size_t o = 0; o < v.out; ++o) {
        const double c = curv[l][o];
        h[v.bias_offset + o] += c;
        double* hw = h.data() + v.weight_offset + o * v.in;
        for (std::size_t i = 0; i < v.in; ++i) hw[i] += c * x[i] * x[i];
      }
      if (l == 0) break;
      const double* w = params.data() + v.weight_offset;
      auto& below = curv[l - 1];
      std::fill(below.begin(), below.end(), 0.0);
      for (std::size_t o = 0; o < v.out; ++o) {
        const double c = curv[l][o];
        if (c == 0.0) continue;
        for (std::size_t i = 0; i < v.in; ++i) below[i] += w[o * v.in + i] * w[o * v.in + i] * c;
      }
      for (std::size_t i = 0; i < v.in; ++i) {
        const double d = activate_derivative(spec.activation, acts.pre[l - 1][i]);
        below[i] *= d * d;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  for (auto& x : h) x *= inv;
  return CurvatureDiag(std::move(h), CurvatureSource::gauss_newton);
}

CurvatureDiag adam_curvature(std::span<const double> v_hat, double epsilon_alt) {
  if (!(epsilon_alt >= 0.0)) throw std::invalid_argument("epsilon_alt must be nonnegative");
  std::vector<double> out(v_hat.size());
  for (std::size_t i = 0; i < v_hat.size(); ++i) {
    if (!(v_hat[i] >= 0.0)) throw std::invalid_argument("second moments must be nonnegative");
    out[i] = std::sqrt(v_hat[i]) + epsilon_alt;
  }
  return CurvatureDiag(std::move(out), CurvatureSource::adam_sqrt_moment);
}

CurvatureDiag adam_curvature(const AdamState& state, double epsilon_alt) {
  const auto v_hat = state.bias_corrected_second_moment();
  return adam_curvature(v_hat, epsilon_alt);
}

PruneMask prune_magnitude(std::span<const double> params, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("prune fraction must be in [0, 1)");
  const std::size_t n = params.size();
  const auto pruned = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (pruned >= n) throw std::invalid_argument("prune fraction would remove every parameter");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(params[a]) < std::abs(params[b]); });
  std::vector<bool> kept(n, true);
  for (std::size_t r = 0; r < pruned; ++r) kept[order[r]] = false;
  return PruneMask(std::move(kept));
}

double eval_accuracy(const MlpSpec& spec, std::span<const double> params, const Dataset& eval) {
  if (eval.empty()) throw std::invalid_argument("empty evaluation split");
  if (eval.labels.size() != eval.size()) throw std::invalid_argument("evaluation needs labels");
  if (eval.input_dim != spec.input_dim()) throw std::invalid_argument("dataset input dimension mismatch");
  Network net(spec, params);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < eval.size(); ++s) {
    if (argmax(net.forward(eval.row(s))) == static_cast<std::size_t>(eval.labels[s])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

std::vector<double> apply_codebook(std::span<const double> base, const QuantizedLayout& layout,
                                   const Assignment& assignment, const Codebook& codebook) {
  std::vector<double> w(base.begin(), base.end());
  if (layout.positions.empty()) {
    if (assignment.size() != base.size()) throw std::invalid_argument("assignment length mismatch");
  } else if (layout.positions.size() != assignment.size()) {
    throw std::invalid_argument("one position per quantized parameter is required");
  }
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= codebook.k()) throw std::out_of_range("assignment refers to a missing cluster");
    const std::size_t p = layout.positions.empty() ? i : layout.positions[i];
    if (p >= w.size()) throw std::out_of_range("position out of range");
    w[p] = codebook.centers[assignment[i]];
  }
  return w;
}

double eval_accuracy(const MlpSpec& spec, std::span<const double> base, const QuantizedLayout& layout,
                     const Assignment& assignment, const Codebook& codebook, const Dataset& eval) {
  const auto w = apply_codebook(base, layout, assignment, codebook);
  return eval_accuracy(spec, w, eval);
}

std::vector<double> center_gradients(const Assignment& assignment, std::size_t k,
                                     std::span<const double> member_gradients) {
  if (member_gradients.size() != assignment.size()) throw std::invalid_argument("gradient length mismatch");
  std::vector<double> g(k, 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= k) throw std::out_of_range("assignment refers to a missing cluster");
    g[assignment[i]] += member_gradients[i];
  }
  return g;
}

FineTuneResult fine_tune_centers(const MlpSpec& spec, std::span<const double> base,
                                 const QuantizedLayout& layout, const Assignment& assignment,
                                 const Codebook& codebook, const DataSplits& data,
                                 const FineTuneConfig& cfg) {
  check_params(spec, base);
  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  Codebook cb = codebook;
  std::mt19937_64 rng(cfg.seed ^ 0x5EEDF1E7C0DEB00CULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> member(assignment.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      const Dataset batch = data.train.gather(std::span(order).subspan(start, count));
      const auto w = apply_codebook(base, layout, assignment, cb);
      const auto lg = forward_loss(spec, w, batch);
      if (!std::isfinite(lg.loss)) throw NumericError("center fine-tuning diverged");
      for (std::size_t i = 0; i < assignment.size(); ++i) {
        member[i] = lg.gradient[layout.positions.empty() ? i : layout.positions[i]];
      }
      const auto g = center_gradients(assignment, cb.k(), member);
      for (std::size_t j = 0; j < cb.k(); ++j) cb.centers[j] -= cfg.learning_rate * g[j];
    }
  }
  const double acc = eval_accuracy(spec, base, layout, assignment, cb, data.eval);
  return FineTuneResult{std::move(cb), acc};
}

}  // namespace nq
