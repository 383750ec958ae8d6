#include "nq/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <system_error>

#include "nq/error.hpp"

namespace nq {

namespace fs = std::filesystem;

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string to_string(QuantizerKind q) {
  switch (q) {
    case QuantizerKind::kmeans: return "kmeans";
    case QuantizerKind::hw_kmeans: return "hw-kmeans";
    case QuantizerKind::uniform: return "uniform";
    case QuantizerKind::ecsq: return "ecsq";
  }
  return "unknown";
}

std::string to_string(CurvatureChoice c) {
  switch (c) {
    case CurvatureChoice::exact: return "exact";
    case CurvatureChoice::gauss_newton: return "gauss-newton";
    case CurvatureChoice::adam: return "adam";
    case CurvatureChoice::identity: return "identity";
    case CurvatureChoice::stored: return "stored";
  }
  return "unknown";
}

QuantizerKind quantizer_from_string(const std::string& s) {
  if (s == "kmeans") return QuantizerKind::kmeans;
  if (s == "hw-kmeans") return QuantizerKind::hw_kmeans;
  if (s == "uniform") return QuantizerKind::uniform;
  if (s == "ecsq") return QuantizerKind::ecsq;
  throw ConfigError("unknown quantizer '" + s + "' (kmeans, hw-kmeans, uniform, ecsq)");
}

CurvatureChoice curvature_choice_from_string(const std::string& s) {
  if (s == "exact") return CurvatureChoice::exact;
  if (s == "gauss-newton") return CurvatureChoice::gauss_newton;
  if (s == "adam") return CurvatureChoice::adam;
  if (s == "identity") return CurvatureChoice::identity;
  if (s == "stored") return CurvatureChoice::stored;
  throw ConfigError("unknown curvature '" + s + "' (exact, gauss-newton, adam, identity, stored)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(x)) {
    throw ConfigError(key + ": not a number: '" + v + "'");
  }
  return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": not a nonnegative integer: '" + v + "'");
  }
  return x;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += fmt(items[i]);
  }
  return out;
}

struct KeyDef {
  std::string name;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

#define NQ_SIZE_KEY(NAME, FIELD)                                                        \
  KeyDef { NAME, [](PipelineConfig& c, const std::string& v) { c.FIELD = parse_size(NAME, v); }, \
           [](const PipelineConfig& c) { return std::to_string(c.FIELD); } }
#define NQ_DOUBLE_KEY(NAME, FIELD)                                                        \
  KeyDef { NAME, [](PipelineConfig& c, const std::string& v) { c.FIELD = parse_double(NAME, v); }, \
           [](const PipelineConfig& c) { return format_number(c.FIELD); } }
#define NQ_STRING_KEY(NAME, FIELD)                                        \
  KeyDef { NAME, [](PipelineConfig& c, const std::string& v) { c.FIELD = v; }, \
           [](const PipelineConfig& c) { return c.FIELD; } }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      NQ_STRING_KEY("model_dir", model_dir),
      NQ_STRING_KEY("dataset", dataset),
      NQ_STRING_KEY("output_dir", output_dir),
      NQ_STRING_KEY("encoded", encoded),
      {"quantizer", [](PipelineConfig& c, const std::string& v) { c.quantizer = quantizer_from_string(v); },
       [](const PipelineConfig& c) { return to_string(c.quantizer); }},
      {"curvature", [](PipelineConfig& c, const std::string& v) { c.curvature = curvature_choice_from_string(v); },
       [](const PipelineConfig& c) { return to_string(c.curvature); }},
      {"coding",
       [](PipelineConfig& c, const std::string& v) {
         try {
           c.coding = code_scheme_from_string(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError("unknown coding '" + v + "' (fixed, huffman)");
         }
       },
       [](const PipelineConfig& c) { return to_string(c.coding); }},
      {"k",
       [](PipelineConfig& c, const std::string& v) {
         if (v.empty() || v == "none") c.k.reset();
         else c.k = parse_size("k", v);
       },
       [](const PipelineConfig& c) { return c.k ? std::to_string(*c.k) : std::string("none"); }},
      {"target_ratio",
       [](PipelineConfig& c, const std::string& v) {
         if (v.empty() || v == "none") c.target_ratio.reset();
         else c.target_ratio = parse_double("target_ratio", v);
       },
       [](const PipelineConfig& c) { return c.target_ratio ? format_number(*c.target_ratio) : std::string("none"); }},
      NQ_DOUBLE_KEY("lambda", lambda),
      NQ_SIZE_KEY("ecsq_clusters", ecsq_clusters),
      NQ_DOUBLE_KEY("lambda_tolerance", lambda_tolerance),
      {"init",
       [](PipelineConfig& c, const std::string& v) {
         try {
           c.init = init_method_from_string(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError("unknown init '" + v + "' (linspace, quantile, seeded_random)");
         }
       },
       [](const PipelineConfig& c) { return to_string(c.init); }},
      NQ_SIZE_KEY("max_iters", max_iters),
      {"center_rule",
       [](PipelineConfig& c, const std::string& v) {
         if (v == "mean") c.center_rule = CenterRule::mean;
         else if (v == "hessian_weighted_mean") c.center_rule = CenterRule::hessian_weighted_mean;
         else throw ConfigError("unknown center_rule '" + v + "' (mean, hessian_weighted_mean)");
       },
       [](const PipelineConfig& c) {
         return std::string(c.center_rule == CenterRule::mean ? "mean" : "hessian_weighted_mean");
       }},
      NQ_DOUBLE_KEY("adam_epsilon", adam_epsilon),
      NQ_DOUBLE_KEY("fd_step", fd_step),
      NQ_SIZE_KEY("hessian_samples", hessian_samples),
      NQ_DOUBLE_KEY("prune_fraction", prune_fraction),
      {"fine_tune", [](PipelineConfig& c, const std::string& v) { c.fine_tune = parse_bool("fine_tune", v); },
       [](const PipelineConfig& c) { return std::string(c.fine_tune ? "true" : "false"); }},
      NQ_SIZE_KEY("ft_epochs", ft.epochs),
      NQ_SIZE_KEY("ft_batch_size", ft.batch_size),
      NQ_DOUBLE_KEY("ft_learning_rate", ft.learning_rate),
      {"seed", [](PipelineConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
       [](const PipelineConfig& c) { return std::to_string(c.seed); }},
      {"sweep_quantizers",
       [](PipelineConfig& c, const std::string& v) {
         c.sweep_quantizers.clear();
         for (const auto& s : split_list(v)) c.sweep_quantizers.push_back(quantizer_from_string(s));
       },
       [](const PipelineConfig& c) {
         return join(c.sweep_quantizers, [](QuantizerKind q) { return to_string(q); });
       }},
      {"sweep_k",
       [](PipelineConfig& c, const std::string& v) {
         c.sweep_k.clear();
         for (const auto& s : split_list(v)) c.sweep_k.push_back(parse_size("sweep_k", s));
       },
       [](const PipelineConfig& c) { return join(c.sweep_k, [](std::size_t k) { return std::to_string(k); }); }},
      {"sweep_lambda",
       [](PipelineConfig& c, const std::string& v) {
         c.sweep_lambda.clear();
         for (const auto& s : split_list(v)) c.sweep_lambda.push_back(parse_double("sweep_lambda", s));
       },
       [](const PipelineConfig& c) { return join(c.sweep_lambda, [](double l) { return format_number(l); }); }},
      NQ_STRING_KEY("model_name", model_name),
      {"hidden",
       [](PipelineConfig& c, const std::string& v) {
         c.hidden.clear();
         for (const auto& s : split_list(v)) c.hidden.push_back(parse_size("hidden", s));
       },
       [](const PipelineConfig& c) { return join(c.hidden, [](std::size_t w) { return std::to_string(w); }); }},
      {"activation",
       [](PipelineConfig& c, const std::string& v) {
         try {
           c.activation = activation_from_string(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError("unknown activation '" + v + "' (relu, tanh, none)");
         }
       },
       [](const PipelineConfig& c) { return to_string(c.activation); }},
      NQ_SIZE_KEY("epochs", train.epochs),
      NQ_SIZE_KEY("batch_size", train.batch_size),
      NQ_DOUBLE_KEY("learning_rate", train.learning_rate),
      NQ_DOUBLE_KEY("eval_fraction", eval_fraction),
      NQ_SIZE_KEY("blob_features", blobs.n_features),
      NQ_SIZE_KEY("blob_classes", blobs.n_classes),
      NQ_SIZE_KEY("blob_train", blobs.n_train),
      NQ_SIZE_KEY("blob_eval", blobs.n_eval),
      NQ_DOUBLE_KEY("blob_center_scale", blobs.center_scale),
      NQ_DOUBLE_KEY("blob_noise", blobs.noise),
      NQ_SIZE_KEY("blob_clusters_per_class", blobs.clusters_per_class),
  };
  return defs;
}

#undef NQ_SIZE_KEY
#undef NQ_DOUBLE_KEY
#undef NQ_STRING_KEY

const KeyDef& find_key(const std::string& key) {
  for (const auto& d : key_defs()) {
    if (d.name == key) return d;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// Rows [0, n) of the training split, or all of it for n == 0.
Dataset hessian_rows(const PipelineConfig& cfg, const LoadedData& data) {
  const Dataset& split = data.splits.hessian_split();
  if (cfg.hessian_samples == 0) return split;
  if (cfg.hessian_samples > split.size()) {
    throw ConfigError("hessian_samples " + std::to_string(cfg.hessian_samples) + " exceeds the " +
                      std::to_string(split.size()) + " available samples");
  }
  return split.slice(0, cfg.hessian_samples);
}

bool needs_curvature(const PipelineConfig& cfg) {
  switch (cfg.quantizer) {
    case QuantizerKind::kmeans: return false;
    case QuantizerKind::uniform: return cfg.center_rule == CenterRule::hessian_weighted_mean;
    default: return true;
  }
}

std::string encoded_bytes(const EncodedModel& em) { return std::string(em.bytes.begin(), em.bytes.end()); }

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) { find_key(key).set(*this, trim(value)); }

std::string PipelineConfig::get(const std::string& key) const { return find_key(key).get(*this); }

const std::vector<std::string>& PipelineConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& d : key_defs()) n.push_back(d.name);
    return n;
  }();
  return names;
}

std::string PipelineConfig::to_text() const {
  std::string out;
  for (const auto& d : key_defs()) out += d.name + "=" + d.get(*this) + "\n";
  return out;
}

void PipelineConfig::validate_quantize() const {
  if (model_dir.empty()) throw ConfigError("model_dir is required");
  if (quantizer == QuantizerKind::ecsq) {
    if (k.has_value() == target_ratio.has_value()) {
      throw ConfigError("ecsq needs exactly one of k and target_ratio");
    }
  } else {
    if (!k) throw ConfigError(to_string(quantizer) + " needs k");
    if (target_ratio) throw ConfigError("target_ratio applies to ecsq only");
  }
  if (k && *k == 0) throw ConfigError("k must be at least 1");
  if (target_ratio && !(*target_ratio > 0.0)) throw ConfigError("target_ratio must be positive");
  if (ecsq_clusters == 0) throw ConfigError("ecsq_clusters must be at least 1");
  if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
  if (lambda_tolerance < 0.0) throw ConfigError("lambda_tolerance must be nonnegative");
  if (max_iters == 0) throw ConfigError("max_iters must be at least 1");
  if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) throw ConfigError("prune_fraction must be in [0, 1)");
  if (adam_epsilon < 0.0) throw ConfigError("adam_epsilon must be nonnegative");
  if (!(fd_step > 0.0)) throw ConfigError("fd_step must be positive");
  if (fine_tune && ft.batch_size == 0) throw ConfigError("ft_batch_size must be positive");
}

void apply_config_text(PipelineConfig& cfg, const std::string& text, const std::string& origin) {
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(PipelineConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  apply_config_text(cfg, read_file(path), path.string());
}

std::optional<MlpSpec> model_spec(const nlohmann::json& meta) {
  if (!meta.is_object() || !meta.contains("mlp")) return std::nullopt;
  try {
    return MlpSpec::from_json(meta.at("mlp"));
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad network description in manifest: ") + e.what());
  }
}

std::optional<LoadedData> resolve_dataset(const PipelineConfig& cfg, const nlohmann::json& meta) {
  auto load_csv_split = [&](const fs::path& path, double eval_fraction) {
    if (!fs::exists(path)) throw IoError("dataset not found: " + path.string());
    LoadedData d;
    try {
      d.splits = split_dataset(load_csv(path), eval_fraction);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("dataset split: ") + e.what());
    }
    d.description = {{"kind", "csv"}, {"path", fs::absolute(path).lexically_normal().string()},
                     {"eval_fraction", eval_fraction}};
    return d;
  };

  if (cfg.dataset == "synthetic") {
    BlobConfig b = cfg.blobs;
    b.seed = cfg.seed;
    LoadedData d;
    try {
      d.splits = make_blobs(b);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("synthetic data: ") + e.what());
    }
    d.description = b.to_json();
    return d;
  }
  if (!cfg.dataset.empty()) return load_csv_split(cfg.dataset, cfg.eval_fraction);

  if (!meta.is_object() || !meta.contains("dataset")) return std::nullopt;
  const auto& desc = meta.at("dataset");
  const std::string kind = desc.value("kind", "");
  if (kind == "synthetic_blobs") {
    LoadedData d;
    d.splits = make_blobs(BlobConfig::from_json(desc));
    d.description = desc;
    return d;
  }
  if (kind == "csv") return load_csv_split(desc.at("path").get<std::string>(), desc.at("eval_fraction").get<double>());
  throw FormatError("unknown dataset kind '" + kind + "' in manifest");
}

CurvatureDiag compute_curvature(const PipelineConfig& cfg, const ModelBundle& bundle,
                                std::span<const double> params, const std::optional<MlpSpec>& spec,
                                const std::optional<LoadedData>& data) {
  const std::size_t n = params.size();
  switch (cfg.curvature) {
    case CurvatureChoice::identity: return CurvatureDiag::identity(n);
    case CurvatureChoice::stored:
      if (!bundle.curvature) throw ConfigError("curvature=stored but the model has no stored curvature");
      return *bundle.curvature;
    case CurvatureChoice::adam:
      if (!bundle.adam_second_moment) {
        throw ConfigError("curvature=adam but the model has no Adam second moments");
      }
      return adam_curvature(*bundle.adam_second_moment, cfg.adam_epsilon);
    case CurvatureChoice::exact:
    case CurvatureChoice::gauss_newton: {
      if (!spec) throw ConfigError("Hessian curvature needs a network description in the model metadata");
      if (!data) throw ConfigError("Hessian curvature needs a dataset");
      const Dataset rows = hessian_rows(cfg, *data);
      if (cfg.curvature == CurvatureChoice::exact) {
        return hessian_diag_exact(*spec, params, rows, HessianOptions{cfg.fd_step});
      }
      return hessian_diag_gn(*spec, params, rows);
    }
  }
  throw ConfigError("unsupported curvature choice");
}

PreparedModel prepare_model(const PipelineConfig& cfg) {
  if (cfg.model_dir.empty()) throw ConfigError("model_dir is required");
  PreparedModel p{load_model(cfg.model_dir), {}, {}, {}, {}, {}, CurvatureSource::identity, 0, {}};
  p.spec = model_spec(p.bundle.metadata);
  p.data = resolve_dataset(cfg, p.bundle.metadata);
  if (p.spec && p.spec->param_count() != p.bundle.params.size()) {
    throw FormatError("network description does not match the stored parameter count");
  }
  if (p.spec && p.data && p.data->splits.eval.input_dim != p.spec->input_dim()) {
    throw ConfigError("dataset has " + std::to_string(p.data->splits.eval.input_dim) +
                      " features, the network expects " + std::to_string(p.spec->input_dim()));
  }

  const auto values = p.bundle.params.values();
  p.base.assign(values.begin(), values.end());
  if (p.bundle.mask) {
    if (cfg.prune_fraction > 0.0) throw ConfigError("model is already pruned; prune_fraction must be 0");
    p.mask = p.bundle.mask;
  } else if (cfg.prune_fraction > 0.0) {
    p.mask = prune_magnitude(p.base, cfg.prune_fraction);
  }
  if (p.mask) {
    for (std::size_t i = 0; i < p.base.size(); ++i) {
      if (!p.mask->kept()[i]) p.base[i] = 0.0;
    }
  }

  const CurvatureDiag curvature = needs_curvature(cfg)
                                      ? compute_curvature(cfg, p.bundle, p.base, p.spec, p.data)
                                      : CurvatureDiag::identity(p.base.size());
  p.curvature_source = curvature.source();
  p.curvature_clamped = curvature.clamped();
  p.compact = compact_unpruned(p.base, curvature.values(),
                               p.mask ? *p.mask : PruneMask::all_kept(p.base.size()));
  if (p.spec && p.data) p.unquantized_accuracy = eval_accuracy(*p.spec, p.base, p.data->splits.eval);
  return p;
}

QuantizeOutcome quantize_prepared(const PreparedModel& p, const PipelineConfig& cfg) {
  cfg.validate_quantize();
  const auto& v = p.compact.values;
  const auto& h = p.compact.curvature;
  const unsigned b = p.bundle.params.source_bits();
  if (b != 32 && b != 64) throw ConfigError("centers can be stored with 32 or 64 bits only");

  ClusterConfig cc;
  cc.init = cfg.init;
  cc.max_iters = cfg.max_iters;
  cc.seed = cfg.seed;

  QuantizeOutcome out;
  out.lambda = cfg.lambda;
  try {
    switch (cfg.quantizer) {
      case QuantizerKind::kmeans:
        cc.k = *cfg.k;
        out.stats = kmeans_lloyd(v, cc);
        break;
      case QuantizerKind::hw_kmeans:
        cc.k = *cfg.k;
        out.stats = hw_kmeans_lloyd(v, h, cc);
        break;
      case QuantizerKind::uniform:
        cc.k = *cfg.k;
        out.stats = uniform_quantize(v, std::span<const double>(h), *cfg.k, cfg.center_rule);
        break;
      case QuantizerKind::ecsq:
        if (cfg.k) {
          cc.k = *cfg.k;
          out.stats = ecsq_iterate(v, h, EcsqConfig{cc, cfg.lambda});
        } else {
          cc.k = cfg.ecsq_clusters;
          const double budget = entropy_budget(b, *cfg.target_ratio);
          out.entropy_budget = budget;
          if (budget >= std::log2(static_cast<double>(cc.k))) {
            // Any assignment meets the budget; no entropy pressure needed.
            out.lambda = 0.0;
            out.stats = ecsq_iterate(v, h, EcsqConfig{cc, 0.0});
            out.target_met = true;
            out.lambda_evaluations = 1;
          } else {
            LambdaSearchOptions opts;
            opts.cluster = cc;
            opts.tolerance = cfg.lambda_tolerance;
            auto search = solve_lambda(v, h, cc.k, budget, opts);
            out.lambda_evaluations = search.evaluations;
            out.target_met = search.target_met;
            out.lambda = search.lambda;
            if (!search.target_met) {
              throw InfeasibleError("target ratio " + format_number(*cfg.target_ratio) + " needs entropy <= " +
                                    format_number(budget) + " bits; best reached " +
                                    format_number(search.entropy) + " bits");
            }
            out.stats = std::move(search.result);
          }
        }
        break;
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("quantizer: ") + e.what());
  }
  out.k_requested = cc.k;

  out.assignment = out.stats.assignment;
  out.codebook = out.stats.codebook;
  drop_empty_clusters(out.assignment, out.codebook);
  round_centers(out.codebook, b);
  out.code = cfg.coding == CodeScheme::huffman ? build_huffman(out.codebook) : fixed_length_code(out.codebook.k());

  const bool pruned = p.mask.has_value();
  auto encode = [&](const Codebook& cb) {
    std::optional<PrunedLayout> layout;
    if (pruned) layout = PrunedLayout{p.compact.positions, p.base.size()};
    return encode_assignments(out.assignment, cb, out.code, b, layout);
  };

  const QuantizedLayout layout{p.compact.positions};
  if (p.spec && p.data) {
    out.accuracy_pre_ft = eval_accuracy(*p.spec, p.base, layout, out.assignment, out.codebook, p.data->splits.eval);
  }
  if (cfg.fine_tune) {
    if (!p.spec || !p.data) throw ConfigError("fine_tune needs a network description and a dataset");
    FineTuneConfig ft = cfg.ft;
    ft.seed = cfg.seed;
    auto tuned = fine_tune_centers(*p.spec, p.base, layout, out.assignment, out.codebook, p.data->splits, ft);
    round_centers(tuned.codebook, b);
    out.codebook = std::move(tuned.codebook);
    out.accuracy_post_ft =
        eval_accuracy(*p.spec, p.base, layout, out.assignment, out.codebook, p.data->splits.eval);
  }
  out.encoded = encode(out.codebook);
  return out;
}

std::vector<double> reconstruct_params(const DecodedModel& d) {
  std::vector<double> w(d.original_n, 0.0);
  for (std::size_t i = 0; i < d.assignment.size(); ++i) {
    const std::size_t pos = d.positions ? (*d.positions)[i] : i;
    w.at(pos) = d.codebook.centers[d.assignment[i]];
  }
  return w;
}

nlohmann::json describe_encoded(const DecodedModel& d, std::uint64_t file_bytes) {
  const std::size_t nq = d.assignment.size();
  const unsigned b = d.source_bits;
  const auto& bd = d.breakdown;
  const double original_bits = static_cast<double>(d.original_n) * b;
  const double avg_len = d.code.average_length(d.codebook.counts);
  const auto entropy_ratio = compression_ratio_entropy(b, avg_len, d.codebook.k(), d.code.table_bits(), nq);

  nlohmann::json j;
  j["n_params"] = d.original_n;
  j["n_quantized"] = nq;
  j["source_bits"] = b;
  j["coding"] = to_string(d.code.scheme);
  j["k"] = d.codebook.k();
  j["k_effective"] = d.codebook.effective_k();
  j["counts"] = d.codebook.counts;
  j["centers"] = d.codebook.centers;
  j["code_lengths"] = d.code.lengths;
  j["entropy_bits"] = entropy_bits(d.codebook);
  j["avg_code_length"] = avg_len;
  j["compression_ratio_exact"] = compression_ratio_exact(nq, b, d.codebook.counts, d.code);
  j["compression_ratio_measured"] =
      static_cast<double>(nq) * b / static_cast<double>(bd.ratio_denominator_bits());
  j["compression_ratio_entropy"] = {{"with_overhead", entropy_ratio.with_overhead},
                                    {"approximate", entropy_ratio.approximate}};
  j["compression_ratio_with_index"] =
      original_bits / static_cast<double>(bd.ratio_denominator_bits() + bd.index_bits());
  j["compression_ratio_file"] = original_bits / static_cast<double>(file_bytes * 8);
  j["breakdown"] = {{"header_bits", bd.header_bits},
                    {"length_table_bits", bd.length_table_bits},
                    {"center_bits", bd.center_bits},
                    {"codeword_table_bits", bd.codeword_table_bits},
                    {"payload_bits", bd.payload_bits},
                    {"index_header_bits", bd.index_header_bits},
                    {"index_table_bits", bd.index_table_bits},
                    {"index_payload_bits", bd.index_payload_bits},
                    {"padding_bits", bd.padding_bits},
                    {"ratio_denominator_bits", bd.ratio_denominator_bits()},
                    {"total_bits", bd.total_bits()}};
  j["file_bytes"] = file_bytes;
  return j;
}

nlohmann::json quantize_report(const PreparedModel& p, const PipelineConfig& cfg, const QuantizeOutcome& o) {
  const DecodedModel decoded = decode_assignments(o.encoded);
  nlohmann::json j = describe_encoded(decoded, o.encoded.bytes.size());
  j["format"] = "nq-report v1";
  j["model_name"] = p.bundle.model_name;
  j["quantizer"] = to_string(cfg.quantizer);
  j["curvature"] = to_string(p.curvature_source);
  j["curvature_clamped"] = p.curvature_clamped;
  j["k_requested"] = o.k_requested;
  j["lambda"] = o.lambda;
  j["target_ratio"] = optional_number(cfg.target_ratio);
  j["entropy_budget"] = optional_number(o.entropy_budget);
  j["target_met"] = o.target_met ? nlohmann::json(*o.target_met) : nlohmann::json(nullptr);
  j["lambda_evaluations"] = o.lambda_evaluations;
  j["prune_fraction"] = p.mask ? 1.0 - static_cast<double>(p.mask->kept_count()) / p.mask->size() : 0.0;
  j["iterations"] = o.stats.iterations;
  j["converged"] = o.stats.converged;
  j["reseeds"] = o.stats.reseeds;
  j["refinement_moves"] = o.stats.refinement_moves;
  j["fine_tuned"] = cfg.fine_tune;
  j["seed"] = cfg.seed;
  j["accuracy"] = p.unquantized_accuracy
                      ? nlohmann::json{{"unquantized", *p.unquantized_accuracy},
                                       {"pre_fine_tune", optional_number(o.accuracy_pre_ft)},
                                       {"post_fine_tune", optional_number(o.accuracy_post_ft)}}
                      : nlohmann::json(nullptr);
  return j;
}

std::string format_report(const nlohmann::json& r) {
  std::ostringstream os;
  auto num = [](const nlohmann::json& v, int precision) {
    if (v.is_null()) return std::string("absent");
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(precision);
    s << v.get<double>();
    return s.str();
  };
  // Accuracy of the stored model: decoded, else after, else before fine-tuning.
  std::string acc = "absent";
  if (r.contains("accuracy") && !r["accuracy"].is_null()) {
    for (const char* key : {"decoded", "post_fine_tune", "pre_fine_tune"}) {
      const auto v = r["accuracy"].value(key, nlohmann::json());
      if (!v.is_null()) {
        acc = num(v.get<double>() * 100.0, 2);
        break;
      }
    }
  }
  os << "model              accuracy %   compression ratio\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %-12s %s\n", r.value("model_name", std::string("-")).c_str(), acc.c_str(),
                num(r["compression_ratio_exact"], 3).c_str());
  os << line;
  os << "\n";
  if (r.contains("quantizer")) os << "quantizer          " << r["quantizer"].get<std::string>() << "\n";
  if (r.contains("entropy_budget") && !r["entropy_budget"].is_null()) {
    os << "target ratio       " << num(r["target_ratio"], 4) << "\n";
    os << "entropy budget R   " << num(r["entropy_budget"], 4) << " bits\n";
  }
  if (r.value("quantizer", std::string()) == "ecsq") os << "lambda             " << r["lambda"].dump() << "\n";
  os << "coding             " << r["coding"].get<std::string>() << "\n";
  os << "parameters         " << r["n_params"] << " (" << r["n_quantized"] << " quantized)\n";
  os << "k / effective      " << r["k"] << " / " << r["k_effective"] << "\n";
  os << "entropy H          " << num(r["entropy_bits"], 4) << " bits\n";
  os << "avg code length    " << num(r["avg_code_length"], 4) << " bits\n";
  os << "ratio exact        " << num(r["compression_ratio_exact"], 4) << "\n";
  os << "ratio measured     " << num(r["compression_ratio_measured"], 4) << "\n";
  os << "ratio with index   " << num(r["compression_ratio_with_index"], 4) << "\n";
  os << "ratio whole file   " << num(r["compression_ratio_file"], 4) << "\n";
  if (r.contains("accuracy") && !r["accuracy"].is_null()) {
    const auto& a = r["accuracy"];
    os << "accuracy unquant.  " << num(a["unquantized"], 4) << "\n";
    os << "accuracy pre-ft    " << num(a["pre_fine_tune"], 4) << "\n";
    os << "accuracy post-ft   " << num(a["post_fine_tune"], 4) << "\n";
    if (a.contains("decoded")) os << "accuracy decoded   " << num(a["decoded"], 4) << "\n";
  }
  const auto& bd = r["breakdown"];
  os << "bits: centers " << bd["center_bits"] << ", codeword table " << bd["codeword_table_bits"] << ", payload "
     << bd["payload_bits"] << " (ratio denominator " << bd["ratio_denominator_bits"] << ")\n";
  os << "      header " << bd["header_bits"] << ", length table " << bd["length_table_bits"] << ", index "
     << bd["index_header_bits"].get<std::uint64_t>() + bd["index_table_bits"].get<std::uint64_t>() +
            bd["index_payload_bits"].get<std::uint64_t>()
     << ", padding " << bd["padding_bits"] << ", total " << bd["total_bits"] << "\n";
  return os.str();
}

void write_outputs(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& files) {
  std::error_code ec;
  const fs::path staging = dir.string() + ".staging";
  fs::remove_all(staging, ec);
  fs::create_directories(staging, ec);
  if (ec) throw IoError("cannot create " + staging.string() + ": " + ec.message());
  for (const auto& [name, bytes] : files) {
    std::ofstream out(staging / name, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      fs::remove_all(staging, ec);
      throw IoError("cannot write " + (staging / name).string());
    }
  }
  fs::create_directories(dir, ec);
  if (ec) {
    fs::remove_all(staging, ec);
    throw IoError("cannot create " + dir.string());
  }
  for (const auto& f : files) {
    fs::rename(staging / f.first, dir / f.first, ec);
    if (ec) throw IoError("cannot move " + f.first + " into " + dir.string() + ": " + ec.message());
  }
  fs::remove_all(staging, ec);
}

namespace {

// Saves a model bundle through a staging directory next to `dir`.
void save_model_staged(const ModelBundle& bundle, const fs::path& dir, const std::string& config_text) {
  std::error_code ec;
  const fs::path staging = dir.string() + ".staging";
  fs::remove_all(staging, ec);
  save_model(bundle, staging);
  {
    std::ofstream out(staging / kConfigUsedFile, std::ios::binary);
    out << config_text;
    if (!out) throw IoError("cannot write " + (staging / kConfigUsedFile).string());
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  for (const auto& entry : fs::directory_iterator(staging)) {
    fs::rename(entry.path(), dir / entry.path().filename(), ec);
    if (ec) throw IoError("cannot move " + entry.path().string() + ": " + ec.message());
  }
  fs::remove_all(staging, ec);
}

void require_output(const PipelineConfig& cfg) {
  if (cfg.output_dir.empty()) throw ConfigError("output_dir is required");
}

}  // namespace

void cmd_train_ref(const PipelineConfig& cfg) {
  require_output(cfg);
  PipelineConfig c = cfg;
  if (c.dataset.empty()) c.dataset = "synthetic";
  auto data = resolve_dataset(c, nlohmann::json::object());
  const Dataset& train = data->splits.train;

  int max_label = 0;
  for (int y : train.labels) max_label = std::max(max_label, y);
  for (int y : data->splits.eval.labels) max_label = std::max(max_label, y);
  MlpSpec spec;
  spec.layer_widths.push_back(train.input_dim);
  for (auto w : c.hidden) spec.layer_widths.push_back(w);
  spec.layer_widths.push_back(static_cast<std::size_t>(max_label) + 1);
  spec.activation = c.activation;
  spec.loss = LossKind::softmax_cross_entropy;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  TrainConfig tc = c.train;
  tc.seed = c.seed;
  if (tc.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(tc.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");

  TrainedModel tm = train_adam(spec, data->splits, tc);
  ModelBundle bundle{c.model_name, tm.params, std::nullopt, std::nullopt,
                     tm.adam.bias_corrected_second_moment()};
  bundle.metadata = {{"mlp", spec.to_json()},
                     {"dataset", data->description},
                     {"train",
                      {{"epochs", tc.epochs},
                       {"batch_size", tc.batch_size},
                       {"learning_rate", tc.learning_rate},
                       {"seed", tc.seed},
                       {"adam_steps", tm.adam.step}}},
                     {"final_loss", tm.final_loss},
                     {"eval_accuracy", tm.eval_accuracy}};
  save_model_staged(bundle, c.output_dir, c.to_text());
}

void cmd_prune(const PipelineConfig& cfg) {
  require_output(cfg);
  if (cfg.model_dir.empty()) throw ConfigError("model_dir is required");
  if (!(cfg.prune_fraction >= 0.0 && cfg.prune_fraction < 1.0)) {
    throw ConfigError("prune_fraction must be in [0, 1)");
  }
  ModelBundle bundle = load_model(cfg.model_dir);
  if (bundle.mask) throw ConfigError("model is already pruned");
  PruneMask mask = prune_magnitude(bundle.params.values(), cfg.prune_fraction);
  std::vector<double> values(bundle.params.values().begin(), bundle.params.values().end());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.kept()[i]) values[i] = 0.0;
  }
  bundle.params = bundle.params.with_values(std::move(values));
  bundle.mask = std::move(mask);
  bundle.metadata["prune_fraction"] = cfg.prune_fraction;
  save_model_staged(bundle, cfg.output_dir, cfg.to_text());
}

void cmd_curvature(const PipelineConfig& cfg) {
  require_output(cfg);
  if (cfg.model_dir.empty()) throw ConfigError("model_dir is required");
  if (cfg.curvature == CurvatureChoice::stored) throw ConfigError("curvature=stored has nothing to compute");
  ModelBundle bundle = load_model(cfg.model_dir);
  const auto spec = model_spec(bundle.metadata);
  const auto data = resolve_dataset(cfg, bundle.metadata);
  CurvatureDiag h = compute_curvature(cfg, bundle, bundle.params.values(), spec, data);
  bundle.metadata["curvature_clamped"] = h.clamped();
  bundle.curvature = std::move(h);
  save_model_staged(bundle, cfg.output_dir, cfg.to_text());
}

nlohmann::json cmd_quantize(const PipelineConfig& cfg) {
  cfg.validate_quantize();
  require_output(cfg);
  const PreparedModel prepared = prepare_model(cfg);
  const QuantizeOutcome outcome = quantize_prepared(prepared, cfg);
  nlohmann::json report = quantize_report(prepared, cfg, outcome);
  write_outputs(cfg.output_dir, {{kEncodedFile, encoded_bytes(outcome.encoded)},
                                 {kReportFile, json_text(report)},
                                 {kConfigUsedFile, cfg.to_text()}});
  return report;
}

std::string cmd_sweep(const PipelineConfig& cfg) {
  require_output(cfg);
  struct Point {
    QuantizerKind quantizer;
    std::optional<std::size_t> k;
    std::optional<double> lambda;
  };
  std::vector<Point> points;
  const auto quantizers = cfg.sweep_quantizers.empty() ? std::vector<QuantizerKind>{cfg.quantizer}
                                                       : cfg.sweep_quantizers;
  for (auto q : quantizers) {
    if (q == QuantizerKind::ecsq && !cfg.sweep_lambda.empty()) {
      for (double l : cfg.sweep_lambda) points.push_back({q, std::nullopt, l});
    } else {
      for (auto k : cfg.sweep_k) points.push_back({q, k, std::nullopt});
    }
  }
  if (points.empty()) throw ConfigError("sweep needs at least one point (sweep_k or sweep_lambda)");

  // Curvature is computed once when any point needs it.
  PipelineConfig setup = cfg;
  setup.quantizer = QuantizerKind::hw_kmeans;
  bool any_curvature = false;
  for (const auto& pt : points) {
    PipelineConfig probe = cfg;
    probe.quantizer = pt.quantizer;
    any_curvature = any_curvature || needs_curvature(probe);
  }
  if (!any_curvature) setup.quantizer = QuantizerKind::kmeans;
  const PreparedModel prepared = prepare_model(setup);

  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  std::ostringstream csv;
  csv << kSweepHeader << "\n";
  csv << "index,quantizer,coding,param,k_effective,entropy_bits,avg_code_length,ratio_exact,"
         "accuracy_pre_ft,accuracy_post_ft,seed,status\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& pt = points[i];
    PipelineConfig c = cfg;
    c.quantizer = pt.quantizer;
    c.target_ratio.reset();
    std::string param;
    if (pt.lambda) {
      c.k = cfg.ecsq_clusters;
      c.lambda = *pt.lambda;
      param = "lambda=" + format_number(*pt.lambda);
    } else {
      c.k = pt.k;
      param = "k=" + std::to_string(*pt.k);
    }
    csv << i << "," << to_string(pt.quantizer) << "," << to_string(cfg.coding) << "," << param << ",";
    try {
      const QuantizeOutcome o = quantize_prepared(prepared, c);
      const double avg = o.code.average_length(o.codebook.counts);
      csv << o.codebook.effective_k() << "," << format_number(entropy_bits(o.codebook)) << ","
          << format_number(avg) << ","
          << format_number(compression_ratio_exact(o.assignment.size(), prepared.bundle.params.source_bits(),
                                                   o.codebook.counts, o.code))
          << "," << opt(o.accuracy_pre_ft) << "," << opt(o.accuracy_post_ft) << "," << cfg.seed << ",ok\n";
    } catch (const Error& e) {
      csv << ",,,,,," << cfg.seed << ",error:" << e.exit_code() << "\n";
    }
  }
  const std::string text = csv.str();
  write_outputs(cfg.output_dir, {{kSweepFile, text}, {kConfigUsedFile, cfg.to_text()}});
  return text;
}

nlohmann::json cmd_report(const PipelineConfig& cfg) {
  if (cfg.encoded.empty()) throw ConfigError("encoded (path to a model.nq file) is required");
  if (!fs::exists(cfg.encoded)) throw IoError("encoded model not found: " + cfg.encoded);
  const std::string raw = read_file(cfg.encoded);
  const std::vector<std::uint8_t> bytes(raw.begin(), raw.end());
  const DecodedModel decoded = decode_assignments(bytes);
  nlohmann::json j = describe_encoded(decoded, bytes.size());
  j["format"] = "nq-report v1";
  j["accuracy"] = nullptr;
  if (!cfg.model_dir.empty()) {
    const ModelBundle bundle = load_model(cfg.model_dir);
    j["model_name"] = bundle.model_name;
    const auto spec = model_spec(bundle.metadata);
    const auto data = resolve_dataset(cfg, bundle.metadata);
    if (spec && data) {
      if (spec->param_count() != decoded.original_n) {
        throw FormatError("encoded model does not match the network in " + cfg.model_dir);
      }
      const auto w = reconstruct_params(decoded);
      j["accuracy"] = {{"unquantized", eval_accuracy(*spec, bundle.params.values(), data->splits.eval)},
                       {"pre_fine_tune", nullptr},
                       {"post_fine_tune", nullptr},
                       {"decoded", eval_accuracy(*spec, w, data->splits.eval)}};
    }
  }
  if (!cfg.output_dir.empty()) write_outputs(cfg.output_dir, {{kReportFile, json_text(j)}});
  return j;
}

}  // namespace nq
