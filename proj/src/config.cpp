#include "extradiff/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "extradiff/error.hpp"

namespace extradiff {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& text, const std::string& where) {
  const std::string s = trim(text);
  T value{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError(where + ": cannot parse '" + text + "' as a number");
  return value;
}

std::vector<double> parse_list(const std::string& text, const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(parse_number<double>(item, where));
  return out;
}

std::string format_list(const double* v, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
  else if constexpr (std::is_same_v<T, double>) return format_double(v);
  else if constexpr (std::is_integral_v<T>) return std::to_string(v);
  else if constexpr (std::is_same_v<T, std::string>) return v;
  else if constexpr (std::is_same_v<T, SigmaMode>) return v == SigmaMode::beta ? "beta" : "posterior";
  else if constexpr (std::is_same_v<T, NullMode>) return to_string(v);
  else if constexpr (std::is_same_v<T, std::vector<double>>) return format_list(v.data(), v.size());
  else if constexpr (std::is_same_v<T, Eigen::VectorXd>) return format_list(v.data(), static_cast<std::size_t>(v.size()));
  else static_assert(sizeof(T) == 0, "unsupported config field type");
}

template <class T>
T parse_value(const std::string& text, const std::string& where) {
  if constexpr (std::is_same_v<T, bool>) {
    const std::string s = trim(text);
    if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "off" || s == "no") return false;
    throw ConfigError(where + ": expected true or false, got '" + text + "'");
  } else if constexpr (std::is_arithmetic_v<T>) {
    return parse_number<T>(text, where);
  } else if constexpr (std::is_same_v<T, std::string>) {
    return trim(text);
  } else if constexpr (std::is_same_v<T, SigmaMode>) {
    const std::string s = trim(text);
    if (s == "beta") return SigmaMode::beta;
    if (s == "posterior") return SigmaMode::posterior;
    throw ConfigError(where + ": expected beta or posterior, got '" + text + "'");
  } else if constexpr (std::is_same_v<T, NullMode>) {
    try {
      return null_mode_from_string(trim(text));
    } catch (const Error& e) {
      throw ConfigError(where + ": " + e.what());
    }
  } else if constexpr (std::is_same_v<T, std::vector<double>>) {
    return parse_list(text, where);
  } else if constexpr (std::is_same_v<T, Eigen::VectorXd>) {
    const auto v = parse_list(text, where);
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
}

struct Field {
  std::string section;
  std::string key;
  std::string help;
  bool runtime = false;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Access>
Field field(std::string section, std::string key, std::string help, Access access, bool runtime = false) {
  using T = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  const std::string where = "[" + section + "] " + key;
  return {section, key, std::move(help), runtime,
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); },
          [access, where](RunConfig& c, const std::string& v) { access(c) = parse_value<T>(v, where); }};
}

#define EXTRADIFF_FIELD(section, key, expr, help) \
  field(section, key, help, [](RunConfig& c) -> auto& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(EXTRADIFF_FIELD("run", "seed", c.seed, "global seed; every stage seed is derived from it"));
    f.push_back(field("run", "output_dir", "run directory (relative paths go under $EXTRADIFF_OUTPUT_ROOT)",
                      [](RunConfig& c) -> auto& { return c.output_dir; }, true));
    f.push_back(field("run", "threads", "worker threads; results do not depend on it",
                      [](RunConfig& c) -> auto& { return c.threads; }, true));

    f.push_back(EXTRADIFF_FIELD("stages", "cluster", c.stages.cluster, "k-means outlier filter"));
    f.push_back(EXTRADIFF_FIELD("stages", "classifier", c.stages.classifier, "softmax-classifier outlier filter"));
    f.push_back(EXTRADIFF_FIELD("stages", "extrapolate", c.stages.extrapolate, "synthesize text features for web images"));
    f.push_back(EXTRADIFF_FIELD("stages", "train", c.stages.train, "train the denoiser on the augmented corpus"));
    f.push_back(EXTRADIFF_FIELD("stages", "finetune", c.stages.finetune, "fine-tune on the dataset with early stopping"));
    f.push_back(EXTRADIFF_FIELD("stages", "sample", c.stages.sample, "generate per-label samples"));
    f.push_back(EXTRADIFF_FIELD("stages", "evaluate", c.stages.evaluate, "Frechet / inception-score analogues"));
    f.push_back(EXTRADIFF_FIELD("stages", "rat", c.stages.rat, "recurrent cell between RAT blocks (off: every block reads h0)"));
    f.push_back(EXTRADIFF_FIELD("stages", "null", c.stages.null_guidance, "NULL guidance (off: eta = 1)"));

    f.push_back(EXTRADIFF_FIELD("corpus", "source", c.corpus.source, "synth or file"));
    f.push_back(EXTRADIFF_FIELD("corpus", "dataset_path", c.corpus.dataset_path, "dataset corpus file (source = file)"));
    f.push_back(EXTRADIFF_FIELD("corpus", "web_path", c.corpus.web_path, "web corpus file (source = file)"));
    f.push_back(EXTRADIFF_FIELD("corpus", "normalize", c.corpus.normalize, "L2-normalize corpora not already flagged as normalized"));
    f.push_back(EXTRADIFF_FIELD("corpus", "n_classes", c.corpus.synth.n_classes, "synthetic classes"));
    f.push_back(EXTRADIFF_FIELD("corpus", "dataset_per_class", c.corpus.synth.dataset_per_class, "dataset records per class"));
    f.push_back(EXTRADIFF_FIELD("corpus", "web_per_class", c.corpus.synth.web_per_class, "web records per class"));
    f.push_back(EXTRADIFF_FIELD("corpus", "outlier_fraction", c.corpus.synth.outlier_fraction, "web share drawn from irrelevant components"));
    f.push_back(EXTRADIFF_FIELD("corpus", "similar_fraction", c.corpus.synth.similar_fraction, "web share drawn from another class"));
    f.push_back(EXTRADIFF_FIELD("corpus", "separation", c.corpus.synth.separation, "center spacing in within-class RMS radii"));
    f.push_back(EXTRADIFF_FIELD("corpus", "within_std", c.corpus.synth.within_std, "per-coordinate class spread"));
    f.push_back(EXTRADIFF_FIELD("corpus", "dim_image", c.corpus.synth.dim_image, "image feature width D"));
    f.push_back(EXTRADIFF_FIELD("corpus", "dim_text", c.corpus.synth.dim_text, "text feature width D_s"));
    f.push_back(EXTRADIFF_FIELD("corpus", "texts_per_record", c.corpus.synth.texts_per_record, "captions per dataset record"));
    f.push_back(EXTRADIFF_FIELD("corpus", "joint_map", c.corpus.synth.joint_map, "text = M * image for one seeded M"));
    f.push_back(EXTRADIFF_FIELD("corpus", "text_noise", c.corpus.synth.text_noise, "caption spread when joint_map is off"));

    f.push_back(EXTRADIFF_FIELD("detect", "k", c.detect.k, "k-means clusters per keyword"));
    f.push_back(EXTRADIFF_FIELD("detect", "tau_sigma", c.detect.tau_sigma, "centroid threshold in class spreads"));
    f.push_back(EXTRADIFF_FIELD("detect", "classifier_lr", c.detect.classifier.learning_rate, "softmax classifier step size"));
    f.push_back(EXTRADIFF_FIELD("detect", "classifier_epochs", c.detect.classifier.epochs, "full-batch gradient steps"));

    f.push_back(EXTRADIFF_FIELD("extrapolate", "k", c.extrapolate.k, "nearest dataset images per web image"));
    f.push_back(EXTRADIFF_FIELD("extrapolate", "ridge_lambda", c.extrapolate.ridge_lambda, "ridge term of the reconstruction"));

    f.push_back(EXTRADIFF_FIELD("diffusion", "T", c.diffusion.T, "timesteps"));
    f.push_back(EXTRADIFF_FIELD("diffusion", "beta_min", c.diffusion.beta_min, "first beta"));
    f.push_back(EXTRADIFF_FIELD("diffusion", "beta_max", c.diffusion.beta_max, "last beta"));
    f.push_back(EXTRADIFF_FIELD("diffusion", "sigma", c.diffusion.sigma, "beta or posterior"));

    f.push_back(EXTRADIFF_FIELD("denoiser", "n_tokens", c.denoiser.n_tokens, "latent tokens; 0 = dim_image / d_latent"));
    f.push_back(EXTRADIFF_FIELD("denoiser", "d_latent", c.denoiser.d_latent, "channels per latent token"));
    f.push_back(EXTRADIFF_FIELD("denoiser", "d_model", c.denoiser.d_model, "transformer width"));
    f.push_back(EXTRADIFF_FIELD("denoiser", "n_layers", c.denoiser.n_layers, "transformer blocks"));
    f.push_back(EXTRADIFF_FIELD("denoiser", "layers_per_rat", c.denoiser.layers_per_rat, "blocks per RAT block"));
    f.push_back(EXTRADIFF_FIELD("denoiser", "d_time", c.denoiser.d_time, "time embedding width"));
    f.push_back(EXTRADIFF_FIELD("denoiser", "d_hidden", c.denoiser.d_hidden, "hidden width of every MLP"));

    for (const char* sec : {"training", "finetune"}) {
      const bool ft = std::string(sec) == "finetune";
      auto pick = [ft](RunConfig& c) -> TrainConfig& { return ft ? c.finetune : c.training; };
      f.push_back(field(sec, "lr", "Adam learning rate", [pick](RunConfig& c) -> auto& { return pick(c).lr; }));
      f.push_back(field(sec, "weight_decay", "L2 term added to the gradient", [pick](RunConfig& c) -> auto& { return pick(c).weight_decay; }));
      f.push_back(field(sec, "batch_size", "records per step", [pick](RunConfig& c) -> auto& { return pick(c).batch_size; }));
      f.push_back(field(sec, "max_epochs", "epoch budget", [pick](RunConfig& c) -> auto& { return pick(c).max_epochs; }));
      f.push_back(field(sec, "max_steps", "step budget, 0 = none", [pick](RunConfig& c) -> auto& { return pick(c).max_steps; }));
      f.push_back(field(sec, "beta1", "Adam first-moment decay", [pick](RunConfig& c) -> auto& { return pick(c).beta1; }));
      f.push_back(field(sec, "beta2", "Adam second-moment decay", [pick](RunConfig& c) -> auto& { return pick(c).beta2; }));
      f.push_back(field(sec, "epsilon", "Adam epsilon", [pick](RunConfig& c) -> auto& { return pick(c).epsilon; }));
      f.push_back(field(sec, "cond_dropout", "probability of a zero condition", [pick](RunConfig& c) -> auto& { return pick(c).cond_dropout; }));
      if (ft) {
        f.push_back(field(sec, "eval_every", "epochs between evaluations", [pick](RunConfig& c) -> auto& { return pick(c).eval_every; }));
        f.push_back(field(sec, "patience", "evals above the best before stopping", [pick](RunConfig& c) -> auto& { return pick(c).patience; }));
      }
    }

    f.push_back(EXTRADIFF_FIELD("sample", "eta", c.sample.guidance.eta, "guidance ratio"));
    f.push_back(EXTRADIFF_FIELD("sample", "null_mode", c.sample.guidance.null_mode, "mean_text, zero or explicit"));
    f.push_back(EXTRADIFF_FIELD("sample", "null_vector", c.sample.guidance.explicit_null, "comma list for null_mode = explicit"));
    f.push_back(EXTRADIFF_FIELD("sample", "steps", c.sample.guidance.steps, "reverse chain length, 0 = T"));
    f.push_back(EXTRADIFF_FIELD("sample", "per_class", c.sample.per_class, "samples per label"));

    f.push_back(EXTRADIFF_FIELD("evaluate", "monitor_per_class", c.evaluate.monitor_per_class, "samples per label at each fine-tune eval"));
    f.push_back(EXTRADIFF_FIELD("evaluate", "raw_feature_max_dim", c.evaluate.raw_feature_max_dim, "raw vectors up to this D, logits above"));

    f.push_back(EXTRADIFF_FIELD("sweep", "etas", c.sweep_etas, "guidance ratios for the sweep command"));
    return f;
  }();
  return table;
}

#undef EXTRADIFF_FIELD

}  // namespace

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("[run] threads must be >= 1");
  if (output_dir.empty()) throw ConfigError("[run] output_dir is empty");
  if (corpus.source == "synth") {
    corpus.synth.validate();
  } else if (corpus.source == "file") {
    for (const auto* p : {&corpus.dataset_path, &corpus.web_path}) {
      if (p->empty()) throw ConfigError("[corpus] source = file needs dataset_path and web_path");
      if (!std::filesystem::exists(*p)) throw ConfigError("[corpus] file not found: " + *p);
    }
  } else {
    throw ConfigError("[corpus] source must be synth or file, got '" + corpus.source + "'");
  }
  if (detect.k < 1) throw ConfigError("[detect] k must be >= 1");
  if (!(detect.tau_sigma > 0)) throw ConfigError("[detect] tau_sigma must be > 0");
  if (!(detect.classifier.learning_rate > 0) || detect.classifier.epochs < 1)
    throw ConfigError("[detect] classifier_lr must be > 0 and classifier_epochs >= 1");
  if (extrapolate.k < 1) throw ConfigError("[extrapolate] k must be >= 1");
  if (!(extrapolate.ridge_lambda >= 0)) throw ConfigError("[extrapolate] ridge_lambda must be >= 0");
  build_schedule(diffusion.T, diffusion.beta_min, diffusion.beta_max, diffusion.sigma);
  DenoiserConfig d = denoiser;
  if (d.n_tokens == 0) d.n_tokens = 1;  // resolved against the corpus later
  d.validate();
  training.validate();
  finetune.validate();
  if (sample.guidance.steps < 0 || sample.guidance.steps > diffusion.T)
    throw ConfigError("[sample] steps must lie in [0, T]");
  if (sample.per_class < 2) throw ConfigError("[sample] per_class must be >= 2");
  if (sample.guidance.null_mode == NullMode::explicit_vector && sample.guidance.explicit_null.size() == 0)
    throw ConfigError("[sample] null_mode = explicit needs null_vector");
  if (evaluate.monitor_per_class < 2) throw ConfigError("[evaluate] monitor_per_class must be >= 2");
  if (sweep_etas.empty()) throw ConfigError("[sweep] etas is empty");
}

RunConfig default_run_config() {
  RunConfig c;
  c.denoiser.n_tokens = 0;
  c.denoiser.d_latent = 1;
  c.denoiser.d_model = 16;
  c.denoiser.n_layers = 4;
  c.denoiser.layers_per_rat = 2;
  c.denoiser.d_time = 8;
  c.denoiser.d_hidden = 32;
  // Small networks on a few hundred records need a larger step than the
  // TrainConfig default to pick up conditioning within the epoch budget.
  c.training.lr = 1e-3;
  c.training.max_epochs = 40;
  c.finetune.lr = 1e-3;
  c.finetune.max_epochs = 50;
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::pair<std::string, std::string>, const Field*> index;
  for (const auto& f : fields()) index[{f.section, f.key}] = &f;

  RunConfig config = default_run_config();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config: key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const auto it = index.find({section, key});
      if (it == index.end()) throw ConfigError("config: unknown key [" + section + "] " + key);
      it->second->set(config, value.data());
    }
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& config, bool include_runtime) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.runtime && !include_runtime) continue;
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += "; " + f.help + "\n" + f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

std::filesystem::path resolve_output_dir(const RunConfig& config) {
  std::filesystem::path dir(config.output_dir);
  if (const char* root = std::getenv("EXTRADIFF_OUTPUT_ROOT"); root && *root && dir.is_relative())
    return std::filesystem::path(root) / dir;
  return dir;
}

}  // namespace extradiff
