#include "extradiff/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "extradiff/checkpoint.hpp"
#include "extradiff/error.hpp"
#include "extradiff/hash.hpp"
#include "extradiff/random.hpp"

namespace extradiff {
namespace fs = std::filesystem;

int stage_exit_code(const std::string& stage) {
  if (stage == "config") return kConfigExitCode;
  for (const auto& s : kStages)
    if (stage == s.name) return s.exit_code;
  return 1;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

Eigen::VectorXd feature(const RunConfig& config, const SoftmaxClassifier& clf, const Eigen::VectorXd& v) {
  return v.size() <= config.evaluate.raw_feature_max_dim ? v : clf.logits(v);
}

std::map<std::string, std::vector<Eigen::VectorXd>> features_by_label(const RunConfig& config, const Corpus& c,
                                                                      const SoftmaxClassifier& clf) {
  std::map<std::string, std::vector<Eigen::VectorXd>> out;
  for (const auto& r : c.records) out[r.label].push_back(feature(config, clf, r.image_vec));
  return out;
}

double mean_label_frechet(const RunConfig& config, const Corpus& real, const Corpus& generated,
                          const SoftmaxClassifier& clf) {
  const auto real_f = features_by_label(config, real, clf);
  const auto gen_f = features_by_label(config, generated, clf);
  double total = 0.0;
  for (const auto& label : real.labels()) {
    const auto it = gen_f.find(label);
    if (it == gen_f.end()) throw InputError("no generated records for label " + label);
    total += frechet_distance(fit_gaussian(real_f.at(label)), fit_gaussian(it->second));
  }
  return total / static_cast<double>(real.labels().size());
}

}  // namespace

CorpusPair stage_corpus(const RunConfig& config) {
  if (config.corpus.source == "synth") {
    SynthConfig s = config.corpus.synth;
    s.seed = derive_seed(config.seed, "synth");
    auto world = generate_synthetic(s);
    if (config.corpus.normalize) {
      normalize_in_place(world.dataset);
      normalize_in_place(world.web);
    }
    return {std::move(world.dataset), std::move(world.web)};
  }
  const LoadOptions opts{config.corpus.normalize};
  CorpusPair pair{load_corpus(config.corpus.dataset_path, opts), load_corpus(config.corpus.web_path, opts)};
  if (pair.dataset.dim_image != pair.web.dim_image || pair.dataset.dim_text != pair.web.dim_text)
    throw InputError("dataset and web corpora declare different dimensions");
  return pair;
}

SoftmaxClassifier reference_classifier(const RunConfig& config, const Corpus& dataset) {
  ClassifierTraining t = config.detect.classifier;
  t.seed = derive_seed(config.seed, "classifier");
  return train_classifier(dataset, t);
}

FilterOutcome stage_filter(const RunConfig& config, const Corpus& web, const Corpus& dataset) {
  FilterOutcome out{web, std::nullopt, std::nullopt};
  if (config.stages.cluster) {
    ClusterFilterOptions o{config.detect.k, config.detect.tau_sigma, derive_seed(config.seed, "cluster"), config.threads};
    out.cluster = cluster_filter(out.web_kept, dataset, o);
    out.web_kept = out.cluster->apply(out.web_kept);
  }
  if (config.stages.classifier) {
    out.classifier = classifier_filter(out.web_kept, reference_classifier(config, dataset), config.threads);
    out.web_kept = out.classifier->apply(out.web_kept);
  }
  return out;
}

DenoiserConfig resolve_denoiser(const RunConfig& config, const Corpus& dataset) {
  DenoiserConfig d = config.denoiser;
  d.d_text = dataset.dim_text;
  if (d.n_tokens == 0) {
    if (d.d_latent < 1 || dataset.dim_image % d.d_latent != 0)
      throw ConfigError("[denoiser] d_latent " + std::to_string(d.d_latent) + " does not divide dim_image " +
                        std::to_string(dataset.dim_image));
    d.n_tokens = dataset.dim_image / d.d_latent;
  }
  if (d.n_tokens * d.d_latent != dataset.dim_image)
    throw ConfigError("[denoiser] n_tokens * d_latent must equal dim_image " + std::to_string(dataset.dim_image));
  d.recurrent = config.stages.rat;
  d.seed = derive_seed(config.seed, "denoiser");
  d.validate();
  return d;
}

NoiseSchedule make_schedule(const RunConfig& config) {
  return build_schedule(config.diffusion.T, config.diffusion.beta_min, config.diffusion.beta_max, config.diffusion.sigma);
}

double effective_eta(const RunConfig& config, double eta) { return config.stages.null_guidance ? eta : 1.0; }

Corpus generate_corpus(const RunConfig& config, const DenoiserParams& params, const Corpus& dataset, double eta,
                       int per_class, const std::string& stream) {
  const auto sched = make_schedule(config);
  GuidanceConfig g = config.sample.guidance;
  g.eta = effective_eta(config, eta);
  const Eigen::VectorXd null_cond = make_null_condition(dataset, g);
  const auto model = as_epsilon_model(params);
  const std::uint64_t stream_seed = derive_seed(config.seed, stream);

  Corpus out{dataset.dim_image, dataset.dim_text, false, {}};
  for (const auto& label : dataset.labels()) {
    std::vector<Eigen::VectorXd> texts;
    for (const auto& r : dataset.records)
      if (r.label == label) texts.push_back(r.canonical_text());
    std::vector<Eigen::VectorXd> conds;
    for (int j = 0; j < per_class; ++j) conds.push_back(texts[static_cast<std::size_t>(j) % texts.size()]);
    const SamplerOptions opts{derive_seed(stream_seed, label), config.threads, params.config.n_tokens,
                              params.config.d_latent};
    const auto xs = sample_guided(model, conds, null_cond, g, sched, opts);
    for (int j = 0; j < per_class; ++j) {
      char id[32];
      std::snprintf(id, sizeof id, "-%05d", j);
      EmbeddingRecord r;
      r.id = "gen-" + label + id;
      r.label = label;
      r.split = Split::dataset;
      r.image_vec = from_latent(xs[static_cast<std::size_t>(j)]);
      r.text_vecs = {conds[static_cast<std::size_t>(j)]};
      r.generated = true;
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<EvalRow> evaluate_generated(const RunConfig& config, const Corpus& real, const Corpus& generated,
                                        const SoftmaxClassifier& clf) {
  const auto real_f = features_by_label(config, real, clf);
  std::map<std::string, std::vector<Eigen::VectorXd>> gen_raw;
  for (const auto& r : generated.records) gen_raw[r.label].push_back(r.image_vec);

  std::vector<EvalRow> rows;
  EvalRow all{"all", 0, 0, 0.0, 0.0, 0.0};
  std::vector<Eigen::VectorXd> every;
  long correct_total = 0;
  for (const auto& label : real.labels()) {
    const auto it = gen_raw.find(label);
    if (it == gen_raw.end() || it->second.size() < 2)
      throw InputError("evaluate: fewer than 2 generated records for label " + label);
    std::vector<Eigen::VectorXd> gf;
    long correct = 0;
    const int want = clf.index_of(label);
    for (const auto& v : it->second) {
      gf.push_back(feature(config, clf, v));
      correct += clf.predict(v) == want;
      every.push_back(v);
    }
    EvalRow row;
    row.label = label;
    row.n_real = static_cast<long>(real_f.at(label).size());
    row.n_generated = static_cast<long>(it->second.size());
    row.frechet = frechet_distance(fit_gaussian(real_f.at(label)), fit_gaussian(gf));
    row.inception_score = inception_score(it->second, clf);
    row.accuracy = static_cast<double>(correct) / static_cast<double>(row.n_generated);
    all.n_real += row.n_real;
    all.n_generated += row.n_generated;
    all.frechet += row.frechet;
    correct_total += correct;
    rows.push_back(row);
  }
  all.frechet /= static_cast<double>(rows.size());
  all.inception_score = inception_score(every, clf);
  all.accuracy = static_cast<double>(correct_total) / static_cast<double>(all.n_generated);
  rows.push_back(all);
  return rows;
}

std::string eval_csv(const std::vector<EvalRow>& rows, double eta) {
  std::string out = "eta,label,n_real,n_generated,frechet,inception_score,accuracy\n";
  for (const auto& r : rows)
    out += fixed(eta) + "," + r.label + "," + std::to_string(r.n_real) + "," + std::to_string(r.n_generated) + "," +
           fixed(r.frechet) + "," + fixed(r.inception_score) + "," + fixed(r.accuracy) + "\n";
  return out;
}

double monitor_metric(const RunConfig& config, const DenoiserParams& params, const Corpus& dataset,
                      const SoftmaxClassifier& clf) {
  const Corpus gen = generate_corpus(config, params, dataset, config.sample.guidance.eta,
                                     config.evaluate.monitor_per_class, "monitor");
  return mean_label_frechet(config, dataset, gen, clf);
}

namespace {

class Run {
 public:
  Run(const RunConfig& config, bool sweep) : config_(config), sweep_(sweep) {}

  PipelineResult execute() {
    result_.run_dir = resolve_output_dir(config_);
    try {
      config_.validate();
      fs::create_directories(result_.run_dir);
      config_snapshot_ = dump_run_config(config_, false);
      write_text(result_.run_dir / "config.ini", config_snapshot_);
    } catch (const std::exception& e) {
      result_.exit_code = kConfigExitCode;
      result_.failed_stage = "config";
      result_.error = e.what();
      return result_;
    }
    using Step = void (Run::*)(StageRecord&);
    const std::pair<const char*, Step> steps[] = {
        {"corpus", &Run::corpus},   {"filter", &Run::filter}, {"extrapolate", &Run::extrapolate},
        {"train", &Run::train},     {"finetune", &Run::finetune}, {"sample", &Run::sample},
        {"evaluate", &Run::evaluate}, {"report", &Run::report}};
    for (const auto& [name, step] : steps) {
      StageRecord rec{name, "done", {}, {}};
      try {
        (this->*step)(rec);
      } catch (const std::exception& e) {
        rec.status = "failed";
        rec.error = e.what();
        result_.stages.push_back(rec);
        result_.exit_code = stage_exit_code(name);
        result_.failed_stage = name;
        result_.error = e.what();
        write_manifest();
        return result_;
      }
      result_.stages.push_back(rec);
      write_manifest();
    }
    return result_;
  }

 private:
  fs::path path(const std::string& rel) const { return result_.run_dir / rel; }

  void save(StageRecord& rec, const std::string& rel, const Corpus& c) {
    fs::create_directories(path(rel).parent_path());
    save_corpus(c, path(rel));
    rec.artifacts.push_back(rel);
  }
  void save(StageRecord& rec, const std::string& rel, const std::string& text) {
    fs::create_directories(path(rel).parent_path());
    write_text(path(rel), text);
    rec.artifacts.push_back(rel);
  }
  void save(StageRecord& rec, const std::string& rel, const DenoiserParams& p) {
    save_checkpoint(p, path(rel));
    rec.artifacts.push_back(rel);
  }

  const SoftmaxClassifier& classifier() {
    if (!clf_) clf_ = reference_classifier(config_, data_.dataset);
    return *clf_;
  }

  void corpus(StageRecord& rec) {
    data_ = stage_corpus(config_);
    if (data_.dataset.size() == 0) throw InputError("dataset corpus is empty");
    save(rec, "dataset.jsonl", data_.dataset);
    save(rec, "web.jsonl", data_.web);
    web_kept_ = data_.web;
  }

  static std::string filter_metrics_row(const FilterReport& report, const Corpus& web) {
    std::map<std::string, bool> truth;
    bool have_truth = false;
    for (const auto& r : web.records)
      if (r.outlier_truth) {
        truth[r.id] = *r.outlier_truth;
        have_truth = true;
      }
    long removed = 0, outliers = 0, caught = 0, inliers = 0, wrongly = 0;
    for (const auto& d : report.decisions) {
      removed += !d.kept;
      const auto it = truth.find(d.id);
      if (it == truth.end()) continue;
      if (it->second) {
        ++outliers;
        caught += !d.kept;
      } else {
        ++inliers;
        wrongly += !d.kept;
      }
    }
    auto ratio = [&](long a, long b) { return have_truth && b > 0 ? fixed(static_cast<double>(a) / b) : std::string(); };
    return report.detector + "," + std::to_string(report.decisions.size()) + "," + std::to_string(removed) + "," +
           ratio(caught, outliers) + "," + ratio(wrongly, inliers) + "\n";
  }

  void filter(StageRecord& rec) {
    if (!config_.stages.cluster && !config_.stages.classifier) {
      rec.status = "skipped";
      return;
    }
    const auto out = stage_filter(config_, data_.web, data_.dataset);
    std::string metrics = "detector,examined,removed,recall,false_removal\n";
    if (out.cluster) {
      save(rec, "filter_cluster.jsonl", serialize_filter_report(*out.cluster));
      metrics += filter_metrics_row(*out.cluster, data_.web);
    }
    if (out.classifier) {
      save(rec, "filter_classifier.jsonl", serialize_filter_report(*out.classifier));
      metrics += filter_metrics_row(*out.classifier, data_.web);
    }
    web_kept_ = out.web_kept;
    save(rec, "web_kept.jsonl", web_kept_);
    save(rec, "filter_metrics.csv", metrics);
  }

  void extrapolate(StageRecord& rec) {
    if (!config_.stages.extrapolate) {
      rec.status = "skipped";
      train_corpus_ = data_.dataset;
      return;
    }
    ExtrapolateOptions o = config_.extrapolate;
    o.threads = config_.threads;
    train_corpus_ = extrapolate_corpus(web_kept_, data_.dataset, o);
    save(rec, "extrapolated.jsonl", train_corpus_);
  }

  TrainConfig train_config(const TrainConfig& base, const char* stream) const {
    TrainConfig t = base;
    t.seed = derive_seed(config_.seed, stream);
    t.threads = config_.threads;
    return t;
  }

  void train(StageRecord& rec) {
    params_ = init_denoiser(resolve_denoiser(config_, data_.dataset));
    if (!config_.stages.train) {
      rec.status = "skipped";
      return;
    }
    auto r = extradiff::train(train_corpus_, params_, make_schedule(config_), train_config(config_.training, "train"));
    params_ = std::move(r.params);
    save(rec, "train.ckpt", params_);
    save(rec, "train_history.csv", r.history.to_csv());
  }

  void finetune(StageRecord& rec) {
    if (!config_.stages.finetune) {
      rec.status = "skipped";
      return;
    }
    const auto& clf = classifier();
    const MetricMonitor monitor = [&](const DenoiserParams& p, int) {
      return monitor_metric(config_, p, data_.dataset, clf);
    };
    DenoiserParams last;
    auto r = fine_tune(data_.dataset, params_, make_schedule(config_), train_config(config_.finetune, "finetune"),
                       monitor, &last);
    params_ = std::move(r.params);
    save(rec, "finetune.ckpt", params_);
    save(rec, "finetune_last.ckpt", last);
    save(rec, "finetune_history.csv", r.history.to_csv());
  }

  std::vector<double> etas() const {
    return sweep_ ? config_.sweep_etas : std::vector<double>{config_.sample.guidance.eta};
  }
  static std::string sweep_dir(double eta) { return "sweep/eta_" + shortest(eta) + "/"; }

  void sample(StageRecord& rec) {
    if (!config_.stages.sample) {
      rec.status = "skipped";
      return;
    }
    generated_.clear();
    if (!sweep_) {
      generated_.push_back(generate_corpus(config_, params_, data_.dataset, config_.sample.guidance.eta,
                                           config_.sample.per_class, "sample"));
      save(rec, "generated.jsonl", generated_.back());
      return;
    }
    for (double eta : config_.sweep_etas) {
      generated_.push_back(generate_corpus(config_, params_, data_.dataset, eta, config_.sample.per_class, "sample"));
      save(rec, sweep_dir(eta) + "generated.jsonl", generated_.back());
    }
  }

  void evaluate(StageRecord& rec) {
    if (!config_.stages.evaluate || !config_.stages.sample) {
      rec.status = "skipped";
      return;
    }
    const auto e = etas();
    for (std::size_t i = 0; i < e.size(); ++i) {
      const auto rows = evaluate_generated(config_, data_.dataset, generated_[i], classifier());
      const std::string dir = sweep_ ? sweep_dir(e[i]) : "";
      save(rec, dir + "eval_metrics.csv", eval_csv(rows, effective_eta(config_, e[i])));
    }
  }

  void report(StageRecord& rec) {
    if (!config_.stages.evaluate || !config_.stages.sample) {
      rec.status = "skipped";
      return;
    }
    rec.artifacts = emit_report(result_.run_dir);
  }

  void write_manifest() {
    nlohmann::ordered_json m;
    m["format"] = "extradiff-run";
    m["version"] = 1;
    m["seed"] = config_.seed;
    m["config_sha256"] = sha256_hex(config_snapshot_);
    nlohmann::ordered_json order = nlohmann::ordered_json::array();
    for (const auto& s : kStages) order.push_back(s.name);
    m["stage_order"] = order;
    nlohmann::ordered_json stages = nlohmann::ordered_json::array();
    for (const auto& s : result_.stages) {
      nlohmann::ordered_json j;
      j["name"] = s.name;
      j["status"] = s.status;
      nlohmann::ordered_json arts = nlohmann::ordered_json::array();
      for (const auto& a : s.artifacts) arts.push_back({{"path", a}, {"sha256", sha256_file(path(a))}});
      j["artifacts"] = arts;
      if (!s.error.empty()) j["error"] = s.error;
      stages.push_back(j);
    }
    m["stages"] = stages;
    write_text(path("manifest.json"), m.dump(2) + "\n");
  }

  RunConfig config_;
  bool sweep_;
  PipelineResult result_;
  std::string config_snapshot_;
  CorpusPair data_;
  Corpus web_kept_, train_corpus_;
  std::optional<SoftmaxClassifier> clf_;
  DenoiserParams params_;
  std::vector<Corpus> generated_;
};

struct ReportRow {
  double eta;
  std::string frechet, inception_score, accuracy, n_generated;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

ReportRow read_summary(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError("report: missing " + file.string());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto c = split_csv(line);
    if (c.size() == 7 && c[1] == "all") return {std::stod(c[0]), c[4], c[5], c[6], c[3]};
  }
  throw InputError("report: no summary row in " + file.string());
}

std::string scatter_svg(const Corpus& real, const Corpus& generated) {
  double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
  for (const auto* c : {&real, &generated})
    for (const auto& r : c->records) {
      lo_x = std::min(lo_x, r.image_vec[0]);
      hi_x = std::max(hi_x, r.image_vec[0]);
      lo_y = std::min(lo_y, r.image_vec[1]);
      hi_y = std::max(hi_y, r.image_vec[1]);
    }
  const double size = 480, pad = 20;
  const double sx = (size - 2 * pad) / std::max(hi_x - lo_x, 1e-12);
  const double sy = (size - 2 * pad) / std::max(hi_y - lo_y, 1e-12);
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  std::map<std::string, int> color;
  for (const auto& l : real.labels()) color.emplace(l, static_cast<int>(color.size()) % 8);
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"480\" viewBox=\"0 0 480 480\">\n"
                    "<rect width=\"480\" height=\"480\" fill=\"white\"/>\n";
  char buf[256];
  auto point = [&](const EmbeddingRecord& r, bool gen) {
    const auto it = color.find(r.label);
    const char* fill = palette[it == color.end() ? 0 : it->second];
    const double x = pad + (r.image_vec[0] - lo_x) * sx, y = size - pad - (r.image_vec[1] - lo_y) * sy;
    if (gen)
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\" fill=\"none\" stroke=\"%s\"/>\n", x, y, fill);
    else
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2\" fill=\"%s\" fill-opacity=\"0.5\"/>\n", x, y, fill);
    svg += buf;
  };
  for (const auto& r : real.records) point(r, false);
  for (const auto& r : generated.records) point(r, true);
  svg += "<text x=\"8\" y=\"14\" font-size=\"11\" font-family=\"sans-serif\">filled: real, hollow: generated</text>\n</svg>\n";
  return svg;
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& config, bool sweep) { return Run(config, sweep).execute(); }

std::vector<std::string> emit_report(const fs::path& run_dir) {
  std::vector<ReportRow> rows;
  std::string generated_rel;
  if (fs::is_directory(run_dir / "sweep")) {
    for (const auto& entry : fs::directory_iterator(run_dir / "sweep"))
      if (entry.is_directory()) rows.push_back(read_summary(entry.path() / "eval_metrics.csv"));
    std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) { return a.eta < b.eta; });
    if (!rows.empty()) generated_rel = "sweep/eta_" + shortest(rows.front().eta) + "/generated.jsonl";
  } else {
    rows.push_back(read_summary(run_dir / "eval_metrics.csv"));
    generated_rel = "generated.jsonl";
  }
  if (rows.empty()) throw InputError("report: no evaluations under " + run_dir.string());

  std::string csv = "eta,frechet,inception_score,accuracy,n_generated\n";
  for (const auto& r : rows)
    csv += fixed(r.eta) + "," + r.frechet + "," + r.inception_score + "," + r.accuracy + "," + r.n_generated + "\n";
  write_text(run_dir / "report.csv", csv);
  std::vector<std::string> written{"report.csv"};

  if (!fs::exists(run_dir / "dataset.jsonl")) throw InputError("report: missing dataset.jsonl");
  const Corpus real = load_corpus(run_dir / "dataset.jsonl", LoadOptions{false});
  if (real.dim_image == 2 && fs::exists(run_dir / generated_rel)) {
    const Corpus gen = load_corpus(run_dir / generated_rel, LoadOptions{false});
    write_text(run_dir / "scatter.svg", scatter_svg(real, gen));
    written.push_back("scatter.svg");
  }
  return written;
}

}  // namespace extradiff
