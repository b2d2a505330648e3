#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "extradiff/checkpoint.hpp"
#include "extradiff/config.hpp"
#include "extradiff/error.hpp"
#include "extradiff/pipeline.hpp"
#include "extradiff/random.hpp"

using namespace extradiff;
namespace fs = std::filesystem;

namespace {

/// Raised inside a subcommand; carries the exit code of the stage it belongs to.
struct CommandFailure {
  std::string stage;
  std::string message;
};

template <class F>
auto as_stage(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw CommandFailure{"config", e.what()};
  } catch (const std::exception& e) {
    throw CommandFailure{stage, e.what()};
  }
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  bool raw = false;

  void attach(CLI::App* app, bool with_raw = true) {
    app->add_option("-c,--config", config_path, "run config file (defaults otherwise)");
    app->add_option("--seed", seed, "override [run] seed");
    app->add_option("-j,--threads", threads, "override [run] threads");
    if (with_raw) app->add_flag("--raw", raw, "load corpora without L2 normalization");
  }

  RunConfig config() const {
    return as_stage("config", [&] {
      RunConfig c = config_path.empty() ? default_run_config() : load_run_config(config_path);
      if (seed) c.seed = *seed;
      if (threads) c.threads = threads;
      c.validate();
      return c;
    });
  }

  Corpus load(const std::string& path) const {
    return as_stage("corpus", [&] { return load_corpus(path, LoadOptions{!raw}); });
  }
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-feature extrapolation and toy RAT diffusion over embedding corpora"};
  app.require_subcommand(1);

  // synth
  Common synth_opts;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset/web corpus pair from [corpus]");
  synth_opts.attach(synth);
  synth->add_option("-o,--out", synth_out, "output directory")->required();

  // import
  Common import_opts;
  std::string import_dataset, import_web, import_out;
  auto* import = app.add_subcommand("import", "validate and normalize external corpus files");
  import_opts.attach(import);
  import->add_option("--dataset", import_dataset, "dataset corpus file")->required();
  import->add_option("--web", import_web, "web corpus file")->required();
  import->add_option("-o,--out", import_out, "output directory")->required();

  // export
  Common export_opts;
  std::string export_in, export_out;
  auto* exp = app.add_subcommand("export", "write a corpus as CSV (id,label,split,outlier,f0..,s0..)");
  export_opts.attach(exp);
  exp->add_option("-i,--in", export_in, "corpus file")->required();
  exp->add_option("-o,--out", export_out, "CSV file")->required();

  // filter
  Common filter_opts;
  std::string filter_dataset, filter_web, filter_out;
  bool no_cluster = false, no_classifier = false;
  auto* filter = app.add_subcommand("filter", "run the outlier detectors on a web corpus");
  filter_opts.attach(filter);
  filter->add_option("--dataset", filter_dataset, "dataset corpus")->required();
  filter->add_option("--web", filter_web, "web corpus")->required();
  filter->add_option("-o,--out", filter_out, "output directory")->required();
  filter->add_flag("--no-cluster", no_cluster, "disable the k-means detector");
  filter->add_flag("--no-classifier", no_classifier, "disable the classifier detector");

  // extrapolate
  Common extra_opts;
  std::string extra_dataset, extra_web, extra_out;
  std::optional<int> extra_k;
  std::optional<double> extra_lambda;
  auto* extra = app.add_subcommand("extrapolate", "synthesize text features for web images");
  extra_opts.attach(extra);
  extra->add_option("--dataset", extra_dataset, "dataset corpus")->required();
  extra->add_option("--web", extra_web, "web corpus (usually filtered)")->required();
  extra->add_option("-o,--out", extra_out, "output corpus")->required();
  extra->add_option("-k", extra_k, "neighbors");
  extra->add_option("--lambda", extra_lambda, "ridge term");

  // train
  Common train_opts;
  std::string train_corpus, train_out, train_history;
  auto* train_cmd = app.add_subcommand("train", "train a fresh denoiser on a corpus");
  train_opts.attach(train_cmd);
  train_cmd->add_option("--corpus", train_corpus, "training corpus (every record needs text)")->required();
  train_cmd->add_option("-o,--out", train_out, "checkpoint file")->required();
  train_cmd->add_option("--history", train_history, "history CSV");

  // finetune
  Common ft_opts;
  std::string ft_dataset, ft_init, ft_out, ft_history;
  auto* ft = app.add_subcommand("finetune", "fine-tune on the dataset with Frechet early stopping");
  ft_opts.attach(ft);
  ft->add_option("--dataset", ft_dataset, "dataset corpus")->required();
  ft->add_option("--init", ft_init, "starting checkpoint")->required();
  ft->add_option("-o,--out", ft_out, "best checkpoint")->required();
  ft->add_option("--history", ft_history, "history CSV");

  // sample
  Common sample_opts;
  std::string sample_ckpt, sample_dataset, sample_out;
  std::optional<double> sample_eta;
  std::optional<int> sample_n;
  auto* sample_cmd = app.add_subcommand("sample", "generate per-label samples from a checkpoint");
  sample_opts.attach(sample_cmd);
  sample_cmd->add_option("--ckpt", sample_ckpt, "checkpoint")->required();
  sample_cmd->add_option("--dataset", sample_dataset, "dataset corpus (labels, conditions, null prompt)")->required();
  sample_cmd->add_option("-o,--out", sample_out, "generated corpus")->required();
  sample_cmd->add_option("--eta", sample_eta, "guidance ratio");
  sample_cmd->add_option("-n,--per-class", sample_n, "samples per label");

  // eval
  Common eval_opts;
  std::string eval_real, eval_gen, eval_out;
  double eval_eta = 0.0;
  auto* eval = app.add_subcommand("eval", "compare a generated corpus with a real one");
  eval_opts.attach(eval);
  eval->add_option("--real", eval_real, "real corpus")->required();
  eval->add_option("--generated", eval_gen, "generated corpus")->required();
  eval->add_option("-o,--out", eval_out, "CSV file (stdout when absent)");
  eval->add_option("--eta", eval_eta, "value written to the eta column");

  // pipeline / sweep
  Common pipe_opts, sweep_opts;
  std::string pipe_out, sweep_out;
  auto* pipe = app.add_subcommand("pipeline", "run every enabled stage");
  pipe_opts.attach(pipe, false);
  pipe->add_option("-o,--out", pipe_out, "override [run] output_dir");
  auto* sweep = app.add_subcommand("sweep", "pipeline with sample/evaluate repeated over [sweep] etas");
  sweep_opts.attach(sweep, false);
  sweep->add_option("-o,--out", sweep_out, "override [run] output_dir");

  // report
  std::string report_dir;
  auto* report = app.add_subcommand("report", "rebuild report.csv (and scatter.svg) for a run directory");
  report->add_option("dir", report_dir, "run directory")->required();

  // config
  auto* config_cmd = app.add_subcommand("config", "config file helpers");
  config_cmd->require_subcommand(1);
  std::string init_out;
  auto* config_init = config_cmd->add_subcommand("init", "write every key with its default");
  config_init->add_option("-o,--out", init_out, "file (stdout when absent)");
  Common show_opts;
  auto* config_show = config_cmd->add_subcommand("show", "print the effective config");
  show_opts.attach(config_show, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      RunConfig c = synth_opts.config();
      if (synth_opts.raw) c.corpus.normalize = false;
      const CorpusPair pair = as_stage("corpus", [&] { return stage_corpus(c); });
      as_stage("corpus", [&] {
        fs::create_directories(synth_out);
        save_corpus(pair.dataset, fs::path(synth_out) / "dataset.jsonl");
        save_corpus(pair.web, fs::path(synth_out) / "web.jsonl");
        return 0;
      });
      std::cout << pair.dataset.size() << " dataset and " << pair.web.size() << " web records in " << synth_out << "\n";
    } else if (*import) {
      const Corpus ds = import_opts.load(import_dataset), web = import_opts.load(import_web);
      as_stage("corpus", [&] {
        if (ds.dim_image != web.dim_image || ds.dim_text != web.dim_text)
          throw InputError("dataset and web corpora declare different dimensions");
        fs::create_directories(import_out);
        save_corpus(ds, fs::path(import_out) / "dataset.jsonl");
        save_corpus(web, fs::path(import_out) / "web.jsonl");
        return 0;
      });
    } else if (*exp) {
      const Corpus c = export_opts.load(export_in);
      as_stage("report", [&] {
        std::string csv = "id,label,split,outlier";
        for (int i = 0; i < c.dim_image; ++i) csv += ",f" + std::to_string(i);
        for (int i = 0; i < c.dim_text; ++i) csv += ",s" + std::to_string(i);
        csv += "\n";
        for (const auto& r : c.records) {
          csv += r.id + "," + r.label + "," + to_string(r.split) + "," +
                 (r.outlier_truth ? (*r.outlier_truth ? "1" : "0") : "");
          for (Eigen::Index i = 0; i < r.image_vec.size(); ++i) csv += "," + csv_number(r.image_vec[i]);
          if (!r.text_vecs.empty()) {
            const Eigen::VectorXd s = r.canonical_text();
            for (Eigen::Index i = 0; i < s.size(); ++i) csv += "," + csv_number(s[i]);
          } else {
            for (int i = 0; i < c.dim_text; ++i) csv += ",";
          }
          csv += "\n";
        }
        write_file(export_out, csv);
        return 0;
      });
    } else if (*filter) {
      RunConfig c = filter_opts.config();
      if (no_cluster) c.stages.cluster = false;
      if (no_classifier) c.stages.classifier = false;
      const Corpus ds = filter_opts.load(filter_dataset), web = filter_opts.load(filter_web);
      as_stage("filter", [&] {
        const auto out = stage_filter(c, web, ds);
        fs::create_directories(filter_out);
        if (out.cluster) save_filter_report(*out.cluster, fs::path(filter_out) / "filter_cluster.jsonl");
        if (out.classifier) save_filter_report(*out.classifier, fs::path(filter_out) / "filter_classifier.jsonl");
        save_corpus(out.web_kept, fs::path(filter_out) / "web_kept.jsonl");
        for (const auto* r : {&out.cluster, &out.classifier})
          if (*r) {
            std::cout << (*r)->detector << ": removed " << (*r)->removed_ids().size() << " of " << (*r)->decisions.size() << "\n";
            for (const auto& w : (*r)->warnings) std::cerr << "warning: " << w << "\n";
          }
        return 0;
      });
    } else if (*extra) {
      RunConfig c = extra_opts.config();
      if (extra_k) c.extrapolate.k = *extra_k;
      if (extra_lambda) c.extrapolate.ridge_lambda = *extra_lambda;
      const Corpus ds = extra_opts.load(extra_dataset), web = extra_opts.load(extra_web);
      as_stage("extrapolate", [&] {
        ExtrapolateOptions o = c.extrapolate;
        o.threads = c.threads;
        save_corpus(extrapolate_corpus(web, ds, o), extra_out);
        return 0;
      });
    } else if (*train_cmd) {
      const RunConfig c = train_opts.config();
      const Corpus corpus = train_opts.load(train_corpus);
      as_stage("train", [&] {
        TrainConfig t = c.training;
        t.seed = derive_seed(c.seed, "train");
        t.threads = c.threads;
        const auto r = train(corpus, init_denoiser(resolve_denoiser(c, corpus)), make_schedule(c), t);
        save_checkpoint(r.params, train_out);
        if (!train_history.empty()) write_file(train_history, r.history.to_csv());
        std::cout << "trained " << r.history.epochs() << " epochs, final loss " << r.history.epoch_losses.back() << "\n";
        return 0;
      });
    } else if (*ft) {
      const RunConfig c = ft_opts.config();
      const Corpus ds = ft_opts.load(ft_dataset);
      as_stage("finetune", [&] {
        const DenoiserParams init = load_checkpoint(ft_init);
        const auto clf = reference_classifier(c, ds);
        TrainConfig t = c.finetune;
        t.seed = derive_seed(c.seed, "finetune");
        t.threads = c.threads;
        const auto r = fine_tune(ds, init, make_schedule(c), t,
                                 [&](const DenoiserParams& p, int) { return monitor_metric(c, p, ds, clf); });
        save_checkpoint(r.params, ft_out);
        if (!ft_history.empty()) write_file(ft_history, r.history.to_csv());
        std::cout << "fine-tuned " << r.history.epochs() << " epochs, best metric "
                  << r.history.metrics[static_cast<std::size_t>(r.history.best_eval)] << " at epoch "
                  << r.history.metric_epochs[static_cast<std::size_t>(r.history.best_eval)] << "\n";
        return 0;
      });
    } else if (*sample_cmd) {
      RunConfig c = sample_opts.config();
      const Corpus ds = sample_opts.load(sample_dataset);
      as_stage("sample", [&] {
        const DenoiserParams p = load_checkpoint(sample_ckpt);
        save_corpus(generate_corpus(c, p, ds, sample_eta.value_or(c.sample.guidance.eta),
                                    sample_n.value_or(c.sample.per_class), "sample"),
                    sample_out);
        return 0;
      });
    } else if (*eval) {
      const RunConfig c = eval_opts.config();
      const Corpus real = eval_opts.load(eval_real), gen = eval_opts.load(eval_gen);
      as_stage("evaluate", [&] {
        const std::string csv = eval_csv(evaluate_generated(c, real, gen, reference_classifier(c, real)), eval_eta);
        if (eval_out.empty())
          std::cout << csv;
        else
          write_file(eval_out, csv);
        return 0;
      });
    } else if (*pipe || *sweep) {
      const bool is_sweep = sweep->parsed();
      RunConfig c = (is_sweep ? sweep_opts : pipe_opts).config();
      const std::string& out = is_sweep ? sweep_out : pipe_out;
      if (!out.empty()) c.output_dir = out;
      const PipelineResult r = run_pipeline(c, is_sweep);
      for (const auto& s : r.stages) std::cout << s.name << ": " << s.status << "\n";
      if (r.exit_code != 0) {
        std::cerr << "stage " << r.failed_stage << " failed: " << r.error << "\n";
        return r.exit_code;
      }
      std::cout << "run directory: " << r.run_dir.string() << "\n";
    } else if (*report) {
      as_stage("report", [&] {
        for (const auto& f : emit_report(report_dir)) std::cout << f << "\n";
        return 0;
      });
    } else if (*config_init) {
      const std::string text = dump_run_config(default_run_config());
      if (init_out.empty())
        std::cout << text;
      else
        as_stage("config", [&] {
          write_file(init_out, text);
          return 0;
        });
    } else if (*config_show) {
      std::cout << dump_run_config(show_opts.config());
    }
  } catch (const CommandFailure& f) {
    std::cerr << "stage " << f.stage << " failed: " << f.message << "\n";
    return stage_exit_code(f.stage);
  }
  return 0;
}
