#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "extradiff/config.hpp"
#include "extradiff/evaluate.hpp"

namespace extradiff {

/// Stage names in execution order, with the process exit code each one
/// returns on failure. Configuration errors exit with 2.
struct StageSpec {
  const char* name;
  int exit_code;
};
inline constexpr StageSpec kStages[] = {{"corpus", 3},  {"filter", 4}, {"extrapolate", 5},
                                        {"train", 6},   {"finetune", 7}, {"sample", 8},
                                        {"evaluate", 9}, {"report", 10}};
inline constexpr int kConfigExitCode = 2;
int stage_exit_code(const std::string& stage);

struct CorpusPair {
  Corpus dataset;
  Corpus web;
};

/// Synthetic world or the two configured files.
CorpusPair stage_corpus(const RunConfig& config);

struct FilterOutcome {
  Corpus web_kept;
  std::optional<FilterReport> cluster;
  std::optional<FilterReport> classifier;
};

/// Cluster detector then classifier detector, each when enabled.
FilterOutcome stage_filter(const RunConfig& config, const Corpus& web, const Corpus& dataset);

/// The seeded softmax classifier over dataset labels, shared by the
/// classifier filter and the metrics.
SoftmaxClassifier reference_classifier(const RunConfig& config, const Corpus& dataset);

DenoiserConfig resolve_denoiser(const RunConfig& config, const Corpus& dataset);
NoiseSchedule make_schedule(const RunConfig& config);

/// eta after the null toggle.
double effective_eta(const RunConfig& config, double eta);

/// per_class generated records for every dataset label. Sample j of a label is
/// conditioned on the canonical text of that label's (j mod n)-th dataset
/// record; its chain is seeded from (seed, stream, label).
Corpus generate_corpus(const RunConfig& config, const DenoiserParams& params, const Corpus& dataset, double eta,
                       int per_class, const std::string& stream);

struct EvalRow {
  std::string label;  // "all" for the summary row
  long n_real = 0;
  long n_generated = 0;
  double frechet = 0.0;
  double inception_score = 0.0;
  double accuracy = 0.0;
};

/// Per-label rows then an "all" row whose frechet is the mean over labels.
std::vector<EvalRow> evaluate_generated(const RunConfig& config, const Corpus& real, const Corpus& generated,
                                        const SoftmaxClassifier& clf);
std::string eval_csv(const std::vector<EvalRow>& rows, double eta);

/// Mean per-label Frechet distance of fresh samples against the dataset; the
/// fine-tuning monitor.
double monitor_metric(const RunConfig& config, const DenoiserParams& params, const Corpus& dataset,
                      const SoftmaxClassifier& clf);

struct StageRecord {
  std::string name;
  std::string status;  // done | skipped | failed
  std::vector<std::string> artifacts;  // relative to the run directory
  std::string error;
};

struct PipelineResult {
  std::filesystem::path run_dir;
  int exit_code = 0;
  std::string failed_stage;
  std::string error;
  std::vector<StageRecord> stages;
};

/// Runs every enabled stage in order into resolve_output_dir(config) and writes
/// manifest.json (stage order, status, artifact SHA-256). With sweep = true the
/// sample and evaluate stages are repeated for each of config.sweep_etas under
/// sweep/eta_<value>/. Never throws for stage failures; see exit_code.
PipelineResult run_pipeline(const RunConfig& config, bool sweep = false);

/// report.csv from the run's eval_metrics files (one row per sweep point, or one
/// row for a plain run) and scatter.svg when the image features are 2-D.
/// Returns the written file names. Throws InputError on missing artifacts.
std::vector<std::string> emit_report(const std::filesystem::path& run_dir);

}  // namespace extradiff
