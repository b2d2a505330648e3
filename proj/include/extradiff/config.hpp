#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "extradiff/corpus.hpp"
#include "extradiff/denoiser.hpp"
#include "extradiff/detect.hpp"
#include "extradiff/diffusion.hpp"
#include "extradiff/extrapolate.hpp"
#include "extradiff/sample.hpp"
#include "extradiff/training.hpp"

namespace extradiff {

/// Stage switches. The four ablation axes are cluster, classifier, rat and
/// null; null = false samples with eta = 1.
struct StageFlags {
  bool cluster = true;
  bool classifier = true;
  bool extrapolate = true;
  bool train = true;
  bool finetune = true;
  bool sample = true;
  bool evaluate = true;
  bool rat = true;
  bool null_guidance = true;
};

struct CorpusSection {
  std::string source = "synth";  // synth | file
  std::string dataset_path;
  std::string web_path;
  bool normalize = true;  // file source only
  SynthConfig synth;
};

struct DetectSection {
  int k = 5;
  double tau_sigma = 3.0;
  ClassifierTraining classifier;
};

struct DiffusionSection {
  int T = 50;
  double beta_min = 0.002;
  double beta_max = 0.4;
  SigmaMode sigma = SigmaMode::beta;
};

struct SampleSection {
  GuidanceConfig guidance;
  int per_class = 64;
};

struct EvaluateSection {
  /// Samples per label drawn for each fine-tuning evaluation.
  int monitor_per_class = 16;
  /// Raw vectors up to this dimension, classifier logits above it.
  int raw_feature_max_dim = 8;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  unsigned threads = 1;
  StageFlags stages;
  CorpusSection corpus;
  DetectSection detect;
  ExtrapolateOptions extrapolate;
  DiffusionSection diffusion;
  /// n_tokens = 0 means dim_image / d_latent; d_text always follows the corpus.
  DenoiserConfig denoiser;
  TrainConfig training;
  TrainConfig finetune;
  SampleSection sample;
  EvaluateSection evaluate;
  std::vector<double> sweep_etas{1.25, 1.5, 2.0};

  void validate() const;
};

RunConfig default_run_config();

/// Sectioned key=value text. Unknown sections or keys are errors; missing keys
/// keep their defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every key with its current value and a one-line comment. With
/// include_runtime = false the output_dir and threads keys are left out, which
/// gives a snapshot that does not change with where or how a run executes.
std::string dump_run_config(const RunConfig& config, bool include_runtime = true);

/// output_dir, placed under $EXTRADIFF_OUTPUT_ROOT when that is set and the
/// directory is relative.
std::filesystem::path resolve_output_dir(const RunConfig& config);

}  // namespace extradiff
