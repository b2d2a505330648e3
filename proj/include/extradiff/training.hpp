#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "extradiff/corpus.hpp"
#include "extradiff/denoiser.hpp"
#include "extradiff/diffusion.hpp"

namespace extradiff {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.0;
  int batch_size = 24;
  int max_epochs = 100;
  /// Stop after this many optimizer steps; 0 means no step cap.
  long max_steps = 0;
  int eval_every = 1;
  int patience = 1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Probability of replacing a sample's condition with the zero vector.
  double cond_dropout = 0.0;
  unsigned threads = 1;

  void validate() const;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
};

/// One Adam update with bias correction. weight_decay adds wd * theta to the
/// gradient; with wd == 0 that term is skipped entirely.
void adam_step(DenoiserParams& params, const DenoiserGradient& grad, AdamState& state, const TrainConfig& config);

struct TrainHistory {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::vector<long> epoch_end_steps;
  std::vector<double> epoch_seconds;  // wall clock, excluded from determinism checks
  std::vector<std::string> epoch_hashes;
  /// Fine-tuning only: eval metrics and the epoch each was taken at.
  std::vector<double> metrics;
  std::vector<int> metric_epochs;
  std::vector<std::string> metric_hashes;
  int best_eval = -1;
  bool stopped_early = false;

  int epochs() const { return static_cast<int>(epoch_losses.size()); }
  /// CSV with header epoch,step,loss,frechet; frechet empty where not evaluated.
  std::string to_csv() const;
};

struct TrainResult {
  DenoiserParams params;
  TrainHistory history;
};

/// Flattens image vectors into token x channel latents (row-major) and keeps
/// every record's text_vecs as candidate conditions.
struct LatentExample {
  Latent x0;
  std::vector<Eigen::VectorXd> conds;
};
std::vector<LatentExample> make_examples(const Corpus& corpus, const DenoiserConfig& config);

Latent to_latent(const Eigen::VectorXd& v, int n_tokens, int d_latent);
Eigen::VectorXd from_latent(const Latent& x);

/// Adam over shuffled mini-batches; each sample's condition is one of its
/// text_vecs chosen by a seeded draw. Deterministic given config.seed.
TrainResult train(const Corpus& corpus, const DenoiserParams& init, const NoiseSchedule& sched,
                  const TrainConfig& config);

using MetricMonitor = std::function<double(const DenoiserParams& params, int epoch)>;

/// The train loop with an evaluation every eval_every epochs (and after the
/// last one). Stops per early_stop_monitor and returns the running-best
/// checkpoint; `last` receives the final parameters when non-null.
TrainResult fine_tune(const Corpus& corpus, const DenoiserParams& init, const NoiseSchedule& sched,
                      const TrainConfig& config, const MetricMonitor& monitor, DenoiserParams* last = nullptr);

}  // namespace extradiff
