#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "extradiff/corpus.hpp"
#include "extradiff/denoiser.hpp"
#include "extradiff/diffusion.hpp"

namespace extradiff {

enum class NullMode { mean_text, zero, explicit_vector };

NullMode null_mode_from_string(const std::string& text);
std::string to_string(NullMode mode);

struct GuidanceConfig {
  double eta = 1.5;
  NullMode null_mode = NullMode::mean_text;
  Eigen::VectorXd explicit_null;  // used by NullMode::explicit_vector
  /// Reverse chain length: x_steps ~ N(0, I), then t = steps..1. 0 means T.
  int steps = 0;
};

/// mean_text: element-wise mean of the canonical text features of the
/// corpus's dataset records (all records when it has none); zero: zeros;
/// explicit_vector: passthrough.
Eigen::VectorXd make_null_condition(const Corpus& corpus, NullMode mode, const Eigen::VectorXd& explicit_null = {});
Eigen::VectorXd make_null_condition(const Corpus& corpus, const GuidanceConfig& guidance);

/// eta * eps_text + (1 - eta) * eps_null. Algebraically (eps_text - eps_null)
/// * eta + eps_null; this form returns eps_text exactly at eta = 1.
Latent guided_epsilon(const Latent& eps_text, const Latent& eps_null, double eta);

/// (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z.
Latent reverse_step(const Latent& x_t, int t, const Latent& eps_hat, const NoiseSchedule& sched, const Latent& z);

struct SamplerOptions {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int n_tokens = 1;
  int d_latent = 1;
};

/// Sample i uses conds[i] and its own generator seeded derive_seed(seed, i):
/// one standard-normal draw for x_start, then one per step for z (z = 0 at t = 1).
std::vector<Latent> sample_guided(const EpsilonModel& model, const std::vector<Eigen::VectorXd>& conds,
                                  const Eigen::VectorXd& null_cond, const GuidanceConfig& guidance,
                                  const NoiseSchedule& sched, const SamplerOptions& options);

/// The same chain using eps_text alone.
std::vector<Latent> sample_unguided(const EpsilonModel& model, const std::vector<Eigen::VectorXd>& conds,
                                    int steps, const NoiseSchedule& sched, const SamplerOptions& options);

/// n samples for one condition from a trained denoiser.
std::vector<Latent> sample(const DenoiserParams& params, const Eigen::VectorXd& cond, const Eigen::VectorXd& null_cond,
                           const GuidanceConfig& guidance, const NoiseSchedule& sched, int n, std::uint64_t seed,
                           unsigned threads = 1);

}  // namespace extradiff
