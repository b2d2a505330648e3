#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "extradiff/diffusion.hpp"

namespace extradiff {

struct DenoiserConfig {
  int n_tokens = 16;  // latent tokens (a flattened w x h grid)
  int d_latent = 4;   // latent channels per token
  int d_model = 32;
  int n_layers = 12;
  int layers_per_rat = 4;
  int d_text = 8;
  int d_time = 16;
  int d_hidden = 64;
  /// When false the RAT shifts are computed from the initial hidden state at
  /// every block (no recurrent cell); used for the RAT on/off ablation.
  bool recurrent = true;
  std::uint64_t seed = 0;

  int n_rat_blocks() const { return n_layers / layers_per_rat; }
  void validate() const;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

/// Location of one tensor in the flat parameter buffer (column-major).
struct TensorSlot {
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

struct TransformerBlockSlots {
  // Time-conditioned modulation MLP -> [gamma_attn, beta_attn, gamma_ff, beta_ff].
  TensorSlot mod_w1, mod_b1, mod_w2, mod_b2;
  // Time-conditioned gate MLP -> [alpha_attn, alpha_ff]; output layer zero-initialized.
  TensorSlot gate_w1, gate_b1, gate_w2, gate_b2;
  TensorSlot wq, wk, wv, wo, bo;
  TensorSlot ff_w1, ff_b1, ff_w2, ff_b2;
};

struct RatBlockSlots {
  // One-hidden-layer MLP h -> channel shift.
  TensorSlot w1, b1, w2, b2;
};

struct DenoiserLayout {
  TensorSlot in_w, in_b, in_pos, out_w, out_b;
  TensorSlot h0_w, h0_b;
  // Gated recurrent cell shared across RAT blocks (absent when !recurrent).
  TensorSlot gru_wz, gru_uz, gru_bz, gru_wr, gru_ur, gru_br, gru_wn, gru_un, gru_bn, gru_bun;
  std::vector<RatBlockSlots> rat;
  std::vector<TransformerBlockSlots> blocks;
  /// Every tensor in buffer order, with a dotted name.
  std::vector<std::pair<std::string, TensorSlot>> named;
  Eigen::Index size = 0;

  explicit DenoiserLayout(const DenoiserConfig& config);
  DenoiserLayout() = default;
};

/// Closed-form parameter count for a config.
Eigen::Index parameter_count(const DenoiserConfig& config);

/// All weights of the denoiser, or a gradient with the same layout.
struct DenoiserParams {
  DenoiserConfig config;
  DenoiserLayout layout;
  Eigen::VectorXd values;

  DenoiserParams() = default;
  explicit DenoiserParams(const DenoiserConfig& cfg);  // zero-filled

  Eigen::Map<Eigen::MatrixXd> operator[](const TensorSlot& s) {
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Eigen::MatrixXd> operator[](const TensorSlot& s) const {
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Index size() const { return values.size(); }
  bool all_finite() const { return values.allFinite(); }
  /// SHA-256 of the little-endian float64 payload.
  std::string content_hash() const;
};

using DenoiserGradient = DenoiserParams;

/// Seeded scaled-normal init (std 1/sqrt(fan_in), zero biases and token
/// offsets). The output
/// layers of every gate MLP and every RAT shift MLP start at zero, so a fresh
/// network is input projection followed by output projection, whatever the
/// condition.
DenoiserParams init_denoiser(const DenoiserConfig& config);

/// Interleaved sin/cos at geometric frequencies 10000^(-2i/d_time).
Eigen::VectorXd time_embedding(int t, int d_time);

/// eps_hat for a token x channel latent.
Latent denoise(const DenoiserParams& params, const Latent& x_t, int t, const Eigen::VectorXd& cond);

EpsilonModel as_epsilon_model(const DenoiserParams& params);

struct GradOptions {
  unsigned threads = 1;
  /// Gradient of loss_scale * L.
  double loss_scale = 1.0;
};

struct LossGradient {
  double loss = 0.0;
  DenoiserGradient grad;
};

/// Exact reverse-mode gradient of ddpm_loss for the given noise draws.
/// Per-sample gradients are reduced in batch order, so the result does not
/// depend on the thread count.
LossGradient denoiser_grad(const DenoiserParams& params, const std::vector<TrainingPair>& batch,
                           const std::vector<NoiseDraw>& draws, const NoiseSchedule& sched,
                           GradOptions options = {});

LossGradient denoiser_grad(const DenoiserParams& params, const std::vector<TrainingPair>& batch,
                           const NoiseSchedule& sched, Rng& rng, GradOptions options = {});

}  // namespace extradiff
