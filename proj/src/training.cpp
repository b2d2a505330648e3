#include "extradiff/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "extradiff/error.hpp"
#include "extradiff/evaluate.hpp"

namespace extradiff {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("training: lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("training: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("training: max_epochs must be >= 1");
  if (max_steps < 0) throw ConfigError("training: max_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("training: eval_every must be >= 1");
  if (patience < 1) throw ConfigError("training: patience must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("training: Adam moment coefficients must lie in [0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("training: epsilon must be > 0");
  if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) throw ConfigError("training: cond_dropout must lie in [0,1]");
}

void adam_step(DenoiserParams& params, const DenoiserGradient& grad, AdamState& state, const TrainConfig& config) {
  if (state.m.size() != params.size()) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    double g = grad.values[i];
    if (config.weight_decay != 0.0) g += config.weight_decay * params.values[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params.values[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,step,loss,frechet\n";
  char buf[128];
  std::size_t next_metric = 0;
  for (int e = 0; e < epochs(); ++e) {
    std::snprintf(buf, sizeof buf, "%d,%ld,%.17g,", e + 1, epoch_end_steps[static_cast<std::size_t>(e)],
                  epoch_losses[static_cast<std::size_t>(e)]);
    out += buf;
    if (next_metric < metric_epochs.size() && metric_epochs[next_metric] == e + 1) {
      std::snprintf(buf, sizeof buf, "%.17g", metrics[next_metric]);
      out += buf;
      ++next_metric;
    }
    out += '\n';
  }
  return out;
}

Latent to_latent(const Eigen::VectorXd& v, int n_tokens, int d_latent) {
  if (v.size() != static_cast<Eigen::Index>(n_tokens) * d_latent)
    throw InputError("latent of length " + std::to_string(v.size()) + " does not fit " + std::to_string(n_tokens) +
                     "x" + std::to_string(d_latent));
  Latent x(n_tokens, d_latent);
  for (int i = 0; i < n_tokens; ++i)
    for (int j = 0; j < d_latent; ++j) x(i, j) = v[i * d_latent + j];
  return x;
}

Eigen::VectorXd from_latent(const Latent& x) {
  Eigen::VectorXd v(x.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) v[i * x.cols() + j] = x(i, j);
  return v;
}

std::vector<LatentExample> make_examples(const Corpus& corpus, const DenoiserConfig& config) {
  if (corpus.dim_text != config.d_text)
    throw InputError("corpus text width " + std::to_string(corpus.dim_text) + " does not match denoiser d_text " +
                     std::to_string(config.d_text));
  std::vector<LatentExample> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus.records) {
    if (r.text_vecs.empty()) throw InputError("record '" + r.id + "' has no text features to condition on");
    out.push_back({to_latent(r.image_vec, config.n_tokens, config.d_latent), r.text_vecs});
  }
  return out;
}

namespace {

/// Shared epoch loop for train and fine_tune.
class Trainer {
 public:
  Trainer(const Corpus& corpus, const DenoiserParams& init, const NoiseSchedule& sched, const TrainConfig& config)
      : examples_(make_examples(corpus, init.config)), params_(init), sched_(sched), config_(config),
        rng_(config.seed) {
    config.validate();
    if (examples_.empty()) throw InputError("training: empty corpus");
  }

  bool done() const { return config_.max_steps > 0 && state_.step >= config_.max_steps; }

  void run_epoch(TrainHistory& history) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(examples_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    std::bernoulli_distribution drop(config_.cond_dropout);
    double epoch_loss = 0.0;
    long steps = 0;
    for (std::size_t begin = 0; begin < order.size() && !done(); begin += static_cast<std::size_t>(config_.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config_.batch_size));
      std::vector<TrainingPair> batch;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& ex = examples_[order[i]];
        std::uniform_int_distribution<std::size_t> pick(0, ex.conds.size() - 1);
        Eigen::VectorXd cond = ex.conds[pick(rng_)];
        if (config_.cond_dropout > 0.0 && drop(rng_)) cond.setZero();
        batch.push_back({ex.x0, std::move(cond)});
      }
      const auto draws = draw_noise(batch, sched_, rng_);
      const auto lg = denoiser_grad(params_, batch, draws, sched_, GradOptions{config_.threads, 1.0});
      adam_step(params_, lg.grad, state_, config_);
      if (!params_.all_finite()) throw Error("training diverged: non-finite parameters at step " + std::to_string(state_.step));
      history.step_losses.push_back(lg.loss);
      epoch_loss += lg.loss;
      ++steps;
    }
    history.epoch_losses.push_back(steps > 0 ? epoch_loss / static_cast<double>(steps) : 0.0);
    history.epoch_end_steps.push_back(state_.step);
    history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    history.epoch_hashes.push_back(params_.content_hash());
  }

  const DenoiserParams& params() const { return params_; }

 private:
  std::vector<LatentExample> examples_;
  DenoiserParams params_;
  const NoiseSchedule& sched_;
  TrainConfig config_;
  Rng rng_;
  AdamState state_;
};

}  // namespace

TrainResult train(const Corpus& corpus, const DenoiserParams& init, const NoiseSchedule& sched,
                  const TrainConfig& config) {
  Trainer trainer(corpus, init, sched, config);
  TrainHistory history;
  for (int epoch = 0; epoch < config.max_epochs && !trainer.done(); ++epoch) trainer.run_epoch(history);
  return {trainer.params(), std::move(history)};
}

TrainResult fine_tune(const Corpus& corpus, const DenoiserParams& init, const NoiseSchedule& sched,
                      const TrainConfig& config, const MetricMonitor& monitor, DenoiserParams* last) {
  if (!monitor) throw ConfigError("fine_tune: a metric monitor is required");
  Trainer trainer(corpus, init, sched, config);
  TrainHistory history;
  DenoiserParams best = init;
  for (int epoch = 1; epoch <= config.max_epochs && !trainer.done(); ++epoch) {
    trainer.run_epoch(history);
    const bool final_epoch = epoch == config.max_epochs || trainer.done();
    if (epoch % config.eval_every != 0 && !final_epoch) continue;
    history.metrics.push_back(monitor(trainer.params(), epoch));
    history.metric_epochs.push_back(epoch);
    history.metric_hashes.push_back(history.epoch_hashes.back());
    const auto decision = early_stop_monitor(history.metrics, config.patience);
    if (decision.best_index == static_cast<int>(history.metrics.size()) - 1) best = trainer.params();
    history.best_eval = decision.best_index;
    if (decision.stop) {
      history.stopped_early = true;
      break;
    }
  }
  if (last) *last = trainer.params();
  return {std::move(best), std::move(history)};
}

}  // namespace extradiff
