#pragma once

#include <vector>

#include <Eigen/Dense>

#include "extradiff/detect.hpp"

namespace extradiff {

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // symmetric, unbiased
  long count = 0;

  Eigen::Index dim() const { return mean.size(); }
};

/// Sample mean and unbiased covariance of feature rows. Needs >= 2 rows.
GaussianStats fit_gaussian(const Eigen::MatrixXd& features);
GaussianStats fit_gaussian(const std::vector<Eigen::VectorXd>& features);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}), with both
/// square roots taken by symmetric eigendecomposition and eigenvalues down to
/// -1e-9 (relative to the largest eigenvalue when that exceeds 1) clamped to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

/// Symmetric PSD square root; throws InputError on eigenvalues below -1e-9.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

/// exp(mean_x KL(p(y|x) || p(y))) over posterior rows, p(y) their mean.
double inception_score(const Eigen::MatrixXd& posteriors);
double inception_score(const std::vector<Eigen::VectorXd>& samples, const SoftmaxClassifier& clf);

struct EarlyStopDecision {
  bool stop = false;
  /// Index of the running-best metric (earliest on ties); -1 for an empty history.
  int best_index = -1;
  /// Eval index at which the stop triggered, -1 when continuing.
  int stop_index = -1;
};

/// Stop once `patience` consecutive evals sit strictly above the running best.
EarlyStopDecision early_stop_monitor(const std::vector<double>& history, int patience);

}  // namespace extradiff
