#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "extradiff/corpus.hpp"

namespace extradiff {

/// The k nearest dataset images of a query: F holds their image features as
/// columns, S their canonical text features, index-aligned with F.
struct NeighborSet {
  std::vector<int> indices;  // into the dataset corpus, nearest first
  std::vector<double> distances;
  Eigen::MatrixXd F;  // D x k
  Eigen::MatrixXd S;  // D_s x k

  int k() const { return static_cast<int>(indices.size()); }
};

struct ReconWeights {
  Eigen::VectorXd w;
  double residual_norm = 0.0;  // |f - F w|
  double ridge_lambda = 0.0;
};

/// Dataset image and canonical-text matrices, built once and shared by queries.
class NeighborIndex {
 public:
  explicit NeighborIndex(const Corpus& dataset);

  /// The k records with the smallest Euclidean distance to f, ties broken by
  /// ascending id.
  NeighborSet query(const Eigen::VectorXd& f, int k) const;

  int size() const { return static_cast<int>(ids_.size()); }

 private:
  std::vector<std::string> ids_;
  Eigen::MatrixXd images_;  // D x n
  Eigen::MatrixXd texts_;   // D_s x n
};

NeighborSet nearest_neighbors(const Eigen::VectorXd& f, const Corpus& dataset, int k);

/// w = (F^T F + lambda I)^{-1} F^T f via a pivoted LDL^T factorization of the
/// k x k normal matrix. Throws RankDeficientError when lambda = 0 and the
/// normal matrix is numerically singular.
ReconWeights solve_weights(const NeighborSet& nbrs, const Eigen::VectorXd& f, double ridge_lambda);

/// s = S w.
Eigen::VectorXd synthesize_text(const NeighborSet& nbrs, const ReconWeights& weights);

struct ExtrapolateOptions {
  int k = 8;
  double ridge_lambda = 1e-6;
  unsigned threads = 1;
};

/// Gives every web record exactly one synthesized text_vec (flagged
/// extrapolated) and returns dataset records followed by the augmented web
/// records, both in input order.
Corpus extrapolate_corpus(const Corpus& web_kept, const Corpus& dataset, const ExtrapolateOptions& options);

}  // namespace extradiff
