#include "extradiff/extrapolate.hpp"

#include <algorithm>
#include <numeric>

#include "extradiff/error.hpp"
#include "extradiff/parallel.hpp"

namespace extradiff {

NeighborIndex::NeighborIndex(const Corpus& dataset)
    : images_(dataset.dim_image, static_cast<Eigen::Index>(dataset.size())),
      texts_(dataset.dim_text, static_cast<Eigen::Index>(dataset.size())) {
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& r = dataset.records[i];
    ids_.push_back(r.id);
    images_.col(static_cast<Eigen::Index>(i)) = r.image_vec;
    texts_.col(static_cast<Eigen::Index>(i)) = r.canonical_text();
  }
}

NeighborSet NeighborIndex::query(const Eigen::VectorXd& f, int k) const {
  const int n = size();
  if (k < 1) throw ConfigError("nearest_neighbors: k must be >= 1");
  if (k > n)
    throw ConfigError("nearest_neighbors: k=" + std::to_string(k) + " exceeds dataset size " + std::to_string(n));
  if (f.size() != images_.rows())
    throw InputError("nearest_neighbors: query has length " + std::to_string(f.size()) + ", expected " +
                     std::to_string(images_.rows()));

  const Eigen::VectorXd dist2 = (images_.colwise() - f).colwise().squaredNorm().transpose();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto closer = [&](int a, int b) {
    if (dist2[a] != dist2[b]) return dist2[a] < dist2[b];
    return ids_[static_cast<std::size_t>(a)] < ids_[static_cast<std::size_t>(b)];
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), closer);

  NeighborSet out;
  out.F.resize(images_.rows(), k);
  out.S.resize(texts_.rows(), k);
  for (int j = 0; j < k; ++j) {
    const int idx = order[static_cast<std::size_t>(j)];
    out.indices.push_back(idx);
    out.distances.push_back(std::sqrt(dist2[idx]));
    out.F.col(j) = images_.col(idx);
    out.S.col(j) = texts_.col(idx);
  }
  return out;
}

NeighborSet nearest_neighbors(const Eigen::VectorXd& f, const Corpus& dataset, int k) {
  return NeighborIndex(dataset).query(f, k);
}

ReconWeights solve_weights(const NeighborSet& nbrs, const Eigen::VectorXd& f, double ridge_lambda) {
  if (!(ridge_lambda >= 0.0)) throw ConfigError("solve_weights: ridge_lambda must be >= 0");
  if (nbrs.F.cols() < 1) throw InputError("solve_weights: empty neighbor set");
  if (f.size() != nbrs.F.rows()) throw InputError("solve_weights: query length does not match F");

  const Eigen::Index k = nbrs.F.cols();
  Eigen::MatrixXd gram = nbrs.F.transpose() * nbrs.F;
  gram.diagonal().array() += ridge_lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  // rcond is an estimate; 1e-12 on F^T F corresponds to cond(F) ~ 1e6. An exactly
  // zero pivot makes the estimate NaN, hence the negated comparisons.
  const Eigen::VectorXd pivots = ldlt.vectorD().cwiseAbs();
  const bool singular = !(pivots.minCoeff() > 1e-12 * pivots.maxCoeff()) || !(ldlt.rcond() >= 1e-12);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || singular) {
    throw RankDeficientError("solve_weights: normal matrix of " + std::to_string(k) +
                             " neighbors is singular at lambda=" + std::to_string(ridge_lambda) +
                             "; use ridge_lambda > 0");
  }
  ReconWeights out;
  out.ridge_lambda = ridge_lambda;
  out.w = ldlt.solve(nbrs.F.transpose() * f);
  out.residual_norm = (f - nbrs.F * out.w).norm();
  return out;
}

Eigen::VectorXd synthesize_text(const NeighborSet& nbrs, const ReconWeights& weights) {
  if (weights.w.size() != nbrs.S.cols()) throw InputError("synthesize_text: weight count does not match S");
  return nbrs.S * weights.w;
}

Corpus extrapolate_corpus(const Corpus& web_kept, const Corpus& dataset, const ExtrapolateOptions& options) {
  if (web_kept.dim_image != dataset.dim_image || web_kept.dim_text != dataset.dim_text)
    throw InputError("extrapolate_corpus: web and dataset dimensions differ");
  const NeighborIndex index(dataset);

  std::vector<EmbeddingRecord> augmented(web_kept.size());
  parallel_for(web_kept.size(), options.threads, [&](std::size_t i) {
    EmbeddingRecord r = web_kept.records[i];
    const auto nbrs = index.query(r.image_vec, options.k);
    const auto w = solve_weights(nbrs, r.image_vec, options.ridge_lambda);
    r.text_vecs.assign(1, synthesize_text(nbrs, w));
    r.extrapolated = true;
    augmented[i] = std::move(r);
  });

  Corpus out{dataset.dim_image, dataset.dim_text, dataset.normalized && web_kept.normalized, {}};
  out.records.reserve(dataset.size() + augmented.size());
  for (const auto& r : dataset.records) out.records.push_back(r);
  for (auto& r : augmented) out.records.push_back(std::move(r));
  out.validate();
  return out;
}

}  // namespace extradiff
