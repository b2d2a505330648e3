#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "extradiff/corpus.hpp"

namespace extradiff {

// ---------------------------------------------------------------------------
// K-means

struct KMeansOptions {
  int max_iterations = 300;
};

struct KMeansModel {
  int k = 0;
  Eigen::MatrixXd centroids;          // k x D, one centroid per row
  std::vector<int> assignments;       // point index -> cluster index
  double objective = 0.0;             // sum of squared distances to assigned centroid
  Eigen::MatrixXd initial_centroids;  // seeded k-means++ start
  /// Objective after each assignment step, starting with the initial centroids.
  std::vector<double> objective_trace;
  int iterations = 0;
  bool converged = false;
};

/// k-means++ seeding: first centroid uniform, the rest drawn proportional to
/// squared distance from the nearest chosen centroid.
Eigen::MatrixXd kmeans_plus_plus_init(const Eigen::MatrixXd& points, int k, std::uint64_t seed);

/// Lloyd iterations from a k-means++ start until the assignment reaches a
/// fixpoint or max_iterations. Points are rows. Ties go to the lower cluster
/// index; an emptied cluster keeps its previous centroid.
KMeansModel kmeans_fit(const Eigen::MatrixXd& points, int k, std::uint64_t seed,
                       KMeansOptions options = {});

// ---------------------------------------------------------------------------
// Softmax classifier

struct SoftmaxClassifier {
  Eigen::MatrixXd weights;  // n_classes x D
  Eigen::VectorXd bias;     // n_classes
  std::vector<std::string> labels;

  int n_classes() const { return static_cast<int>(labels.size()); }
  int index_of(const std::string& label) const;  // -1 when unknown

  Eigen::VectorXd logits(const Eigen::VectorXd& x) const;
  Eigen::VectorXd probabilities(const Eigen::VectorXd& x) const;
  int predict(const Eigen::VectorXd& x) const;
};

/// Numerically stable softmax (max-shifted).
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

struct ClassifierTraining {
  double learning_rate = 0.5;
  int epochs = 300;
  std::uint64_t seed = 0;
  /// Standard deviation of the seeded Gaussian weight init.
  double init_scale = 0.01;
};

/// Mean cross-entropy over (features rows, targets) and its gradient.
struct LossAndGradient {
  double loss = 0.0;
  Eigen::MatrixXd grad_weights;
  Eigen::VectorXd grad_bias;
};
LossAndGradient cross_entropy_gradient(const SoftmaxClassifier& clf, const Eigen::MatrixXd& features,
                                       const std::vector<int>& targets);

/// Full-batch gradient descent on the dataset image vectors. Records are
/// visited in ascending id order, so the result is independent of file order.
SoftmaxClassifier train_classifier(const Corpus& dataset, const ClassifierTraining& options);

// ---------------------------------------------------------------------------
// Filters

struct FilterDecision {
  std::string id;
  std::string label;
  bool kept = true;
  /// cluster filter: distance from the record's cluster centroid to the class
  /// centroid; classifier filter: max posterior probability.
  double statistic = 0.0;
  /// cluster filter: threshold tau * s_c; classifier filter: unused (0).
  double threshold = 0.0;
  int cluster = -1;
  std::string predicted_label;
  bool unfiltered = false;  // keyword had no dataset counterpart
};

struct FilterReport {
  std::string detector;
  std::vector<FilterDecision> decisions;  // ascending id order
  std::vector<std::string> warnings;

  std::vector<std::string> kept_ids() const;
  std::vector<std::string> removed_ids() const;
  /// Web records whose decision is `kept`, in the web corpus order.
  Corpus apply(const Corpus& web) const;
};

struct ClusterFilterOptions {
  int k = 5;
  double tau_sigma = 3.0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

/// Per keyword: K-means on the web image vectors, then drop every cluster whose
/// centroid lies farther than tau_sigma * s_c from the keyword's dataset class
/// centroid, s_c being the mean member distance to that centroid.
FilterReport cluster_filter(const Corpus& web, const Corpus& dataset, const ClusterFilterOptions& options);

/// Keeps a record iff the classifier's argmax label equals its keyword.
FilterReport classifier_filter(const Corpus& web, const SoftmaxClassifier& clf, unsigned threads = 1);

/// Line-delimited audit file: one JSON object per decision.
std::string serialize_filter_report(const FilterReport& report);
void save_filter_report(const FilterReport& report, const std::filesystem::path& path);

}  // namespace extradiff
