#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace extradiff {

enum class Split { dataset, web };

std::string to_string(Split split);
Split split_from_string(const std::string& text);

/// One image: its identity, keyword label, image feature and caption features.
struct EmbeddingRecord {
  std::string id;
  std::string label;
  Split split = Split::dataset;
  Eigen::VectorXd image_vec;
  std::vector<Eigen::VectorXd> text_vecs;
  std::optional<bool> outlier_truth;
  bool extrapolated = false;  // text_vecs[0] was synthesized from neighbours
  bool generated = false;     // image_vec is a sampler output

  /// Element-wise mean of text_vecs. Throws InputError when there are none.
  Eigen::VectorXd canonical_text() const;

  friend bool operator==(const EmbeddingRecord& a, const EmbeddingRecord& b);
};

struct Corpus {
  static constexpr int kSchemaVersion = 1;

  int dim_image = 0;
  int dim_text = 0;
  /// Set once every vector has been scaled to unit L2 norm.
  bool normalized = false;
  std::vector<EmbeddingRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  /// Full scan: dimensions, id uniqueness, dataset records carry text.
  /// Throws InputError naming the first offending record.
  void validate() const;

  /// Records with the given split, order preserved.
  Corpus filter_split(Split split) const;

  /// Distinct labels in first-appearance order.
  std::vector<std::string> labels() const;

  friend bool operator==(const Corpus& a, const Corpus& b);
};

/// Scales every image and text vector to unit norm (zero vectors are left as is).
void normalize_in_place(Corpus& corpus);

struct LoadOptions {
  /// L2-normalize vectors of a file whose schema line says normalized=false.
  bool normalize = true;
};

/// Reads the line-delimited corpus format. The first line is the schema record
/// {"schema_version","dim_image","dim_text","normalized"}; every following
/// non-empty line is one record. Any malformed record rejects the whole file.
Corpus load_corpus(const std::filesystem::path& path, LoadOptions options = {});
Corpus parse_corpus(const std::string& text, LoadOptions options = {});

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
std::string serialize_corpus(const Corpus& corpus);

struct SynthConfig {
  int n_classes = 4;
  int dataset_per_class = 50;
  int web_per_class = 250;
  /// Fraction of all web records drawn from a displaced irrelevant component.
  double outlier_fraction = 0.2;
  /// Fraction of all web records whose image comes from a different class.
  double similar_fraction = 0.0;
  /// Distance between class centers, and between a class center and its
  /// irrelevant component, in units of the within-class RMS radius
  /// (within_std * sqrt(dim_image)).
  double separation = 6.0;
  double within_std = 1.0;
  int dim_image = 16;
  int dim_text = 8;
  int texts_per_record = 3;
  /// Every text_vec equals M * image_vec for one seeded matrix M.
  bool joint_map = false;
  /// Caption spread around the class text center when joint_map is off.
  double text_noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticWorld {
  Corpus dataset;
  Corpus web;
  /// Only meaningful with joint_map; dim_text x dim_image.
  Eigen::MatrixXd text_map;
  std::vector<Eigen::VectorXd> class_centers;
};

SyntheticWorld generate_synthetic(const SynthConfig& config);

}  // namespace extradiff
