#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "comprepr/error.hpp"

namespace comprepr {

/// The primitive vocabulary: named binary attributes, optionally arranged in
/// a forest of parent-child edges used for annotation pruning.
struct AttributeVocabulary {
  std::vector<std::string> names;
  std::vector<std::pair<std::int64_t, std::int64_t>> hierarchy;  // (parent, child)

  std::int64_t size() const { return static_cast<std::int64_t>(names.size()); }
  /// parent index per attribute, -1 for roots. Validates the forest property.
  std::vector<std::int64_t> parents() const;
  void validate() const;

  static AttributeVocabulary numbered(std::int64_t k);  // attr_0 ... attr_{k-1}
};

/// Sorted set of attribute indices describing one category.
struct Derivation {
  std::vector<std::int64_t> attrs;

  static Derivation of(std::vector<std::int64_t> attrs);  // sorts; rejects duplicates
  std::int64_t size() const { return static_cast<std::int64_t>(attrs.size()); }
  bool empty() const { return attrs.empty(); }
  bool contains(std::int64_t a) const;
  bool operator==(const Derivation&) const = default;
};

/// Category-level derivations: every example inherits its category's set.
struct CategoryTable {
  std::map<std::int64_t, Derivation> rows;

  const Derivation& at(std::int64_t category) const;
  bool has(std::int64_t category) const { return rows.count(category) > 0; }
};

enum class Split { base, novel };

struct Example {
  Eigen::VectorXd features;
  std::int64_t category = 0;
};

/// Linear mixing ground truth behind a synthetic dataset:
/// x = mixing * onehot(D(y)) + nuisance * u + noise.
struct GroundTruth {
  Eigen::MatrixXd mixing;    // d_in x k, unit-norm columns
  Eigen::MatrixXd nuisance;  // d_in x r, unit-norm columns
  double sigma_noise = 0.0;
};

struct SplitDataset {
  std::vector<Example> examples;
  std::vector<std::int64_t> base_categories;   // sorted
  std::vector<std::int64_t> novel_categories;  // sorted
  CategoryTable table;
  AttributeVocabulary vocab;
  std::optional<GroundTruth> ground_truth;

  std::int64_t feature_dim() const;
  bool is_base(std::int64_t category) const;
  /// Example indices of one category, in stored order.
  std::vector<std::size_t> examples_of(std::int64_t category) const;
  /// Held-out validation slice: the trailing 10% (ceiling, at least one) of
  /// each base category's examples in stored order. Fixed by construction so
  /// that every consumer sees the same split.
  std::vector<std::size_t> base_val_indices() const;
  std::vector<std::size_t> base_train_indices() const;
  void validate() const;
};

struct GeneratorSpec {
  std::int64_t k = 30;
  std::int64_t a_per_cat = 5;
  std::int64_t n_base = 40;
  std::int64_t n_novel = 20;
  std::int64_t per_cat_base = 100;
  std::int64_t per_cat_novel = 20;
  std::int64_t d_in = 64;
  // Nuisance rank is chosen so that, together with k attribute directions,
  // the two subspaces cannot be separated inside d_in dimensions; suppressing
  // nuisance then forces a trade-off against attribute axes.
  std::int64_t r_nuisance = 32;
  double sigma_noise = 0.3;
};

/// Draws a dataset with known compositional structure. Category derivations
/// are distinct random a_per_cat-subsets; novel categories recombine only
/// attributes already used by some base category.
SplitDataset generate_synthetic(const GeneratorSpec& spec, std::uint64_t seed);

/// Category-level aggregation of per-image binary annotations: an attribute
/// is positive for a category when at least half of its images carry it;
/// attributes positive for fewer than `min_cats` categories are dropped and
/// the index space is re-densified.
struct AggregationResult {
  CategoryTable table;
  AttributeVocabulary vocab;
  std::vector<std::int64_t> kept_attributes;  // new index -> old index
};
AggregationResult aggregate_attributes(
    const std::map<std::int64_t, std::vector<std::vector<std::uint8_t>>>& image_level,
    const AttributeVocabulary& vocab, std::int64_t min_cats);

/// Expands partial annotator answers into a full binary vector: attributes
/// below a "no" ancestor become negative automatically; every root and every
/// child whose ancestors are all "yes" must be answered explicitly.
std::vector<std::uint8_t> prune_hierarchy(const std::map<std::int64_t, bool>& answers,
                                          const AttributeVocabulary& vocab);

/// Keeps ceil(fraction*k) attributes chosen uniformly without replacement
/// (original order preserved) and restricts all derivations to them.
struct SubsampleResult {
  CategoryTable table;
  AttributeVocabulary vocab;
  std::vector<std::int64_t> kept_attributes;  // new index -> old index
};
SubsampleResult subsample_attributes(const CategoryTable& table, const AttributeVocabulary& vocab,
                                     double fraction, std::uint64_t seed);

void save_dataset(const SplitDataset& ds, const std::filesystem::path& path);
SplitDataset load_dataset(const std::filesystem::path& path);

/// Plain categories x attributes 0/1 matrix, comma-separated, with a header
/// row of attribute names and a leading category-id column.
void export_attribute_matrix(const CategoryTable& table, const AttributeVocabulary& vocab,
                             const std::filesystem::path& path);
std::pair<CategoryTable, AttributeVocabulary> import_attribute_matrix(const std::filesystem::path& path);

}  // namespace comprepr
