#pragma once

#include <string>
#include <vector>

#include "comprepr/losses.hpp"

namespace comprepr {

enum class LabelSpace { novel_only, joint };

struct EpisodeSpec {
  int n_shot = 1;
  int query_per_class = 5;
  LabelSpace label_space = LabelSpace::novel_only;
  std::uint64_t seed = 0;
  int trials = 20;
  /// Joint label space: support examples drawn per base class from the
  /// base training slice (queries come from the held-out validation slice).
  int base_support_per_class = 20;

  void validate() const;
};

/// Embeddings produced by one frozen encoder, with labels and split tags.
struct FrozenFeatures {
  Eigen::MatrixXd embeddings;  // N x m
  std::vector<std::int64_t> categories;
  std::vector<Split> splits;
  std::vector<std::uint8_t> in_base_val;  // 1 for the base validation slice
  std::uint64_t encoder_hash = 0;

  std::int64_t count() const { return embeddings.rows(); }
  std::int64_t dim() const { return embeddings.cols(); }
};

FrozenFeatures extract_features(const SplitDataset& dataset, const EncoderParams& encoder);

/// Rows into a FrozenFeatures matrix with dense episode labels.
struct LabeledSet {
  std::vector<std::size_t> rows;
  std::vector<std::int64_t> labels;      // dense in [0, classes.size())
  std::vector<std::int64_t> classes;     // dense label -> category id

  std::size_t size() const { return rows.size(); }
};

struct Episode {
  LabeledSet support;
  LabeledSet query;
};

/// Per novel class, n_shot support plus query_per_class query examples drawn
/// without replacement; deterministic in (spec.seed, trial). The joint label
/// space adds base-class support from the training slice and base-class
/// queries from the held-out validation slice.
Episode sample_episode(const SplitDataset& dataset, const FrozenFeatures& features, const EpisodeSpec& spec,
                       int trial);

/// Full-batch SGD (momentum 0.9) minimizing softmax cross-entropy on the
/// support features. With augment on, each iteration jitters the support
/// with Gaussian noise scaled to 0.1x the per-dimension support std.
ClassifierHead train_head(const FrozenFeatures& features, const LabeledSet& support, HeadKind kind, int iters,
                          double lr, bool augment, Rng& rng, double cosine_scale = 10.0);

struct EvalEntry {
  double top1 = 0.0;
  double top5 = 0.0;
  bool top5_degenerate = false;  // fewer than 6 classes: top5 is trivially 1
};

EvalEntry evaluate(const ClassifierHead& head, const FrozenFeatures& features, const LabeledSet& query);

/// Class prototypes are mean support embeddings; query logits are negative
/// squared Euclidean distances. Ties break toward the lower class index.
EvalEntry prototypical_baseline(const FrozenFeatures& features, const LabeledSet& support,
                                const LabeledSet& query);

struct MetricsRecord {
  std::string method;
  std::string variant;
  int n_shot = 0;
  LabelSpace label_space = LabelSpace::novel_only;
  double top1_mean = 0.0, top1_std = 0.0;
  double top5_mean = 0.0, top5_std = 0.0;
  int trials = 0;
  int seed_count = 1;
  bool top5_degenerate = false;
};

/// Mean and n-1 standard deviation over per-trial results.
MetricsRecord aggregate_trials(const std::vector<EvalEntry>& entries);

struct CompositionalityResult {
  double fit_distance = 0.0;      // mean 1 - cos on the fitting split
  double heldout_distance = 0.0;  // mean 1 - cos on the held-out split
  bool warning = false;           // fit loss rose 10 evaluations in a row
};

/// Fits a fresh attribute embedding to frozen base-category features by
/// gradient descent on mean (1 - cos) and scores reconstruction on a
/// held-out split. Initialized from the least-squares decomposition.
CompositionalityResult measure_compositionality(const FrozenFeatures& features, const CategoryTable& table,
                                                double split_fraction, int iters, double lr, std::uint64_t seed);

}  // namespace comprepr
