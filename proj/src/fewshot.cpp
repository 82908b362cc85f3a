#include "comprepr/fewshot.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "comprepr/trainer.hpp"

namespace comprepr {

void EpisodeSpec::validate() const {
  if (n_shot < 1) throw ContractError("n_shot must be at least 1");
  if (query_per_class < 1) throw ContractError("query_per_class must be at least 1");
  if (trials < 1) throw ContractError("trials must be at least 1");
  if (base_support_per_class < 1) throw ContractError("base_support_per_class must be at least 1");
}

FrozenFeatures extract_features(const SplitDataset& dataset, const EncoderParams& encoder) {
  const auto n = static_cast<std::int64_t>(dataset.examples.size());
  Tensor batch = Tensor::zeros({n, dataset.feature_dim()});
  auto bm = batch.matrix();
  for (std::int64_t i = 0; i < n; ++i) bm.row(i) = dataset.examples[static_cast<std::size_t>(i)].features;

  FrozenFeatures out;
  out.embeddings = encode_batch(encoder, batch).embedding.matrix();
  out.categories.resize(static_cast<std::size_t>(n));
  out.splits.resize(static_cast<std::size_t>(n));
  out.in_base_val.assign(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const Example& ex = dataset.examples[static_cast<std::size_t>(i)];
    out.categories[static_cast<std::size_t>(i)] = ex.category;
    out.splits[static_cast<std::size_t>(i)] = dataset.is_base(ex.category) ? Split::base : Split::novel;
  }
  for (std::size_t i : dataset.base_val_indices()) out.in_base_val[i] = 1;

  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const DenseLayer& layer : encoder.layers) {
    h = fnv1a64(layer.weight.flat().data(), static_cast<std::size_t>(layer.weight.size()) * sizeof(double), h);
    h = fnv1a64(layer.bias.flat().data(), static_cast<std::size_t>(layer.bias.size()) * sizeof(double), h);
  }
  out.encoder_hash = h;
  return out;
}

namespace {

Eigen::MatrixXd gather_rows(const FrozenFeatures& features, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<std::int64_t>(rows.size()), features.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<std::int64_t>(i)) = features.embeddings.row(static_cast<std::int64_t>(rows[i]));
  }
  return out;
}

Tensor constant_matrix(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

/// Rank of `label` among the logits with ties broken toward lower indices;
/// 0 means top-1.
std::int64_t label_rank(const Eigen::RowVectorXd& logits, std::int64_t label) {
  const double ref = logits[label];
  std::int64_t better = 0;
  for (std::int64_t c = 0; c < logits.size(); ++c) {
    if (logits[c] > ref || (logits[c] == ref && c < label)) ++better;
  }
  return better;
}

EvalEntry score_logits(const Eigen::MatrixXd& logits, std::span<const std::int64_t> labels) {
  const std::int64_t n = logits.rows();
  const std::int64_t classes = logits.cols();
  EvalEntry entry;
  entry.top5_degenerate = classes < 6;
  std::int64_t hit1 = 0, hit5 = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t rank = label_rank(logits.row(i), labels[static_cast<std::size_t>(i)]);
    if (rank == 0) ++hit1;
    if (rank < 5) ++hit5;
  }
  entry.top1 = static_cast<double>(hit1) / static_cast<double>(n);
  entry.top5 = entry.top5_degenerate ? 1.0 : static_cast<double>(hit5) / static_cast<double>(n);
  return entry;
}

}  // namespace

Episode sample_episode(const SplitDataset& dataset, const FrozenFeatures& features, const EpisodeSpec& spec,
                       int trial) {
  spec.validate();
  if (features.count() != static_cast<std::int64_t>(dataset.examples.size())) {
    throw DimensionError("features and dataset disagree on example count");
  }
  Rng rng(derive_seed(spec.seed, "episode-trial-" + std::to_string(trial)));

  std::vector<std::int64_t> classes;
  if (spec.label_space == LabelSpace::joint) {
    classes.insert(classes.end(), dataset.base_categories.begin(), dataset.base_categories.end());
  }
  classes.insert(classes.end(), dataset.novel_categories.begin(), dataset.novel_categories.end());
  std::sort(classes.begin(), classes.end());

  Episode ep;
  ep.support.classes = classes;
  ep.query.classes = classes;

  std::map<std::int64_t, std::int64_t> dense;
  for (std::size_t i = 0; i < classes.size(); ++i) dense[classes[i]] = static_cast<std::int64_t>(i);

  auto push = [](LabeledSet& set, std::size_t row, std::int64_t label) {
    set.rows.push_back(row);
    set.labels.push_back(label);
  };

  for (std::int64_t cat : dataset.novel_categories) {
    const auto rows = dataset.examples_of(cat);
    const auto need = static_cast<std::size_t>(spec.n_shot + spec.query_per_class);
    if (rows.size() < need) {
      throw ContractError("novel class " + std::to_string(cat) + " has " + std::to_string(rows.size()) +
                          " examples, episode needs " + std::to_string(need));
    }
    auto picks = rng.sample_without_replacement(rows.size(), need);
    const std::int64_t label = dense.at(cat);
    for (std::size_t i = 0; i < static_cast<std::size_t>(spec.n_shot); ++i) push(ep.support, rows[picks[i]], label);
    for (std::size_t i = static_cast<std::size_t>(spec.n_shot); i < need; ++i) push(ep.query, rows[picks[i]], label);
  }

  if (spec.label_space == LabelSpace::joint) {
    for (std::int64_t cat : dataset.base_categories) {
      std::vector<std::size_t> train_rows, val_rows;
      for (std::size_t row : dataset.examples_of(cat)) {
        (features.in_base_val[row] ? val_rows : train_rows).push_back(row);
      }
      const std::int64_t label = dense.at(cat);
      const std::size_t n_support = std::min(train_rows.size(), static_cast<std::size_t>(spec.base_support_per_class));
      for (std::size_t p : rng.sample_without_replacement(train_rows.size(), n_support)) {
        push(ep.support, train_rows[p], label);
      }
      const std::size_t n_query = std::min(val_rows.size(), static_cast<std::size_t>(spec.query_per_class));
      for (std::size_t p : rng.sample_without_replacement(val_rows.size(), n_query)) {
        push(ep.query, val_rows[p], label);
      }
    }
  }
  return ep;
}

ClassifierHead train_head(const FrozenFeatures& features, const LabeledSet& support, HeadKind kind, int iters,
                          double lr, bool augment, Rng& rng, double cosine_scale) {
  if (support.rows.empty()) throw ContractError("train_head: empty support set");
  if (iters < 1) throw ContractError("train_head: iters must be at least 1");

  const auto classes = static_cast<std::int64_t>(support.classes.size());
  ClassifierHead head = init_head(kind, classes, features.dim(), rng, cosine_scale);

  const Eigen::MatrixXd clean = gather_rows(features, support.rows);
  Eigen::RowVectorXd jitter_scale;
  if (augment) {
    // 0.1 x per-dimension support std (n-1 denominator; zero for singletons).
    jitter_scale = Eigen::RowVectorXd::Zero(clean.cols());
    if (clean.rows() > 1) {
      const Eigen::RowVectorXd mean = clean.colwise().mean();
      jitter_scale = 0.1 * ((clean.rowwise() - mean).colwise().squaredNorm() /
                            static_cast<double>(clean.rows() - 1))
                               .cwiseSqrt();
    }
  }

  std::vector<ParamRef> params;
  params.push_back({"head.weight", head.weights, false});
  if (kind == HeadKind::linear) params.push_back({"head.bias", head.bias, false});
  OptimizerState optimizer = make_optimizer(params, 0.9, 0.0, LrSchedule{lr, {}});

  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXd x = clean;
    if (augment) {
      for (std::int64_t r = 0; r < x.rows(); ++r) {
        for (std::int64_t c = 0; c < x.cols(); ++c) x(r, c) += jitter_scale[c] * rng.normal();
      }
    }
    for (const ParamRef& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
    Tensor loss = softmax_cross_entropy_rows(classify_batch(head, constant_matrix(x)), support.labels);
    if (!std::isfinite(loss.item())) {
      throw NumericError("train_head: non-finite loss at iteration " + std::to_string(it));
    }
    backward(loss);
    sgd_step(params, optimizer);
  }
  return head;
}

EvalEntry evaluate(const ClassifierHead& head, const FrozenFeatures& features, const LabeledSet& query) {
  if (query.rows.empty()) throw ContractError("evaluate: empty query set");
  Tensor logits = classify_batch(head, constant_matrix(gather_rows(features, query.rows)));
  return score_logits(logits.matrix(), query.labels);
}

EvalEntry prototypical_baseline(const FrozenFeatures& features, const LabeledSet& support,
                                const LabeledSet& query) {
  if (support.rows.empty() || query.rows.empty()) throw ContractError("prototypical_baseline: empty episode");
  const auto classes = static_cast<std::int64_t>(support.classes.size());

  // Accumulate class members in row order so the prototype is independent of
  // the support ordering.
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < support.rows.size(); ++i) {
    members[static_cast<std::size_t>(support.labels[i])].push_back(support.rows[i]);
  }
  Eigen::MatrixXd prototypes(classes, features.dim());
  for (std::int64_t c = 0; c < classes; ++c) {
    auto& rows = members[static_cast<std::size_t>(c)];
    if (rows.empty()) throw ContractError("prototypical_baseline: class " + std::to_string(c) + " has no support");
    std::sort(rows.begin(), rows.end());
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(features.dim());
    for (std::size_t r : rows) acc += features.embeddings.row(static_cast<std::int64_t>(r));
    prototypes.row(c) = acc / static_cast<double>(rows.size());
  }

  Eigen::MatrixXd logits(static_cast<std::int64_t>(query.rows.size()), classes);
  for (std::size_t i = 0; i < query.rows.size(); ++i) {
    const auto q = features.embeddings.row(static_cast<std::int64_t>(query.rows[i]));
    for (std::int64_t c = 0; c < classes; ++c) {
      logits(static_cast<std::int64_t>(i), c) = -(q - prototypes.row(c)).squaredNorm();
    }
  }
  return score_logits(logits, query.labels);
}

MetricsRecord aggregate_trials(const std::vector<EvalEntry>& entries) {
  if (entries.empty()) throw ContractError("aggregate_trials: no entries");
  MetricsRecord rec;
  rec.trials = static_cast<int>(entries.size());
  for (const EvalEntry& e : entries) {
    rec.top1_mean += e.top1;
    rec.top5_mean += e.top5;
    rec.top5_degenerate = rec.top5_degenerate || e.top5_degenerate;
  }
  const auto n = static_cast<double>(entries.size());
  rec.top1_mean /= n;
  rec.top5_mean /= n;
  if (entries.size() > 1) {
    double v1 = 0.0, v5 = 0.0;
    for (const EvalEntry& e : entries) {
      v1 += (e.top1 - rec.top1_mean) * (e.top1 - rec.top1_mean);
      v5 += (e.top5 - rec.top5_mean) * (e.top5 - rec.top5_mean);
    }
    rec.top1_std = std::sqrt(v1 / (n - 1.0));
    rec.top5_std = std::sqrt(v5 / (n - 1.0));
  }
  return rec;
}

CompositionalityResult measure_compositionality(const FrozenFeatures& features, const CategoryTable& table,
                                                double split_fraction, int iters, double lr, std::uint64_t seed) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ContractError("measure_compositionality: split_fraction must be in (0, 1)");
  }
  if (iters < 1 || lr <= 0.0) throw ContractError("measure_compositionality: need positive iters and lr");

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < features.splits.size(); ++i) {
    if (features.splits[i] == Split::base) rows.push_back(i);
  }
  if (rows.size() < 2) throw ContractError("measure_compositionality: need at least two base examples");

  std::int64_t k = 0;
  BatchDerivations derivs;
  derivs.reserve(rows.size());
  for (std::size_t r : rows) {
    const Derivation& d = table.at(features.categories[r]);
    if (d.empty()) {
      throw ContractError("measure_compositionality: category " + std::to_string(features.categories[r]) +
                          " has an empty derivation");
    }
    for (std::int64_t a : d.attrs) k = std::max(k, a + 1);
    derivs.push_back(d);
  }

  Rng rng(derive_seed(seed, "compositionality-split"));
  std::vector<std::size_t> perm(rows.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  auto n_fit = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(rows.size())));
  n_fit = std::min(std::max<std::size_t>(n_fit, 1), rows.size() - 1);

  const std::int64_t m = features.dim();
  auto build = [&](std::size_t begin, std::size_t end, Eigen::MatrixXd& f, RowMatrix& indicator,
                   BatchDerivations& d) {
    const auto n = static_cast<std::int64_t>(end - begin);
    f.resize(n, m);
    indicator = RowMatrix::Zero(n, k);
    d.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t pick = perm[i];
      f.row(static_cast<std::int64_t>(i - begin)) = features.embeddings.row(static_cast<std::int64_t>(rows[pick]));
      for (std::int64_t a : derivs[pick].attrs) indicator(static_cast<std::int64_t>(i - begin), a) = 1.0;
      d.push_back(derivs[pick]);
    }
  };
  Eigen::MatrixXd fit_f, held_f;
  RowMatrix fit_ind, held_ind;
  BatchDerivations fit_d, held_d;
  build(0, n_fit, fit_f, fit_ind, fit_d);
  build(n_fit, rows.size(), held_f, held_ind, held_d);

  // Least-squares warm start; descent then optimizes the cosine objective.
  Eigen::MatrixXd gram = fit_ind.transpose() * fit_ind;
  gram.diagonal().array() += 1e-9;
  Eigen::MatrixXd eta0 = gram.ldlt().solve(fit_ind.transpose() * fit_f);

  Tensor eta = Tensor::zeros({k, m}, true);
  eta.matrix() = eta0;
  AttributeEmbedding embedding{eta};
  Tensor fit_features = constant_matrix(fit_f);

  CompositionalityResult result;
  double prev = std::numeric_limits<double>::infinity();
  int rising = 0;
  double last_loss = 0.0;
  for (int it = 0; it < iters; ++it) {
    eta.zero_grad();
    Tensor loss = hard_comp_from_embeddings(fit_features, embedding, fit_d);
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) throw NumericError("measure_compositionality: non-finite fit loss");
    if (last_loss > prev) {
      if (++rising >= 10) result.warning = true;
    } else {
      rising = 0;
    }
    prev = last_loss;
    backward(loss);
    eta.flat() -= lr * eta.grad();
  }
  result.fit_distance = last_loss;

  auto mean_distance = [&](const Eigen::MatrixXd& f, const RowMatrix& indicator) {
    const Eigen::MatrixXd targets = indicator * eta.matrix();
    double acc = 0.0;
    for (std::int64_t i = 0; i < f.rows(); ++i) {
      const double denom = f.row(i).norm() * targets.row(i).norm();
      acc += denom > kNormEpsilon ? 1.0 - f.row(i).dot(targets.row(i)) / denom : 1.0;
    }
    return acc / static_cast<double>(f.rows());
  };
  result.heldout_distance = mean_distance(held_f, held_ind);
  return result;
}

}  // namespace comprepr
