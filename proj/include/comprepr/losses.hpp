#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "comprepr/model.hpp"

namespace comprepr {

enum class CompVariant { none, hard, soft };
enum class SoftImpl { raw_margin, one_vs_all_logistic };

struct LossConfig {
  CompVariant variant = CompVariant::none;
  double lambda = 1.0;  // weight of the compositionality term; ignored for variant=none
  double beta = 0.0;    // weight of the orthogonality term; ignored for variant=none
  SoftImpl soft_impl = SoftImpl::one_vs_all_logistic;
  double neg_sample_ratio = 1.0;  // sampled negatives per positive attribute
  bool sample_negatives = true;
  std::vector<int> deep_layers;  // tapped hidden layers to regularize; empty = embedding only

  void validate() const;
};

/// Per-example derivations, looked up at category level: D(x_i) = D(y_i).
using BatchDerivations = std::vector<Derivation>;

BatchDerivations lookup_derivations(const CategoryTable& table, std::span<const std::int64_t> categories);

/// One attribute embedding per regularized layer. `final_eta` matches the
/// encoder output; each tapped hidden layer gets its own matrix sized to
/// that layer's width.
struct EtaSet {
  AttributeEmbedding final_eta;
  std::map<int, AttributeEmbedding> taps;

  std::vector<Tensor> parameters() const;
};

EtaSet init_eta_set(std::int64_t k, const EncoderParams& theta, const LossConfig& cfg, Rng& rng);

/// [B x m] reconstruction targets: row i is the sum of eta rows in D(x_i).
Tensor derivation_sums(const AttributeEmbedding& eta, const BatchDerivations& derivs);

/// Which (example, attribute) pairs the soft one-versus-all loss supervises.
/// Positives are always kept; negatives are subsampled per example to
/// neg_sample_ratio * |D(x_i)| without replacement.
struct SoftSupervision {
  Tensor mask;      // [B x k] constant, 1 on supervised pairs
  Tensor positive;  // [B x k] constant, 1 on supervised positives
  double count = 0.0;
};

SoftSupervision build_soft_supervision(const BatchDerivations& derivs, std::int64_t k, const LossConfig& cfg,
                                       Rng* rng);

// ---- losses on precomputed embeddings (shared by the per-layer variants) ----
Tensor hard_comp_from_embeddings(const Tensor& embeddings, const AttributeEmbedding& eta,
                                 const BatchDerivations& derivs);
Tensor soft_comp_from_scores(const Tensor& scores, const BatchDerivations& derivs, SoftImpl impl,
                             const SoftSupervision* supervision);

// ---- full objectives ----

/// Mean over the batch of 1 - cos(f(x_i), sum of attribute embeddings).
/// Requires every derivation to be non-empty.
Tensor hard_comp_loss(const EncoderParams& theta, const AttributeEmbedding& eta, const Tensor& batch,
                      const BatchDerivations& derivs);

/// raw_margin: mean over the batch of (sum of absent-attribute scores minus
/// sum of present-attribute scores). one_vs_all_logistic: mean binary
/// cross-entropy over the supervised attribute scores.
Tensor soft_comp_loss(const EncoderParams& theta, const AttributeEmbedding& eta, const Tensor& batch,
                      const BatchDerivations& derivs, const LossConfig& cfg, Rng* rng);

/// Mean absolute entrywise deviation of eta * eta^T from the identity.
Tensor orthogonality_penalty(const AttributeEmbedding& eta);

struct LossBreakdown {
  Tensor total;
  double cls = 0.0;   // classification term
  double comp = 0.0;  // compositionality terms, unweighted sum over layers
  double orth = 0.0;  // orthogonality terms, unweighted sum over layers
};

/// classification + lambda * (variant loss over all regularized layers)
/// + beta * (orthogonality over the same layers' embeddings).
LossBreakdown total_loss(const EncoderParams& theta, const EtaSet& etas, const ClassifierHead& head,
                         const Tensor& batch, std::span<const std::int64_t> labels,
                         const BatchDerivations& derivs, const LossConfig& cfg, Rng* rng);

/// Norm of the embedding part not explained by the attributes,
/// per example. Reporting only; never trained on.
std::vector<double> residual_diagnostic(const EncoderParams& theta, const AttributeEmbedding& eta,
                                        const Tensor& batch, const BatchDerivations& derivs);

}  // namespace comprepr
