#include "comprepr/losses.hpp"

#include <cmath>

namespace comprepr {

void LossConfig::validate() const {
  if (lambda < 0.0 || beta < 0.0) throw ContractError("loss weights must be non-negative");
  if (variant == CompVariant::soft && soft_impl == SoftImpl::one_vs_all_logistic && sample_negatives &&
      !(neg_sample_ratio > 0.0)) {
    throw ContractError("neg_sample_ratio must be positive when negative sampling is enabled");
  }
}

BatchDerivations lookup_derivations(const CategoryTable& table, std::span<const std::int64_t> categories) {
  BatchDerivations out;
  out.reserve(categories.size());
  for (std::int64_t cat : categories) out.push_back(table.at(cat));
  return out;
}

std::vector<Tensor> EtaSet::parameters() const {
  std::vector<Tensor> out;
  out.push_back(final_eta.eta);
  for (const auto& [layer, eta] : taps) out.push_back(eta.eta);
  return out;
}

EtaSet init_eta_set(std::int64_t k, const EncoderParams& theta, const LossConfig& cfg, Rng& rng) {
  EtaSet etas;
  etas.final_eta = init_attribute_embedding(k, theta.embedding_dim(), rng);
  for (int layer : cfg.deep_layers) {
    if (layer < 0 || layer >= theta.hidden_count()) {
      throw IndexError("deep layer " + std::to_string(layer) + " outside hidden range [0," +
                       std::to_string(theta.hidden_count()) + ")");
    }
    etas.taps.emplace(layer, init_attribute_embedding(k, theta.hidden_dim(layer), rng));
  }
  return etas;
}

Tensor derivation_sums(const AttributeEmbedding& eta, const BatchDerivations& derivs) {
  const std::int64_t b = static_cast<std::int64_t>(derivs.size());
  const std::int64_t k = eta.count();
  Tensor indicator = Tensor::zeros({b, k});
  auto im = indicator.matrix();
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t a : derivs[static_cast<std::size_t>(i)].attrs) {
      if (a < 0 || a >= k) {
        throw IndexError("derivation attribute " + std::to_string(a) + " out of range [0," + std::to_string(k) + ")");
      }
      im(i, a) = 1.0;
    }
  }
  return matmul(indicator, eta.eta);
}

SoftSupervision build_soft_supervision(const BatchDerivations& derivs, std::int64_t k, const LossConfig& cfg,
                                       Rng* rng) {
  const std::int64_t b = static_cast<std::int64_t>(derivs.size());
  SoftSupervision sup;
  sup.mask = Tensor::zeros({b, k});
  sup.positive = Tensor::zeros({b, k});
  auto mask = sup.mask.matrix();
  auto pos = sup.positive.matrix();

  for (std::int64_t i = 0; i < b; ++i) {
    const Derivation& d = derivs[static_cast<std::size_t>(i)];
    for (std::int64_t a : d.attrs) {
      mask(i, a) = 1.0;
      pos(i, a) = 1.0;
    }
    const std::int64_t n_pos = d.size();
    const std::int64_t n_avail = k - n_pos;
    if (!cfg.sample_negatives) {
      for (std::int64_t a = 0; a < k; ++a) {
        if (!d.contains(a)) mask(i, a) = 1.0;
      }
      continue;
    }
    if (n_pos == 0) continue;  // nothing to balance against
    if (n_avail == 0) {
      throw ContractError("example " + std::to_string(i) +
                          " is labeled with every attribute; no negatives available to sample");
    }
    if (rng == nullptr) throw ContractError("negative sampling requires an RNG handle");
    const auto want = static_cast<std::int64_t>(std::llround(cfg.neg_sample_ratio * static_cast<double>(n_pos)));
    const std::int64_t n_neg = std::min(std::max<std::int64_t>(want, 0), n_avail);
    std::vector<std::int64_t> complement;
    complement.reserve(static_cast<std::size_t>(n_avail));
    for (std::int64_t a = 0; a < k; ++a) {
      if (!d.contains(a)) complement.push_back(a);
    }
    for (std::size_t p : rng->sample_without_replacement(complement.size(), static_cast<std::size_t>(n_neg))) {
      mask(i, complement[p]) = 1.0;
    }
  }
  sup.count = sup.mask.flat().sum();
  return sup;
}

Tensor hard_comp_from_embeddings(const Tensor& embeddings, const AttributeEmbedding& eta,
                                 const BatchDerivations& derivs) {
  if (embeddings.dim(0) != static_cast<std::int64_t>(derivs.size())) {
    throw DimensionError("hard comp: " + std::to_string(derivs.size()) + " derivations for " +
                         std::to_string(embeddings.dim(0)) + " embeddings");
  }
  for (std::size_t i = 0; i < derivs.size(); ++i) {
    if (derivs[i].empty()) {
      throw ContractError("hard compositionality constraint requires a non-empty derivation (example " +
                          std::to_string(i) + ")");
    }
  }
  Tensor targets = derivation_sums(eta, derivs);
  Tensor cos = row_sums(mul(l2_normalize_rows(embeddings), l2_normalize_rows(targets)));
  return mean(sub(Tensor::ones({cos.dim(0)}), cos));
}

Tensor soft_comp_from_scores(const Tensor& scores, const BatchDerivations& derivs, SoftImpl impl,
                             const SoftSupervision* supervision) {
  const std::int64_t b = scores.dim(0);
  const std::int64_t k = scores.dim(1);
  if (b != static_cast<std::int64_t>(derivs.size())) {
    throw DimensionError("soft comp: " + std::to_string(derivs.size()) + " derivations for " + std::to_string(b) +
                         " score rows");
  }
  if (impl == SoftImpl::raw_margin) {
    // +1 on absent attributes, -1 on present ones.
    Tensor signs = Tensor::ones({b, k});
    auto sm = signs.matrix();
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t a : derivs[static_cast<std::size_t>(i)].attrs) sm(i, a) = -1.0;
    }
    return scale(sum(mul(scores, signs)), 1.0 / static_cast<double>(b));
  }
  if (supervision == nullptr) throw ContractError("one-versus-all loss requires supervision masks");
  if (supervision->count == 0.0) return Tensor::scalar(0.0);
  // Binary cross-entropy on logit s with target t: softplus(s) - t*s.
  Tensor bce = sub(sum(mul(supervision->mask, softplus(scores))), sum(mul(supervision->positive, scores)));
  return scale(bce, 1.0 / supervision->count);
}

Tensor hard_comp_loss(const EncoderParams& theta, const AttributeEmbedding& eta, const Tensor& batch,
                      const BatchDerivations& derivs) {
  return hard_comp_from_embeddings(encode_batch(theta, batch).embedding, eta, derivs);
}

Tensor soft_comp_loss(const EncoderParams& theta, const AttributeEmbedding& eta, const Tensor& batch,
                      const BatchDerivations& derivs, const LossConfig& cfg, Rng* rng) {
  Tensor scores = matmul(encode_batch(theta, batch).embedding, transpose(eta.eta));
  if (cfg.soft_impl == SoftImpl::raw_margin) {
    return soft_comp_from_scores(scores, derivs, cfg.soft_impl, nullptr);
  }
  SoftSupervision sup = build_soft_supervision(derivs, eta.count(), cfg, rng);
  return soft_comp_from_scores(scores, derivs, cfg.soft_impl, &sup);
}

Tensor orthogonality_penalty(const AttributeEmbedding& eta) {
  Tensor gram = matmul(eta.eta, transpose(eta.eta));
  return mean(abs(sub(gram, Tensor::identity(eta.count()))));
}

LossBreakdown total_loss(const EncoderParams& theta, const EtaSet& etas, const ClassifierHead& head,
                         const Tensor& batch, std::span<const std::int64_t> labels,
                         const BatchDerivations& derivs, const LossConfig& cfg, Rng* rng) {
  cfg.validate();
  EncodeResult enc = encode_batch(theta, batch);
  LossBreakdown out;

  Tensor cls = softmax_cross_entropy_rows(classify_batch(head, enc.embedding), labels);
  out.cls = cls.item();
  out.total = cls;
  if (cfg.variant == CompVariant::none) return out;

  // Regularized layers: every tapped hidden layer plus the final embedding.
  std::vector<std::pair<Tensor, const AttributeEmbedding*>> layers;
  for (int layer : cfg.deep_layers) {
    auto tap = enc.taps.find(layer);
    if (tap == enc.taps.end()) {
      throw ContractError("deep layer " + std::to_string(layer) + " is not tapped by the encoder");
    }
    auto eta = etas.taps.find(layer);
    if (eta == etas.taps.end()) {
      throw ContractError("no attribute embedding configured for deep layer " + std::to_string(layer));
    }
    layers.emplace_back(tap->second, &eta->second);
  }
  layers.emplace_back(enc.embedding, &etas.final_eta);

  std::optional<SoftSupervision> sup;
  if (cfg.variant == CompVariant::soft && cfg.soft_impl == SoftImpl::one_vs_all_logistic) {
    // One draw per batch, shared across layers.
    sup = build_soft_supervision(derivs, etas.final_eta.count(), cfg, rng);
  }

  for (const auto& [activations, eta] : layers) {
    Tensor comp;
    if (cfg.variant == CompVariant::hard) {
      comp = hard_comp_from_embeddings(activations, *eta, derivs);
    } else {
      Tensor scores = matmul(activations, transpose(eta->eta));
      comp = soft_comp_from_scores(scores, derivs, cfg.soft_impl, sup ? &*sup : nullptr);
    }
    out.comp += comp.item();
    out.total = add(out.total, scale(comp, cfg.lambda));
    if (cfg.beta > 0.0) {
      Tensor orth = orthogonality_penalty(*eta);
      out.orth += orth.item();
      out.total = add(out.total, scale(orth, cfg.beta));
    }
  }
  return out;
}

std::vector<double> residual_diagnostic(const EncoderParams& theta, const AttributeEmbedding& eta,
                                        const Tensor& batch, const BatchDerivations& derivs) {
  Tensor embeddings = encode_batch(theta, batch).embedding;
  Tensor targets = derivation_sums(eta, derivs);
  auto fm = embeddings.matrix();
  auto tm = targets.matrix();
  std::vector<double> out(derivs.size());
  for (std::int64_t i = 0; i < fm.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = (fm.row(i) - tm.row(i)).norm();
  }
  return out;
}

}  // namespace comprepr
