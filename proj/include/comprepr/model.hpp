#pragma once

#include <map>
#include <span>
#include <vector>

#include "comprepr/data.hpp"
#include "comprepr/rng.hpp"
#include "comprepr/tensor.hpp"

namespace comprepr {

struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
};

/// MLP encoder: relu between hidden layers, final layer linear so the
/// embedding space is unconstrained in sign.
struct EncoderParams {
  std::vector<DenseLayer> layers;
  std::vector<int> tap_layers;  // hidden-layer indices exposed for deep regularization

  std::int64_t input_dim() const { return layers.front().weight.dim(1); }
  std::int64_t embedding_dim() const { return layers.back().weight.dim(0); }
  int hidden_count() const { return static_cast<int>(layers.size()) - 1; }
  std::int64_t hidden_dim(int layer) const { return layers[static_cast<std::size_t>(layer)].weight.dim(0); }
  void validate() const;
};

/// dims = {d_in, h1, ..., m}. Weights ~ Uniform(+-sqrt(6/(in+out))), biases 0.
EncoderParams init_encoder(std::span<const std::int64_t> dims, Rng& rng);

/// One embedding vector per attribute, as the rows of a [k x m] matrix.
struct AttributeEmbedding {
  Tensor eta;

  std::int64_t count() const { return eta.dim(0); }
  std::int64_t dim() const { return eta.dim(1); }
};

/// Rows ~ Normal(0, 1/sqrt(m)) entrywise, so expected row norm is 1.
AttributeEmbedding init_attribute_embedding(std::int64_t k, std::int64_t m, Rng& rng);

struct EncodeResult {
  Tensor embedding;            // [m] or [B x m]
  std::map<int, Tensor> taps;  // hidden-layer index -> post-relu activation
};

EncodeResult encode(const EncoderParams& theta, const Tensor& x);        // [d_in] -> [m]
EncodeResult encode_batch(const EncoderParams& theta, const Tensor& x);  // [B x d_in] -> [B x m]

/// Sum of the attribute rows selected by a derivation; empty derivations
/// yield the zero vector.
Tensor embed_derivation(const AttributeEmbedding& eta, const Derivation& d);

/// Dot product of every attribute embedding with `f`: one score per primitive.
Tensor attribute_scores(const AttributeEmbedding& eta, const Tensor& f);

enum class HeadKind { linear, cosine };

struct ClassifierHead {
  HeadKind kind = HeadKind::cosine;
  Tensor weights;      // [C x m]
  Tensor bias;         // [C], linear only
  double scale = 10.0;  // cosine only

  std::int64_t class_count() const { return weights.dim(0); }
};

ClassifierHead init_head(HeadKind kind, std::int64_t classes, std::int64_t m, Rng& rng, double scale = 10.0);

/// linear: W f + b. cosine: scale * cos(w_c, f) per class.
Tensor classify(const ClassifierHead& head, const Tensor& f);        // [m] -> [C]
Tensor classify_batch(const ClassifierHead& head, const Tensor& f);  // [B x m] -> [B x C]

}  // namespace comprepr
