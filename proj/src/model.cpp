#include "comprepr/model.hpp"

#include <algorithm>
#include <cmath>

namespace comprepr {

void EncoderParams::validate() const {
  if (layers.empty()) throw ContractError("encoder has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const DenseLayer& l = layers[i];
    if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.weight.dim(0) != l.bias.dim(0)) {
      throw DimensionError("encoder layer " + std::to_string(i) + " has inconsistent weight/bias shapes");
    }
    if (i > 0 && layers[i - 1].weight.dim(0) != l.weight.dim(1)) {
      throw DimensionError("encoder layers " + std::to_string(i - 1) + " and " + std::to_string(i) +
                           " do not chain: " + shape_to_string(layers[i - 1].weight.shape()) + " then " +
                           shape_to_string(l.weight.shape()));
    }
  }
  for (int t : tap_layers) {
    if (t < 0 || t >= hidden_count()) {
      throw IndexError("tap layer " + std::to_string(t) + " outside hidden range [0," +
                       std::to_string(hidden_count()) + ")");
    }
  }
}

EncoderParams init_encoder(std::span<const std::int64_t> dims, Rng& rng) {
  if (dims.size() < 2) throw ContractError("encoder needs at least input and output dimensions");
  EncoderParams theta;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::int64_t in = dims[i];
    const std::int64_t out = dims[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    Tensor w = Tensor::zeros({out, in}, true);
    auto wf = w.flat();
    for (std::int64_t j = 0; j < wf.size(); ++j) wf[j] = rng.uniform(-bound, bound);
    theta.layers.push_back(DenseLayer{std::move(w), Tensor::zeros({out}, true)});
  }
  theta.validate();
  return theta;
}

AttributeEmbedding init_attribute_embedding(std::int64_t k, std::int64_t m, Rng& rng) {
  if (k < 1 || m < 1) throw ContractError("attribute embedding needs positive k and m");
  Tensor eta = Tensor::zeros({k, m}, true);
  const double sigma = 1.0 / std::sqrt(static_cast<double>(m));
  auto ef = eta.flat();
  for (std::int64_t i = 0; i < ef.size(); ++i) ef[i] = sigma * rng.normal();
  return AttributeEmbedding{std::move(eta)};
}

namespace {

template <class Linear, class AddBias>
EncodeResult encode_impl(const EncoderParams& theta, const Tensor& x, Linear linear, AddBias add_bias) {
  EncodeResult result;
  Tensor h = x;
  const int last = static_cast<int>(theta.layers.size()) - 1;
  for (int i = 0; i <= last; ++i) {
    const DenseLayer& layer = theta.layers[static_cast<std::size_t>(i)];
    h = add_bias(linear(layer.weight, h), layer.bias);
    if (i < last) {
      h = relu(h);
      if (std::find(theta.tap_layers.begin(), theta.tap_layers.end(), i) != theta.tap_layers.end()) {
        result.taps.emplace(i, h);
      }
    }
  }
  result.embedding = h;
  return result;
}

}  // namespace

EncodeResult encode(const EncoderParams& theta, const Tensor& x) {
  if (x.rank() != 1 || x.dim(0) != theta.input_dim()) {
    throw DimensionError("encode: input shape " + shape_to_string(x.shape()) + " does not match encoder input " +
                         std::to_string(theta.input_dim()));
  }
  return encode_impl(
      theta, x, [](const Tensor& w, const Tensor& v) { return matvec(w, v); },
      [](const Tensor& v, const Tensor& b) { return add(v, b); });
}

EncodeResult encode_batch(const EncoderParams& theta, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != theta.input_dim()) {
    throw DimensionError("encode_batch: input shape " + shape_to_string(x.shape()) +
                         " does not match encoder input " + std::to_string(theta.input_dim()));
  }
  return encode_impl(
      theta, x, [](const Tensor& w, const Tensor& m) { return matmul(m, transpose(w)); },
      [](const Tensor& m, const Tensor& b) { return add_rowwise(m, b); });
}

Tensor embed_derivation(const AttributeEmbedding& eta, const Derivation& d) {
  if (d.empty()) return Tensor::zeros({eta.dim()});
  return select_rows_sum(eta.eta, d.attrs);
}

Tensor attribute_scores(const AttributeEmbedding& eta, const Tensor& f) {
  return matvec(eta.eta, f);
}

ClassifierHead init_head(HeadKind kind, std::int64_t classes, std::int64_t m, Rng& rng, double scale) {
  if (classes < 1) throw ContractError("classifier head needs at least one class");
  if (scale <= 0.0) throw ContractError("cosine scale must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(classes + m));
  ClassifierHead head;
  head.kind = kind;
  head.scale = scale;
  head.weights = Tensor::zeros({classes, m}, true);
  auto wf = head.weights.flat();
  for (std::int64_t i = 0; i < wf.size(); ++i) wf[i] = rng.uniform(-bound, bound);
  if (kind == HeadKind::linear) head.bias = Tensor::zeros({classes}, true);
  return head;
}

Tensor classify(const ClassifierHead& head, const Tensor& f) {
  if (f.rank() != 1 || f.dim(0) != head.weights.dim(1)) {
    throw DimensionError("classify: feature shape " + shape_to_string(f.shape()) + " does not match head " +
                         shape_to_string(head.weights.shape()));
  }
  if (head.kind == HeadKind::linear) return add(matvec(head.weights, f), head.bias);
  return scale(matvec(l2_normalize_rows(head.weights), l2_normalize(f)), head.scale);
}

Tensor classify_batch(const ClassifierHead& head, const Tensor& f) {
  if (f.rank() != 2 || f.dim(1) != head.weights.dim(1)) {
    throw DimensionError("classify_batch: feature shape " + shape_to_string(f.shape()) + " does not match head " +
                         shape_to_string(head.weights.shape()));
  }
  if (head.kind == HeadKind::linear) return add_rowwise(matmul(f, transpose(head.weights)), head.bias);
  return scale(matmul(l2_normalize_rows(f), transpose(l2_normalize_rows(head.weights))), head.scale);
}

}  // namespace comprepr
