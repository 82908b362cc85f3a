#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "comprepr/model.hpp"

using namespace comprepr;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  auto f = t.flat();
  for (std::int64_t i = 0; i < f.size(); ++i) f[i] = rng.normal();
  return t;
}

EncoderParams small_encoder(Rng& rng) {
  const std::int64_t dims[] = {5, 6, 6, 4};
  return init_encoder(dims, rng);
}

}  // namespace

TEST_CASE("encode with zero parameters gives the zero embedding") {
  EncoderParams theta;
  theta.layers.push_back(DenseLayer{Tensor::zeros({6, 5}, true), Tensor::zeros({6}, true)});
  theta.layers.push_back(DenseLayer{Tensor::zeros({4, 6}, true), Tensor::zeros({4}, true)});
  Rng rng(1);
  Tensor x = random_tensor({5}, rng);
  EncodeResult out = encode(theta, x);
  CHECK(out.embedding.flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single identity layer reproduces the input") {
  EncoderParams theta;
  Tensor param = Tensor::from_values({4, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1},
                                     true);
  theta.layers.push_back(DenseLayer{param, Tensor::zeros({4}, true)});
  Rng rng(2);
  Tensor x = random_tensor({4}, rng);
  CHECK(encode(theta, x).embedding.flat().isApprox(x.flat()));
}

TEST_CASE("encode rejects wrong input dimension") {
  Rng rng(3);
  EncoderParams theta = small_encoder(rng);
  CHECK_THROWS_AS(encode(theta, Tensor::zeros({7})), DimensionError);
  CHECK_THROWS_AS(encode_batch(theta, Tensor::zeros({2, 7})), DimensionError);
}

TEST_CASE("encoder gradient of |f(x)|^2 matches finite differences") {
  Rng rng(5);
  EncoderParams theta = small_encoder(rng);
  // Small positive biases keep every unit away from the relu kink, where the
  // subgradient convention and finite differences legitimately disagree.
  for (DenseLayer& l : theta.layers) l.bias.flat().setConstant(0.05);
  Tensor x = random_tensor({5}, rng);
  std::vector<Tensor> params;
  for (const DenseLayer& l : theta.layers) {
    params.push_back(l.weight);
    params.push_back(l.bias);
  }
  const double err = grad_check(
      [&] {
        Tensor f = encode(theta, x).embedding;
        return sum(mul(f, f));
      },
      params, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("encode and encode_batch agree row by row") {
  Rng rng(7);
  EncoderParams theta = small_encoder(rng);
  theta.tap_layers = {0, 1};
  Tensor batch = random_tensor({3, 5}, rng);
  EncodeResult batched = encode_batch(theta, batch);
  for (std::int64_t i = 0; i < 3; ++i) {
    Tensor x = Tensor::zeros({5});
    x.flat() = batch.matrix().row(i);
    EncodeResult single = encode(theta, x);
    CHECK(Eigen::VectorXd(single.embedding.flat())
              .isApprox(Eigen::VectorXd(batched.embedding.matrix().row(i).transpose()), 1e-12));
    for (const auto& [layer, tap] : single.taps) {
      CHECK(Eigen::VectorXd(tap.flat())
                .isApprox(Eigen::VectorXd(batched.taps.at(layer).matrix().row(i).transpose()), 1e-12));
    }
  }
}

TEST_CASE("encode is deterministic") {
  Rng rng(11);
  EncoderParams theta = small_encoder(rng);
  Tensor x = random_tensor({5}, rng);
  Eigen::VectorXd a = encode(theta, x).embedding.flat();
  Eigen::VectorXd b = encode(theta, x).embedding.flat();
  CHECK(a == b);
}

TEST_CASE("taps expose exactly the configured hidden layers") {
  Rng rng(13);
  EncoderParams theta = small_encoder(rng);
  theta.tap_layers = {1};
  Tensor x = random_tensor({5}, rng);
  EncodeResult out = encode(theta, x);
  CHECK(out.taps.size() == 1);
  CHECK(out.taps.count(1) == 1);
  theta.tap_layers = {5};
  CHECK_THROWS_AS(theta.validate(), IndexError);
}

TEST_CASE("embed_derivation basics") {
  AttributeEmbedding eta{Tensor::from_values({2, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0}, true)};

  Tensor single = embed_derivation(eta, Derivation::of({0}));
  CHECK(single.flat()[0] == 1.0);
  CHECK(single.flat()[1] == 2.0);

  Tensor empty = embed_derivation(eta, Derivation{});
  CHECK(empty.flat().cwiseAbs().maxCoeff() == 0.0);

  AttributeEmbedding basis{Tensor::from_values({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0}, true)};
  Tensor both = embed_derivation(basis, Derivation::of({0, 1}));
  CHECK(both.flat()[0] == 1.0);
  CHECK(both.flat()[1] == 1.0);

  CHECK_THROWS_AS(embed_derivation(eta, Derivation::of({2})), IndexError);
}

TEST_CASE("embed_derivation is additive over disjoint derivations") {
  Rng rng(17);
  AttributeEmbedding eta{random_tensor({6, 3}, rng, true)};
  Derivation d1 = Derivation::of({0, 2});
  Derivation d2 = Derivation::of({3, 5});
  Derivation both = Derivation::of({0, 2, 3, 5});
  Eigen::VectorXd sum_separate =
      Eigen::VectorXd(embed_derivation(eta, d1).flat()) + Eigen::VectorXd(embed_derivation(eta, d2).flat());
  // Equality up to the last ulp: the two sides associate the additions
  // differently, which IEEE addition does not make interchangeable.
  CHECK(Eigen::VectorXd(embed_derivation(eta, both).flat()).isApprox(sum_separate, 1e-15));
}

TEST_CASE("attribute_scores identity, zero and loop oracle") {
  Rng rng(19);
  std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  AttributeEmbedding identity{Tensor::from_values({3, 3}, eye, true)};
  Tensor f = Tensor::from_values({3}, std::vector<double>{1.0, 2.0, 3.0});
  CHECK(attribute_scores(identity, f).flat().isApprox(f.flat()));

  CHECK(attribute_scores(identity, Tensor::zeros({3})).flat().cwiseAbs().maxCoeff() == 0.0);

  AttributeEmbedding eta{random_tensor({5, 4}, rng, true)};
  Tensor g = random_tensor({4}, rng);
  Tensor scores = attribute_scores(eta, g);
  for (std::int64_t a = 0; a < 5; ++a) {
    double expected = 0.0;
    for (std::int64_t j = 0; j < 4; ++j) expected += eta.eta.matrix()(a, j) * g.flat()[j];
    CHECK(scores.flat()[a] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("attribute_scores of a derivation sum is the Gram row sum") {
  Rng rng(23);
  AttributeEmbedding eta{random_tensor({6, 4}, rng, true)};
  Derivation d = Derivation::of({1, 3, 4});
  Tensor scores = attribute_scores(eta, embed_derivation(eta, d));
  auto em = eta.eta.matrix();
  for (std::int64_t a = 0; a < 6; ++a) {
    double expected = 0.0;
    for (std::int64_t b : d.attrs) expected += em.row(a).dot(em.row(b));
    CHECK(scores.flat()[a] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("cosine head gives scale on its own weight vector and stays bounded") {
  Rng rng(29);
  ClassifierHead head = init_head(HeadKind::cosine, 4, 3, rng, 10.0);
  Tensor f = Tensor::zeros({3});
  f.flat() = head.weights.matrix().row(2);
  Tensor logits = classify(head, f);
  CHECK(logits.flat()[2] == doctest::Approx(10.0).epsilon(1e-12));

  for (int i = 0; i < 50; ++i) {
    Tensor x = random_tensor({3}, rng);
    CHECK(classify(head, x).flat().cwiseAbs().maxCoeff() <= 10.0 + 1e-9);
  }
}

TEST_CASE("linear head with identity weights passes features through") {
  ClassifierHead head;
  head.kind = HeadKind::linear;
  head.weights = Tensor::from_values({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1}, true);
  head.bias = Tensor::zeros({3}, true);
  Tensor f = Tensor::from_values({3}, std::vector<double>{0.5, -1.0, 2.0});
  CHECK(classify(head, f).flat().isApprox(f.flat()));
}

TEST_CASE("cosine head logits are invariant to positive feature rescaling") {
  Rng rng(31);
  ClassifierHead head = init_head(HeadKind::cosine, 5, 4, rng);
  Tensor f = random_tensor({4}, rng);
  Eigen::VectorXd base = classify(head, f).flat();
  for (double c : {0.01, 3.7, 250.0}) {
    Tensor scaled = Tensor::zeros({4});
    scaled.flat() = c * Eigen::VectorXd(f.flat());
    CHECK(Eigen::VectorXd(classify(head, scaled).flat()).isApprox(base, 1e-9));
  }
}

TEST_CASE("cosine head rejects degenerate weight rows") {
  ClassifierHead head;
  head.kind = HeadKind::cosine;
  head.weights = Tensor::zeros({2, 3}, true);
  head.scale = 10.0;
  CHECK_THROWS_AS(classify(head, Tensor::ones({3})), DegenerateVectorError);
}

TEST_CASE("classify_batch matches classify per row for both head kinds") {
  Rng rng(37);
  for (HeadKind kind : {HeadKind::linear, HeadKind::cosine}) {
    ClassifierHead head = init_head(kind, 4, 3, rng);
    Tensor batch = random_tensor({5, 3}, rng);
    Tensor batched = classify_batch(head, batch);
    for (std::int64_t i = 0; i < 5; ++i) {
      Tensor x = Tensor::zeros({3});
      x.flat() = batch.matrix().row(i);
      CHECK(Eigen::VectorXd(classify(head, x).flat())
                .isApprox(Eigen::VectorXd(batched.matrix().row(i).transpose()), 1e-12));
    }
  }
}

TEST_CASE("initialization shapes and determinism") {
  Rng rng_a(101), rng_b(101);
  const std::int64_t dims[] = {8, 16, 16, 4};
  EncoderParams a = init_encoder(dims, rng_a);
  EncoderParams b = init_encoder(dims, rng_b);
  CHECK(a.layers.size() == 3);
  CHECK(a.input_dim() == 8);
  CHECK(a.embedding_dim() == 4);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(Eigen::VectorXd(a.layers[i].weight.flat()) == Eigen::VectorXd(b.layers[i].weight.flat()));
    CHECK(a.layers[i].bias.flat().cwiseAbs().maxCoeff() == 0.0);
  }

  AttributeEmbedding eta = init_attribute_embedding(10, 16, rng_a);
  CHECK(eta.count() == 10);
  CHECK(eta.dim() == 16);
  // Entry std 1/sqrt(m) makes the expected squared row norm 1.
  const double mean_sq_row = eta.eta.matrix().rowwise().squaredNorm().mean();
  CHECK(mean_sq_row > 0.4);
  CHECK(mean_sq_row < 2.5);
}
