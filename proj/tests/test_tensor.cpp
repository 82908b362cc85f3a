#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "comprepr/rng.hpp"
#include "comprepr/tensor.hpp"

using namespace comprepr;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  auto f = t.flat();
  for (std::int64_t i = 0; i < f.size(); ++i) f[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("matmul identity and hand-computed product") {
  Tensor m = Tensor::from_values({2, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  Tensor out = matmul(Tensor::identity(2), m);
  CHECK(out.flat().isApprox(m.flat()));

  Tensor a = Tensor::from_values({1, 2}, std::vector<double>{1.0, 2.0});
  Tensor b = Tensor::from_values({2, 1}, std::vector<double>{3.0, 4.0});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul rejects mismatched inner dimensions with both shapes named") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("[3,4]") != std::string::npos);
    CHECK(what.find("[5,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match central finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  std::vector<Tensor> params{a, b};
  const double err = grad_check([&] { return sum(matmul(a, b)); }, params, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise suite forward values") {
  Tensor x = Tensor::from_values({3}, std::vector<double>{-1.0, 0.0, 2.0});
  Tensor r = relu(x);
  CHECK(r.flat()[0] == 0.0);
  CHECK(r.flat()[1] == 0.0);
  CHECK(r.flat()[2] == 2.0);

  CHECK(sum(Tensor::zeros({5})).item() == 0.0);
  CHECK(mean(Tensor::from_values({4}, std::vector<double>{1, 2, 3, 6})).item() == doctest::Approx(3.0));
  CHECK(sub(Tensor::scalar(5.0), Tensor::scalar(3.0)).item() == 2.0);
  CHECK(mul(Tensor::scalar(5.0), Tensor::scalar(3.0)).item() == 15.0);
  CHECK(scale(Tensor::scalar(5.0), -2.0).item() == -10.0);
  CHECK(add(Tensor::scalar(5.0), Tensor::scalar(3.0)).item() == 8.0);
}

TEST_CASE("abs gradient signs at +-3 match finite differences") {
  for (double v : {3.0, -3.0}) {
    Tensor x = Tensor::from_values({1}, std::vector<double>{v}, true);
    Tensor loss = sum(abs(x));
    backward(loss);
    CHECK(x.grad()[0] == (v > 0 ? 1.0 : -1.0));
    std::vector<Tensor> params{x};
    CHECK(grad_check([&] { return sum(abs(x)); }, params, 1e-5) < 1e-9);
  }
}

TEST_CASE("elementwise shape mismatch raises dimension error") {
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  CHECK_THROWS_AS(mul(Tensor::zeros({2, 2}), Tensor::zeros({4})), DimensionError);
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(13);
  Tensor x = random_tensor({6}, rng);
  Tensor y = random_tensor({6}, rng);
  std::vector<Tensor> params{x, y};
  const double err = grad_check(
      [&] {
        Tensor z = add(mul(relu(x), y), scale(softplus(sub(x, y)), 0.7));
        return add(sum(z), mean(abs(x)));
      },
      params, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("l2_normalize basics") {
  Tensor v = Tensor::from_values({2}, std::vector<double>{3.0, 4.0});
  Tensor n = l2_normalize(v);
  CHECK(n.flat()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n.flat()[1] == doctest::Approx(0.8).epsilon(1e-15));

  Tensor unit = Tensor::from_values({2}, std::vector<double>{0.0, 1.0});
  CHECK(l2_normalize(unit).flat().isApprox(unit.flat()));

  CHECK_THROWS_AS(l2_normalize(Tensor::zeros({3})), DegenerateVectorError);
}

TEST_CASE("l2_normalize gradient vs finite differences") {
  Rng rng(17);
  Tensor v = random_tensor({5}, rng);
  Tensor w = random_tensor({5}, rng, false);
  std::vector<Tensor> params{v};
  const double err = grad_check([&] { return dot(l2_normalize(v), w); }, params, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("cosine_similarity identities and brute-force agreement") {
  Rng rng(23);
  Tensor v = random_tensor({7}, rng, false);
  CHECK(cosine_similarity(v, v).item() == doctest::Approx(1.0).epsilon(1e-12));

  Tensor e0 = Tensor::from_values({2}, std::vector<double>{1.0, 0.0});
  Tensor e1 = Tensor::from_values({2}, std::vector<double>{0.0, 1.0});
  CHECK(cosine_similarity(e0, e1).item() == doctest::Approx(0.0).epsilon(1e-15));

  Tensor a = random_tensor({9}, rng, false);
  Tensor b = random_tensor({9}, rng, false);
  double dot_ab = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < 9; ++i) {
    dot_ab += a.flat()[i] * b.flat()[i];
    na += a.flat()[i] * a.flat()[i];
    nb += b.flat()[i] * b.flat()[i];
  }
  CHECK(cosine_similarity(a, b).item() == doctest::Approx(dot_ab / std::sqrt(na * nb)).epsilon(1e-12));
}

TEST_CASE("cosine_similarity stays within [-1, 1] on random pairs") {
  Rng rng(29);
  for (int i = 0; i < 200; ++i) {
    Tensor a = random_tensor({4}, rng, false);
    Tensor b = random_tensor({4}, rng, false);
    const double c = cosine_similarity(a, b).item();
    CHECK(c >= -1.0 - 1e-12);
    CHECK(c <= 1.0 + 1e-12);
  }
}

TEST_CASE("softmax_cross_entropy values and gradient") {
  Tensor uniform = Tensor::zeros({4});
  CHECK(softmax_cross_entropy(uniform, 2).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor saturated = Tensor::from_values({3}, std::vector<double>{50.0, 0.0, 0.0});
  CHECK(softmax_cross_entropy(saturated, 0).item() < 1e-12);

  CHECK_THROWS_AS(softmax_cross_entropy(uniform, 4), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(uniform, -1), IndexError);

  // Analytic gradient is softmax - onehot; cross-checked against finite differences.
  Rng rng(31);
  Tensor logits = random_tensor({5}, rng);
  Tensor loss = softmax_cross_entropy(logits, 3);
  backward(loss);
  Eigen::VectorXd probs = (logits.flat().array() - logits.flat().maxCoeff()).exp();
  probs /= probs.sum();
  probs[3] -= 1.0;
  CHECK(Eigen::VectorXd(logits.grad()).isApprox(probs, 1e-12));

  std::vector<Tensor> params{logits};
  CHECK(grad_check([&] { return softmax_cross_entropy(logits, 3); }, params, 1e-5) < 1e-6);
}

TEST_CASE("softmax_cross_entropy_rows equals mean of per-row losses") {
  Rng rng(37);
  Tensor logits = random_tensor({4, 6}, rng);
  const std::vector<std::int64_t> labels{1, 0, 5, 2};
  Tensor batched = softmax_cross_entropy_rows(logits, labels);

  double expected = 0.0;
  for (int i = 0; i < 4; ++i) {
    Tensor row = Tensor::zeros({6});
    row.flat() = logits.matrix().row(i);
    expected += softmax_cross_entropy(row, labels[static_cast<std::size_t>(i)]).item();
  }
  CHECK(batched.item() == doctest::Approx(expected / 4.0).epsilon(1e-12));

  std::vector<Tensor> params{logits};
  CHECK(grad_check([&] { return softmax_cross_entropy_rows(logits, labels); }, params, 1e-5) < 1e-6);
}

TEST_CASE("backward on sum and mean gives constant leaf gradients") {
  Tensor x = Tensor::zeros({3}, true);
  backward(sum(x));
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  Tensor y = Tensor::zeros({4}, true);
  backward(mean(y));
  for (int i = 0; i < 4; ++i) CHECK(y.grad()[i] == 0.25);
}

TEST_CASE("backward requires a scalar root") {
  Tensor x = Tensor::zeros({3}, true);
  CHECK_THROWS_AS(backward(relu(x)), ContractError);
}

TEST_CASE("repeated backward accumulates additively") {
  Rng rng(41);
  Tensor x = random_tensor({5}, rng);
  Tensor loss = mean(mul(x, x));
  backward(loss);
  Eigen::VectorXd once = x.grad();
  backward(loss);
  CHECK(Eigen::VectorXd(x.grad()).isApprox(2.0 * once, 1e-15));
}

TEST_CASE("backward is linear in the root") {
  Rng rng(43);
  const double alpha = 1.7;
  Tensor x = random_tensor({6}, rng);

  auto l1 = [&] { return sum(mul(x, x)); };
  auto l2 = [&] { return mean(softplus(x)); };

  x.zero_grad();
  backward(add(scale(l1(), alpha), l2()));
  Eigen::VectorXd combined = x.grad();

  x.zero_grad();
  backward(l1());
  Eigen::VectorXd g1 = x.grad();
  x.zero_grad();
  backward(l2());
  Eigen::VectorXd g2 = x.grad();

  CHECK((combined - (alpha * g1 + g2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward and backward are bitwise deterministic") {
  auto run = [] {
    Rng rng(47);
    Tensor x = random_tensor({8}, rng);
    Tensor w = random_tensor({3, 8}, rng);
    Tensor loss = mean(softplus(matvec(w, l2_normalize(x))));
    backward(loss);
    std::vector<double> out;
    for (std::int64_t i = 0; i < x.size(); ++i) out.push_back(x.grad()[i]);
    for (std::int64_t i = 0; i < w.size(); ++i) out.push_back(w.grad()[i]);
    out.push_back(loss.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("shape-aware op gradients match finite differences") {
  Rng rng(53);
  Tensor m = random_tensor({4, 3}, rng);
  Tensor v = random_tensor({3}, rng);
  Tensor b = random_tensor({4}, rng);
  std::vector<Tensor> params{m, v, b};
  const std::vector<std::int64_t> rows{0, 2};
  const std::vector<std::int64_t> idx{1, 1, 3};
  const double err = grad_check(
      [&] {
        Tensor t1 = add(matvec(m, v), b);                 // [4]
        Tensor t2 = gather(t1, idx);                      // [3]
        Tensor t3 = select_rows_sum(transpose(m), rows);  // [4]
        Tensor t4 = row_sums(add_rowwise(m, v));          // [4]
        Tensor t5 = row_sums(l2_normalize_rows(m));       // [4]
        return add(add(dot(t3, t4), sum(t2)), sum(t5));
      },
      params, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("gather and select_rows_sum validate indices") {
  Tensor v = Tensor::zeros({3});
  const std::vector<std::int64_t> bad{3};
  CHECK_THROWS_AS(gather(v, bad), IndexError);
  Tensor m = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(select_rows_sum(m, bad), IndexError);
}

TEST_CASE("grad_check validates eps and flags non-finite objectives") {
  Tensor x = Tensor::zeros({2}, true);
  std::vector<Tensor> params{x};
  CHECK_THROWS_AS(grad_check([&] { return sum(x); }, params, 1e-2), ContractError);
  CHECK_THROWS_AS(
      grad_check([&] { return Tensor::scalar(std::numeric_limits<double>::quiet_NaN(), true); }, params, 1e-5),
      NumericError);
}

TEST_CASE("grad_check on quadratic and constant objectives") {
  Rng rng(59);
  Tensor p = random_tensor({6}, rng);
  std::vector<Tensor> params{p};

  // f = 0.5 |p|^2 has an exact analytic gradient.
  CHECK(grad_check([&] { return scale(sum(mul(p, p)), 0.5); }, params, 1e-5) < 1e-9);

  // Constant objective: both sides are exactly zero.
  CHECK(grad_check([&] { return Tensor::scalar(2.5, true); }, params, 1e-5) == 0.0);
}

TEST_CASE("grad_check catches corrupted gradients via the hook") {
  Rng rng(61);
  Tensor p = random_tensor({4}, rng);
  std::vector<Tensor> params{p};
  const double err =
      grad_check([&] { return scale(sum(mul(p, p)), 0.5); }, params, 1e-5, [&] { p.grad()[0] += 0.5; });
  CHECK(err > 1e-2);
}

TEST_CASE("composite graph passes grad_check across 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 3}, rng);
    Tensor v = random_tensor({4}, rng);
    std::vector<Tensor> params{a, b, v};
    const std::vector<std::int64_t> labels{2, 0, 1};
    const double err = grad_check(
        [&] {
          Tensor prod = matmul(a, b);  // [3,3]
          Tensor ce = softmax_cross_entropy_rows(prod, labels);
          Tensor cos = cosine_similarity(matvec(a, v), row_sums(transpose(b)));
          Tensor extras = add(mean(abs(prod)), sum(relu(transpose(prod))));
          return add(add(ce, cos), add(extras, softmax_cross_entropy(l2_normalize(v), 1)));
        },
        params, 1e-5);
    CHECK_MESSAGE(err < 1e-4, "seed ", seed, " err ", err);
  }
}
