#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hourglass/gradcheck.hpp"
#include "hourglass/nn.hpp"
#include "hourglass/tensor.hpp"
#include "test_util.hpp"

using namespace hourglass;

TEST_CASE("rng determinism across instances") {
  RngStream a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  RngStream c(1234), d(4321);
  bool all_equal = true;
  for (int i = 0; i < 16; ++i) all_equal = all_equal && (c.next_u64() == d.next_u64());
  CHECK_FALSE(all_equal);
}

TEST_CASE("elementwise arithmetic values") {
  Tensor a = Tensor::from_values({3}, {1, 2, 3});
  Tensor b = Tensor::from_values({3}, {10, 20, 30});
  CHECK(add(a, b).values()[1] == 22);
  CHECK(sub(b, a).values()[2] == 27);
  CHECK(mul(a, b).values()[0] == 10);
  CHECK(mul_scalar(a, 2.0).values()[2] == 6);
  CHECK_THROWS_AS(add(a, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("sum of squares gradient matches polynomial derivative") {
  Tensor x = Tensor::from_values({3}, {1, 2, 3}, true);
  auto f = [&] { return sum_all(mul(x, x)); };
  Tensor y = f();
  CHECK(y.item() == doctest::Approx(14.0));
  y.backward();
  auto g = x.grad();
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));

  auto report = check_gradient(f, {x});
  CHECK(report.max_relative_error < 1e-8);
}

TEST_CASE("check_gradient rejects non-scalar objective") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  CHECK_THROWS_AS(check_gradient([&] { return mul(x, x); }, {x}), ContractError);
}

TEST_CASE("matmul matches hand-written loop and gradcheck") {
  RngStream rng(7);
  SUBCASE("2d") {
    Tensor a = hgtest::random_tensor({3, 4}, rng);
    Tensor b = hgtest::random_tensor({4, 5}, rng);
    Tensor c = matmul(a, b);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) acc += a.values()[i * 4 + k] * b.values()[k * 5 + j];
        CHECK(c.values()[i * 5 + j] == doctest::Approx(acc).epsilon(1e-12));
      }
    auto report = check_gradient([&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b});
    CHECK(report.max_relative_error < 1e-6);
  }
  SUBCASE("batched and nt") {
    Tensor a = hgtest::random_tensor({2, 3, 4}, rng);
    Tensor b = hgtest::random_tensor({2, 5, 4}, rng);
    Tensor c = matmul_nt(a, b);
    CHECK(c.shape() == Shape{2, 3, 5});
    auto report = check_gradient([&] { return mean_all(mul(matmul_nt(a, b), matmul_nt(a, b))); },
                                 {a, b});
    CHECK(report.max_relative_error < 1e-6);
  }
  SUBCASE("3d by 2d") {
    Tensor a = hgtest::random_tensor({2, 3, 4}, rng);
    Tensor w = hgtest::random_tensor({4, 6}, rng);
    CHECK(matmul(a, w).shape() == Shape{2, 3, 6});
    auto report = check_gradient([&] { return sum_all(mul(matmul(a, w), matmul(a, w))); }, {a, w});
    CHECK(report.max_relative_error < 1e-6);
  }
}

TEST_CASE("unary op gradients") {
  RngStream rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = hgtest::random_tensor({6}, rng);
    for (auto fn : {&hourglass::exp, &hourglass::tanh, &hourglass::sigmoid, &hourglass::silu}) {
      auto report = check_gradient([&] { return sum_all(mul(fn(x), fn(x))); }, {x});
      CHECK(report.max_relative_error < 1e-6);
    }
    Tensor pos = add_scalar(abs_val(x), 0.5);
    Tensor leaf = Tensor::from_values(pos.shape(), {pos.values().begin(), pos.values().end()}, true);
    auto report = check_gradient([&] { return sum_all(log(leaf)); }, {leaf});
    CHECK(report.max_relative_error < 1e-6);
  }
}

TEST_CASE("abs subgradient at zero is zero") {
  Tensor x = Tensor::from_values({3}, {-2.0, 0.0, 3.0}, true);
  Tensor y = sum_all(abs_val(x));
  CHECK(y.item() == doctest::Approx(5.0));
  y.backward();
  CHECK(x.grad()[0] == -1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("shape ops roundtrip and gradients") {
  RngStream rng(13);
  Tensor x = hgtest::random_tensor({2, 5, 3}, rng);
  SUBCASE("narrow/concat inverse") {
    Tensor head = narrow(x, 1, 0, 2);
    Tensor tail = narrow(x, 1, 2, 3);
    Tensor back = concat(head, tail, 1);
    CHECK(hgtest::max_abs_diff(back, x) == 0.0);
    auto report = check_gradient(
        [&] { return sum_all(mul(concat(narrow(x, 1, 0, 2), narrow(x, 1, 2, 3), 1), x)); }, {x});
    CHECK(report.max_relative_error < 1e-6);
  }
  SUBCASE("take_every picks stride offsets") {
    Tensor every2 = take_every(x, 1, 2);
    CHECK(every2.shape() == Shape{2, 3, 3});
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 3; ++c)
          CHECK(every2.values()[(b * 3 + i) * 3 + c] == x.values()[(b * 5 + 2 * i) * 3 + c]);
    auto report = check_gradient([&] { return sum_all(mul(take_every(x, 1, 2), take_every(x, 1, 2))); },
                                 {x});
    CHECK(report.max_relative_error < 1e-6);
  }
  SUBCASE("split/merge heads are inverse") {
    Tensor split = split_heads(x, 3);
    CHECK(split.shape() == Shape{6, 5, 1});
    Tensor merged = merge_heads(split, 3);
    CHECK(hgtest::max_abs_diff(merged, x) == 0.0);
  }
}

TEST_CASE("softmax rows normalize and mask excludes positions") {
  RngStream rng(17);
  Tensor logits = hgtest::random_tensor({2, 3, 4}, rng, 2.0, false);
  Tensor p = softmax_last(logits);
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int c = 0; c < 4; ++c) s += p.values()[r * 4 + c];
    CHECK(std::fabs(s - 1.0) < 1e-9);
  }

  AttnMask mask = AttnMask::key_padding({2, 4}, 3, 4);
  Tensor pm = softmax_last(logits, &mask, 1);
  for (int r = 0; r < 3; ++r) {
    CHECK(pm.values()[r * 4 + 2] == 0.0);
    CHECK(pm.values()[r * 4 + 3] == 0.0);
  }

  AttnMask none = AttnMask::key_padding({0, 4}, 3, 4);
  CHECK_THROWS_AS(softmax_last(logits, &none, 1), ContractError);
}

TEST_CASE("softmax and log_softmax gradients") {
  RngStream rng(19);
  Tensor x = hgtest::random_tensor({3, 5}, rng);
  Tensor target = hgtest::random_tensor({3, 5}, rng, 1.0, false);
  auto r1 = check_gradient([&] { return sum_all(mul(softmax_last(x), target)); }, {x});
  CHECK(r1.max_relative_error < 1e-6);
  auto r2 = check_gradient([&] { return sum_all(mul(log_softmax_last(x), target)); }, {x});
  CHECK(r2.max_relative_error < 1e-6);
  Tensor lp = log_softmax_last(x);
  for (int r = 0; r < 3; ++r) {
    double lse = 0;
    for (int c = 0; c < 5; ++c) lse += std::exp(lp.values()[r * 5 + c]);
    CHECK(std::fabs(std::log(lse)) < 1e-12);
  }
}

TEST_CASE("layer_norm output statistics and gradients") {
  RngStream rng(23);
  Tensor x = hgtest::random_tensor({4, 6}, rng, 3.0);
  Tensor gamma = Tensor::full({6}, 1.0, true);
  Tensor beta = Tensor::zeros({6}, true);
  Tensor y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 4; ++r) {
    double mean = 0;
    for (int c = 0; c < 6; ++c) mean += y.values()[r * 6 + c];
    CHECK(std::fabs(mean / 6.0) < 1e-12);
  }
  Tensor probe = hgtest::random_tensor({4, 6}, rng, 1.0, false);
  auto report =
      check_gradient([&] { return sum_all(mul(layer_norm(x, gamma, beta), probe)); }, {x, gamma, beta});
  CHECK(report.max_relative_error < 1e-4);
}

TEST_CASE("conv1d shape arithmetic and gradients") {
  RngStream rng(29);
  Tensor x = hgtest::random_tensor({2, 7, 3}, rng);
  Tensor w = hgtest::random_tensor({4, 3, 3}, rng, 0.5);
  Tensor b = hgtest::random_tensor({4}, rng, 0.1);
  Tensor y = conv1d(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{2, 4, 4});  // ceil(7/2)
  auto report = check_gradient([&] { return sum_all(mul(conv1d(x, w, b, 2, 1), conv1d(x, w, b, 2, 1))); },
                               {x, w, b});
  CHECK(report.max_relative_error < 1e-6);
}

TEST_CASE("depthwise conv keeps length and gradchecks") {
  RngStream rng(31);
  Tensor x = hgtest::random_tensor({2, 5, 4}, rng);
  Tensor w = hgtest::random_tensor({4, 3}, rng);
  CHECK(depthwise_conv1d(x, w).shape() == x.shape());
  auto report =
      check_gradient([&] { return mean_all(mul(depthwise_conv1d(x, w), x)); }, {x, w});
  CHECK(report.max_relative_error < 1e-6);
}

TEST_CASE("conv3d geometry and gradients") {
  RngStream rng(37);
  Tensor x = hgtest::random_tensor({1, 2, 6, 6, 2}, rng);
  Tensor w = hgtest::random_tensor({3, 3, 3, 3, 2}, rng, 0.3);
  Tensor b = hgtest::random_tensor({3}, rng, 0.1);
  Tensor y = conv3d(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{1, 2, 3, 3, 3});
  auto report = check_gradient([&] { return sum_all(mul(conv3d(x, w, b, 2, 1), conv3d(x, w, b, 2, 1))); },
                               {x, w, b});
  CHECK(report.max_relative_error < 1e-5);

  Tensor pooled = spatial_mean(x);
  CHECK(pooled.shape() == Shape{1, 2, 2});
  auto r2 = check_gradient([&] { return sum_all(mul(spatial_mean(x), spatial_mean(x))); }, {x});
  CHECK(r2.max_relative_error < 1e-6);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
  Tensor table = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor e = embedding(table, {2, 0, 2}, {3});
  CHECK(e.values()[0] == 5);
  CHECK(e.values()[2] == 1);
  Tensor s = sum_all(e);
  s.backward();
  CHECK(table.grad()[0] == 1.0);  // id 0 hit once
  CHECK(table.grad()[4] == 2.0);  // id 2 hit twice
  CHECK(table.grad()[2] == 0.0);  // id 1 never
}

TEST_CASE("attention: single key takes full mass") {
  ParamStore ps(5);
  MultiHeadAttention attn(ps, "attn", 4, 1);
  RngStream rng(41);
  Tensor q = hgtest::random_tensor({1, 1, 4}, rng);
  auto out = attn.forward(q, q, q);
  CHECK(out.scores.size() == 1);
  CHECK(out.scores.values()[0] == 1.0);
}

TEST_CASE("attention: identical keys give uniform scores") {
  ParamStore ps(6);
  MultiHeadAttention attn(ps, "attn", 4, 1);
  RngStream rng(43);
  Tensor q = hgtest::random_tensor({1, 2, 4}, rng);
  std::vector<double> krow{0.3, -0.2, 0.9, 0.5};
  std::vector<double> kv;
  for (int i = 0; i < 3; ++i) kv.insert(kv.end(), krow.begin(), krow.end());
  Tensor k = Tensor::from_values({1, 3, 4}, kv);
  auto out = attn.forward(q, k, k);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(out.scores.values()[r * 3 + c] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("attention matches step-by-step recomputation") {
  // Straight-line reference: run the projections, per-head softmax and the
  // weighted sum with plain loops on the same weights.
  ParamStore ps(7);
  const int64_t dim = 8, heads = 2, tq = 4, tk = 4;
  MultiHeadAttention attn(ps, "attn", dim, heads);
  RngStream rng(47);
  Tensor q = hgtest::random_tensor({1, tq, dim}, rng);
  Tensor k = hgtest::random_tensor({1, tk, dim}, rng);
  Tensor v = hgtest::random_tensor({1, tk, dim}, rng);
  auto out = attn.forward(q, k, v);

  auto project = [&](const Tensor& x, const Linear& lin, int64_t t) {
    std::vector<double> y(static_cast<size_t>(t * dim), 0.0);
    for (int64_t i = 0; i < t; ++i)
      for (int64_t o = 0; o < dim; ++o) {
        double acc = lin.b.values()[o];
        for (int64_t c = 0; c < dim; ++c)
          acc += x.values()[i * dim + c] * lin.w.values()[c * dim + o];
        y[static_cast<size_t>(i * dim + o)] = acc;
      }
    return y;
  };
  auto qp = project(q, attn.wq, tq);
  auto kp = project(k, attn.wk, tk);
  auto vp = project(v, attn.wv, tk);

  const int64_t dh = dim / heads;
  std::vector<double> context(static_cast<size_t>(tq * dim), 0.0);
  double max_score_diff = 0.0;
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < tq; ++i) {
      std::vector<double> logits(static_cast<size_t>(tk));
      for (int64_t j = 0; j < tk; ++j) {
        double acc = 0;
        for (int64_t c = 0; c < dh; ++c)
          acc += qp[static_cast<size_t>(i * dim + h * dh + c)] *
                 kp[static_cast<size_t>(j * dim + h * dh + c)];
        logits[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(dh));
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      double denom = 0;
      for (double l : logits) denom += std::exp(l - mx);
      for (int64_t j = 0; j < tk; ++j) {
        const double prob = std::exp(logits[static_cast<size_t>(j)] - mx) / denom;
        max_score_diff = std::max(
            max_score_diff,
            std::fabs(prob - out.scores.values()[(h * tq + i) * tk + j]));
        for (int64_t c = 0; c < dh; ++c)
          context[static_cast<size_t>(i * dim + h * dh + c)] +=
              prob * vp[static_cast<size_t>(j * dim + h * dh + c)];
      }
    }
  CHECK(max_score_diff < 1e-10);

  std::vector<double> expected(static_cast<size_t>(tq * dim));
  for (int64_t i = 0; i < tq; ++i)
    for (int64_t o = 0; o < dim; ++o) {
      double acc = attn.wo.b.values()[o];
      for (int64_t c = 0; c < dim; ++c)
        acc += context[static_cast<size_t>(i * dim + c)] * attn.wo.w.values()[c * dim + o];
      expected[static_cast<size_t>(i * dim + o)] = acc;
    }
  CHECK(hgtest::max_abs_diff(out.out.values(), expected) < 1e-10);
}

TEST_CASE("attention gradcheck through projections") {
  ParamStore ps(8);
  MultiHeadAttention attn(ps, "attn", 4, 2);
  RngStream rng(53);
  Tensor q = hgtest::random_tensor({1, 3, 4}, rng);
  Tensor kv = hgtest::random_tensor({1, 2, 4}, rng);
  auto f = [&] {
    auto o = attn.forward(q, kv, kv);
    return sum_all(mul(o.out, o.out));
  };
  auto report = check_gradient(f, {q, kv, attn.wq.w, attn.wk.w, attn.wv.w, attn.wo.w, attn.wo.b});
  CHECK(report.max_relative_error < 1e-5);
}

TEST_CASE("conv gating mlp forward+grad") {
  ParamStore ps(9);
  ConvGatingMlp mlp(ps, "cgmlp", 4, 6, 3);
  RngStream rng(59);
  Tensor x = hgtest::random_tensor({2, 3, 4}, rng);
  Tensor y = mlp.forward(x);
  CHECK(y.shape() == Shape{2, 3, 4});
  auto report = check_gradient([&] { return mean_all(mul(mlp.forward(x), mlp.forward(x))); },
                               {x, mlp.up.w, mlp.dw_kernel, mlp.down.w});
  CHECK(report.max_relative_error < 1e-5);
}

TEST_CASE("no-grad mode builds no graph") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = sum_all(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("mutable_values rejected on op outputs") {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(y.mutable_values(), ContractError);
}
