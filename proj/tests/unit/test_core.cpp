#include <catch2/catch_amalgamated.hpp>

#include "cdface/autodiff.hpp"
#include "cdface/nn.hpp"
#include "cdface/optim.hpp"
#include "cdface/rng.hpp"
#include "cdface/tensor.hpp"
#include "test_util.hpp"

using namespace cdface;
using testutil::finite_difference;
using testutil::max_grad_mismatch;
using testutil::random_tensor;

namespace {

// Finite-difference check of a scalar graph w.r.t. one leaf parameter.
// `floor` guards entries whose true gradient is ~0 (e.g. the key bias of an
// attention layer, which softmax shift-invariance cancels exactly) from
// being compared against raw finite-difference noise.
template <class Builder>
void check_leaf_gradient(ad::Var<double> leaf, Builder build, double h = 1e-6,
                         double rtol = 1e-5, double floor = 1e-6) {
  ad::Var<double> loss = build();
  ad::backward(loss);
  Tensor<double> analytic = leaf->grad;
  REQUIRE(!analytic.empty());

  auto f = [&](const Tensor<double>& x) {
    leaf->value = x;
    return build()->value(0, 0);
  };
  Tensor<double> numeric =
      finite_difference<double>(f, leaf->value, h);
  INFO("max mismatch " << max_grad_mismatch(analytic, numeric, floor));
  REQUIRE(max_grad_mismatch(analytic, numeric, floor) < rtol);
}

}  // namespace

TEST_CASE("mt19937 stream is stable and shuffles are in-range", "[core]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(r.index(13) < 13);
  }
  // Box-Muller moments, loose sanity bounds.
  Rng g(3);
  double mean = 0, var = 0;
  const int n = 20000;
  std::vector<double> xs(n);
  for (double& x : xs) x = g.normal();
  for (double x : xs) mean += x;
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  REQUIRE(std::abs(mean) < 0.05);
  REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("matmul variants agree with naive triple loop", "[core]") {
  Rng rng(11);
  auto a = random_tensor<double>(4, 6, rng);
  auto b = random_tensor<double>(6, 5, rng);
  Tensor<double> c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 6; ++k) acc += a(i, k) * b(k, j);
      REQUIRE(c(i, j) == Catch::Approx(acc));
    }
  // A^T B via matmul_ta equals transposing manually.
  auto at = random_tensor<double>(6, 4, rng);
  Tensor<double> c2 = matmul_ta(at, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 6; ++k) acc += at(k, i) * b(k, j);
      REQUIRE(c2(i, j) == Catch::Approx(acc));
    }
  auto bt = random_tensor<double>(5, 6, rng);
  Tensor<double> c3 = matmul_tb(a, bt);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 6; ++k) acc += a(i, k) * bt(j, k);
      REQUIRE(c3(i, j) == Catch::Approx(acc));
    }
}

TEST_CASE("autodiff primitives pass finite-difference checks", "[core]") {
  Rng rng(5);

  SECTION("matmul + add_rowvec + gelu + sum_squares") {
    auto w = ad::make_param(random_tensor<double>(3, 4, rng));
    auto b = ad::make_param(random_tensor<double>(1, 4, rng));
    auto x = ad::constant(random_tensor<double>(5, 3, rng));
    auto build = [&] {
      return ad::sum_squares(ad::gelu(ad::add_rowvec(ad::matmul(x, w), b)));
    };
    check_leaf_gradient(w, build);
    w->clear_grad();
    b->clear_grad();
    check_leaf_gradient(b, build);
  }

  SECTION("softmax with causal mask") {
    auto x = ad::make_param(random_tensor<double>(4, 4, rng));
    Rng wrng(9);
    auto target = random_tensor<double>(4, 4, wrng);
    ad::AttnMask mask = ad::AttnMask::causal(4, 4);
    auto build = [&] {
      auto probs = ad::softmax_rows(x, &mask);
      return ad::sum_squares(ad::sub(probs, ad::constant(target)));
    };
    check_leaf_gradient(x, build);
  }

  SECTION("layer_norm") {
    auto x = ad::make_param(random_tensor<double>(3, 6, rng));
    auto gamma = ad::make_param(random_tensor<double>(1, 6, rng, 0.5, 1.5));
    auto beta = ad::make_param(random_tensor<double>(1, 6, rng));
    auto target = ad::constant(random_tensor<double>(3, 6, rng));
    auto build = [&] {
      return ad::sum_squares(
          ad::sub(ad::layer_norm(x, gamma, beta), target));
    };
    check_leaf_gradient(x, build, 1e-6, 1e-4);
    x->clear_grad();
    gamma->clear_grad();
    beta->clear_grad();
    check_leaf_gradient(gamma, build);
    x->clear_grad();
    gamma->clear_grad();
    beta->clear_grad();
    check_leaf_gradient(beta, build);
  }

  SECTION("gather_rows scatter-add and slicing") {
    auto table = ad::make_param(random_tensor<double>(6, 3, rng));
    auto build = [&] {
      auto picked = ad::gather_rows(table, {1, 4, 1});
      auto part = ad::slice_cols(ad::concat_rows<double>({picked, picked}), 1, 2);
      return ad::sum_squares(part);
    };
    check_leaf_gradient(table, build);
  }

  SECTION("stop_grad blocks flow") {
    auto x = ad::make_param(random_tensor<double>(2, 2, rng));
    auto loss = ad::sum_squares(ad::stop_grad(x));
    REQUIRE_FALSE(loss->requires_grad);
    ad::backward(loss);  // no-op on a constant subtree
    REQUIRE(x->grad.empty());
  }

  SECTION("shared subgraph accumulates once per path") {
    auto x = ad::make_param(Tensor<double>(1, 1, 3.0));
    auto y = ad::add(x, x);  // 2x
    auto loss = ad::sum_squares(y);  // 4x^2, d/dx = 8x
    ad::backward(loss);
    REQUIRE(x->grad(0, 0) == Catch::Approx(24.0));
  }
}

TEST_CASE("attention stack gradient check end to end", "[core]") {
  Rng rng(17);
  nn::ParamStore<double> ps;
  nn::AttentionSublayer<double> attn(ps, "blk.attn", 8, 2, rng);
  nn::FeedForwardSublayer<double> ffn(ps, "blk.ffn", 8, 16, rng);
  auto x = ad::constant(random_tensor<double>(5, 8, rng));
  auto kv = ad::constant(random_tensor<double>(7, 8, rng));
  ad::AttnMask mask = ad::AttnMask::causal(5, 7);
  auto target = ad::constant(random_tensor<double>(5, 8, rng));

  auto build = [&] {
    auto h = attn.self(x, nullptr);
    h = attn(h, kv, &mask);
    h = ffn(h);
    return ad::sum_squares(ad::sub(h, target));
  };

  for (const auto& [name, p] : ps.items()) {
    ps.zero_grads();
    INFO("param " << name);
    check_leaf_gradient(p, build, 1e-6, 2e-4, 1e-4);
  }
}

TEST_CASE("AdamW converges on a quadratic and skips untouched params", "[core]") {
  auto p = ad::make_param(Tensor<double>(1, 3, 5.0));
  auto q = ad::make_param(Tensor<double>(1, 3, 2.0));  // never in the graph
  AdamW<double>::Options opts;
  opts.lr = 0.1;
  opts.weight_decay = 0.0;
  AdamW<double> opt({p, q}, opts);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    auto loss = ad::sum_squares(p);
    ad::backward(loss);
    opt.step();
  }
  for (double v : p->value) REQUIRE(std::abs(v) < 1e-3);
  for (double v : q->value) REQUIRE(v == 2.0);
}

TEST_CASE("ParamStore hashing tracks content", "[core]") {
  Rng rng(1);
  nn::ParamStore<float> ps;
  nn::Linear<float> lin(ps, "lin", 4, 4, rng);
  const std::uint64_t h0 = ps.content_hash();
  REQUIRE(ps.content_hash() == h0);
  lin.w->value(0, 0) += 1.0f;
  REQUIRE(ps.content_hash() != h0);
  lin.w->value(0, 0) -= 1.0f;
  REQUIRE(ps.content_hash() == h0);
}
