#include <doctest.h>

#include "check.hpp"

#include <cmath>
#include <numbers>

#include "ebmcal/rng.hpp"
#include "ebmcal/tensor.hpp"
#include "gradcheck.hpp"

using namespace ebmcal;
using ebmcal::testing::check_directional;
using ebmcal::testing::random_tensor;

namespace {

constexpr double kLn2 = std::numbers::ln2;

// Runs a directional finite-difference check at `points` freshly drawn input
// points. `build` draws inputs (returned as params) and the op under test.
template <class Build>
double op_gradcheck(Build build, int points = 20, std::uint64_t seed = 1) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < points; ++k) {
    std::vector<Tensor> params;
    std::function<Tensor()> loss = build(rng, params);
    worst = std::max(worst, check_directional(loss, params, 1, rng).max_rel_err);
  }
  return worst;
}

std::function<Tensor()> reduce_with_weights(std::function<Tensor()> f, Rng& rng) {
  Tensor probe = f();
  Tensor w = random_tensor(probe.shape(), rng, -1.0, 1.0, false);
  return [f, w] { return sum(mul(f(), w)); };
}

}  // namespace

TEST_CASE("LogSumExp.SymmetricPair") {
  Tensor v = Tensor::vector({0.0, 0.0});
  CHECK_NEAR(logsumexp(v, 0).item(), kLn2, 1e-15);
}

TEST_CASE("LogSumExp.LargeValuesDoNotOverflow") {
  Tensor v = Tensor::vector({1000.0, 1000.0});
  const double r = logsumexp(v, 0).item();
  REQUIRE(std::isfinite(r));
  CHECK_NEAR(r, 1000.0 + kLn2, 1e-12);
}

TEST_CASE("LogSumExp.MatchesExtendedPrecisionNaiveSum") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(8);
    long double acc = 0.0L;
    for (auto& x : v) {
      x = rng.uniform(-5.0, 5.0);
      acc += std::exp(static_cast<long double>(x));
    }
    const double oracle = static_cast<double>(std::log(acc));
    const double got = logsumexp(Tensor::vector(v), 0).item();
    {
      INFO("trial " << trial);
      CHECK_LT(std::abs(got - oracle) / std::abs(oracle), 1e-12);
    }
  }
}

TEST_CASE("LogSumExp.BoundedByMaxAndMaxPlusLogLength") {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(10);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-50.0, 50.0);
    const double m = *std::max_element(v.begin(), v.end());
    const double l = logsumexp(Tensor::vector(v), 0).item();
    CHECK_GE(l, m);
    CHECK_LE(l, m + std::log(static_cast<double>(n)) + 1e-12);
  }
}

TEST_CASE("Softmax.RowsSumToOne") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_tensor({3, 5}, rng, -30.0, 30.0, false);
    Tensor p = softmax(x, 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) {
        CHECK_GE(p[r * 5 + c], 0.0);
        s += p[r * 5 + c];
      }
      CHECK_NEAR(s, 1.0, 1e-12);
    }
    Tensor pc = softmax(x, 0);
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 3; ++r) s += pc[r * 5 + c];
      CHECK_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST_CASE("Backward.SumGivesOnes") {
  Tensor x({4}, {1.0, -2.0, 3.0, 0.5}, true);
  Tape tape;
  GradScope scope(tape);
  tape.backward(sum(x));
  for (double g : x.grad()) CHECK_EQ(g, 1.0);
}

TEST_CASE("Backward.SquareGivesTwiceInput") {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  Tape tape;
  GradScope scope(tape);
  tape.backward(sum(x * x));
  REQUIRE_EQ(x.grad().size(), 3u);
  CHECK_EQ(x.grad()[0], 2.0);
  CHECK_EQ(x.grad()[1], 4.0);
  CHECK_EQ(x.grad()[2], 6.0);
}

TEST_CASE("Backward.RepeatedCallsAccumulate") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  GradScope scope(tape);
  Tensor l = sum(x * x);
  tape.backward(l);
  tape.backward(l);
  CHECK_EQ(x.grad()[0], 4.0);
  CHECK_EQ(x.grad()[1], 8.0);
}

TEST_CASE("Backward.DiamondGraphVisitsEachNodeOnce") {
  Tensor x({1}, {3.0}, true);
  Tape tape;
  GradScope scope(tape);
  Tensor a = scale(x, 2.0);
  Tensor b = x * x;
  int calls = 0;
  // Custom identity op counting its backward invocations.
  Tensor c = make_result(a.shape(), {a[0] + b[0]}, {a, b}, [&calls](detail::Node& o) {
    ++calls;
    for (int i = 0; i < 2; ++i) o.parents[static_cast<std::size_t>(i)]->grad_buffer()[0] += o.grad[0];
  });
  tape.backward(sum(c));
  CHECK_EQ(calls, 1);
  CHECK_EQ(x.grad()[0], 2.0 + 2.0 * 3.0);
}

TEST_CASE("Backward.RejectsNonScalarLoss") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  GradScope scope(tape);
  Tensor y = x * x;
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("Backward.RejectsLossFromAnotherTape") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape t1, t2;
  Tensor l;
  {
    GradScope scope(t1);
    l = sum(x * x);
  }
  CHECK_THROWS_AS(t2.backward(l), std::invalid_argument);
  Tensor untracked = sum(x * x);
  CHECK_THROWS_AS(t1.backward(untracked), std::invalid_argument);
}

TEST_CASE("Tape.NothingRecordedWithoutScope") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y = sum(x * x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  {
    GradScope scope(tape);
    Tensor z = sum(x * x);
    CHECK(z.requires_grad());
  }
  CHECK_EQ(tape.size(), 2u);
}

TEST_CASE("Errors.ShapeMismatchNamesBothShapes") {
  Tensor a({2, 3}, 1.0), b({4}, 1.0);
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    {
      INFO(msg);
      CHECK_NE(msg.find("[2, 3]"), std::string::npos);
    }
    {
      INFO(msg);
      CHECK_NE(msg.find("[4]"), std::string::npos);
    }
  }
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST_CASE("Errors.LogOfNonPositive") {
  CHECK_THROWS_AS(log(Tensor::vector({1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(Tensor::vector({-1.0})), DomainError);
}

TEST_CASE("Broadcast.GeneralShapes") {
  Tensor a({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({4, 1}, {10, 20, 30, 40});
  Tensor c = add(a, b);
  REQUIRE_EQ(c.shape(), (Shape{2, 4, 3}));
  CHECK_EQ(c[0], 11.0);
  CHECK_EQ(c[3], 21.0);
  CHECK_EQ(c[12], 14.0);
  CHECK_EQ(c[23], 46.0);
}

TEST_CASE("Broadcast.RowBiasGradientSumsOverRows") {
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b({2}, {0.5, -0.5}, true);
  Tape tape;
  GradScope scope(tape);
  tape.backward(sum(add(x, b)));
  CHECK_EQ(b.grad()[0], 3.0);
  CHECK_EQ(b.grad()[1], 3.0);
}

TEST_CASE("Composite.SoftmaxCrossEntropyGradientIsPMinusOneHot") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = random_tensor({4, 5}, rng, -3.0, 3.0);
    std::vector<int> y = {0, 3, 4, 1};
    Tape tape;
    GradScope scope(tape);
    Tensor loss = neg(sum(pick(log_softmax(z, 1), y)));
    tape.backward(loss);
    Tensor p = softmax(z.detach(), 1);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        const double expect = p[r * 5 + c] - (static_cast<int>(c) == y[r] ? 1.0 : 0.0);
        CHECK_NEAR(z.grad()[r * 5 + c], expect, 1e-10);
      }
  }
}

// ---- finite-difference checks, one per differentiable op ----

TEST_CASE("GradCheck.ElementwiseBinary") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng), c = random_tensor({3, 1}, rng);
    ps = {a, b, c};
    return reduce_with_weights([a, b, c] { return mul(sub(add(a, b), c), a); }, rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.ExpLogScale") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({5}, rng, 0.2, 2.0);
    ps = {a};
    return reduce_with_weights([a] { return add_scalar(scale(log(a), 1.5), 0.3) * exp(a); }, rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.GeluSoftplus") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({6}, rng, -4.0, 4.0);
    ps = {a};
    return reduce_with_weights([a] { return gelu(a) + softplus(scale(a, 3.0)); }, rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.Matmul") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    ps = {a, b};
    return reduce_with_weights([a, b] { return matmul(a, b); }, rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.EmbeddingSelectPickReshapeConcat") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor table = random_tensor({6, 3}, rng), other = random_tensor({4, 2}, rng);
    ps = {table, other};
    return reduce_with_weights(
        [table, other] {
          const std::vector<int> ids = {1, 4, 1, 5};
          const std::vector<std::size_t> rows = {3, 0, 3};
          const std::vector<int> cols = {0, 4, 2};
          Tensor e = embedding(table, ids);
          Tensor cat = concat({e, other}, 1);
          Tensor sel = select_rows(cat, rows);
          return concat({pick(sel, cols), reshape(other, {8})}, 0);
        },
        rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.Reductions") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({2, 3, 4}, rng, -2.0, 2.0);
    ps = {a};
    return reduce_with_weights(
        [a] {
          return concat({reshape(sum(a, 1), {8}), reshape(max(a, 2), {6}), reshape(logsumexp(a, 0), {12}),
                         reshape(mean(a), {1}), reshape(sum(a), {1})},
                        0);
        },
        rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.SoftmaxFamily") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({3, 5}, rng, -3.0, 3.0);
    ps = {a};
    return reduce_with_weights([a] { return softmax(a, 1) + log_softmax(a, 0) + softmax(a, 0); }, rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.LayerNorm") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor x = random_tensor({4, 6}, rng, -2.0, 2.0), g = random_tensor({6}, rng, 0.5, 1.5),
           b = random_tensor({6}, rng);
    ps = {x, g, b};
    return reduce_with_weights([x, g, b] { return layer_norm(x, g, b); }, rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("GradCheck.AttentionBidirectionalAndCausal") {
  for (bool causal : {false, true}) {
    auto err = op_gradcheck([causal](Rng& rng, std::vector<Tensor>& ps) {
      Tensor q = random_tensor({7, 4}, rng), k = random_tensor({7, 4}, rng), v = random_tensor({7, 4}, rng);
      ps = {q, k, v};
      return reduce_with_weights(
          [q, k, v, causal] {
            const std::vector<Segment> segs = {{0, 3}, {3, 4}};
            return attention(q, k, v, segs, 2, causal);
          },
          rng);
    });
    {
      INFO((causal ? "causal" : "bidirectional"));
      CHECK_LT(err, 1e-4);
    }
  }
}

TEST_CASE("GradCheck.DropoutWithFixedMask") {
  auto err = op_gradcheck([](Rng& rng, std::vector<Tensor>& ps) {
    Tensor a = random_tensor({10}, rng);
    ps = {a};
    const std::uint64_t mask_seed = rng.next();
    return reduce_with_weights(
        [a, mask_seed] {
          Rng mask_rng(mask_seed);
          return dropout(a, 0.3, mask_rng);
        },
        rng);
  });
  CHECK_LT(err, 1e-4);
}

TEST_CASE("Attention.CausalOutputIgnoresFuturePositions") {
  Rng rng(5);
  Tensor q = random_tensor({5, 4}, rng, -1, 1, false), k = random_tensor({5, 4}, rng, -1, 1, false),
         v = random_tensor({5, 4}, rng, -1, 1, false);
  const std::vector<Segment> segs = {{0, 5}};
  Tensor base = attention(q, k, v, segs, 2, true);
  std::vector<double> kd(k.data().begin(), k.data().end()), vd(v.data().begin(), v.data().end());
  for (std::size_t c = 0; c < 4; ++c) {
    kd[4 * 4 + c] += 1.0;
    vd[4 * 4 + c] -= 2.0;
  }
  Tensor pert = attention(q, Tensor({5, 4}, kd), Tensor({5, 4}, vd), segs, 2, true);
  for (std::size_t i = 0; i < 4 * 4; ++i) CHECK_EQ(base[i], pert[i]);
  CHECK_NE(base[16], pert[16]);
}

TEST_CASE("Attention.SegmentsAreIndependent") {
  Rng rng(6);
  Tensor q = random_tensor({6, 4}, rng, -1, 1, false);
  const std::vector<Segment> packed = {{0, 2}, {2, 4}};
  Tensor both = attention(q, q, q, packed, 1, false);
  Tensor first = attention(select_rows(q, std::vector<std::size_t>{0, 1}), select_rows(q, std::vector<std::size_t>{0, 1}),
                           select_rows(q, std::vector<std::size_t>{0, 1}), std::vector<Segment>{{0, 2}}, 1, false);
  for (std::size_t i = 0; i < 8; ++i) CHECK_EQ(both[i], first[i]);
}

TEST_CASE("GradCheck.OracleRejectsWrongDerivative") {
  Rng rng(99);
  Tensor a = random_tensor({4}, rng, 0.5, 1.5);
  std::vector<Tensor> ps = {a};
  // y = x^2 with a backward claiming dy/dx = x.
  auto bad_square = [a] {
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * a[i];
    return sum(make_result(a.shape(), y, {a}, [](detail::Node& o) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.parents[0]->data[i];
    }));
  };
  CHECK_GT(check_directional(bad_square, ps, 5, rng).max_rel_err, 0.1);
}
