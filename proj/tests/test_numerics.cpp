#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "mmk/autograd.hpp"
#include "mmk/errors.hpp"
#include "mmk/gradcheck.hpp"
#include "mmk/rng.hpp"

using namespace mmk;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("matmul examples") {
  Graph g;
  Var eye = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var b = g.constant(Tensor::matrix({{5, 6}, {7, 8}}));
  CHECK(matmul(eye, b).value() == Tensor::matrix({{5, 6}, {7, 8}}));

  Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  CHECK(matmul(a, b).value() == Tensor::matrix({{19, 22}, {43, 50}}));

  Rng rng(1);
  Var z = g.constant(Tensor::zeros({2, 3}));
  Var any = g.constant(random_tensor({3, 4}, rng));
  CHECK(matmul(z, any).value() == Tensor::zeros({2, 4}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Graph g;
  Var a = g.constant(Tensor::zeros({2, 3}));
  Var b = g.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul is associative on random 4x4 chains") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    Var a = g.constant(random_tensor({4, 4}, rng));
    Var b = g.constant(random_tensor({4, 4}, rng));
    Var c = g.constant(random_tensor({4, 4}, rng));
    CHECK(max_abs_diff(matmul(matmul(a, b), c).value(), matmul(a, matmul(b, c)).value()) < 1e-9);
  }
}

TEST_CASE("softmax examples") {
  Graph g;
  Var u = softmax(g.constant(Tensor::row({0, 0, 0})));
  for (double p : u.value().data()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Var big = softmax(g.constant(Tensor::row({1000, 0})));
  CHECK(big.value()[0] == doctest::Approx(1.0));
  CHECK(big.value()[1] >= 0.0);
  CHECK(big.value()[1] < 1e-300);

  // oracle: direct exp/normalize in long double
  Var s = softmax(g.constant(Tensor::row({1, 2, 3})));
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(s.value()[i] - static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z)) < 1e-15);
  }
}

TEST_CASE("softmax sums to one along any axis (property)") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(7);
    Graph g;
    Var x = g.constant(random_tensor({r, c}, rng, 1.0 + 50.0 * rng.uniform()));
    for (int axis : {0, 1, -1}) {
      const Tensor& y = softmax(x, axis).value();
      const std::size_t outer = axis == 0 ? c : r;
      const std::size_t n = axis == 0 ? r : c;
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double v = axis == 0 ? y.at(j, o) : y.at(o, j);
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("softmax rejects bad axes and empty tensors") {
  Graph g;
  Var x = g.constant(Tensor::row({1, 2}));
  CHECK_THROWS_AS(softmax(x, 2), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
}

TEST_CASE("layer_norm examples") {
  Graph g;
  Var ones = g.constant(Tensor::filled({3}, 1.0));
  Var zeros = g.constant(Tensor::zeros({3}));

  Var c = layer_norm(g.constant(Tensor::row({4, 4, 4})), ones, zeros, 1e-5);
  for (double v : c.value().data()) CHECK(v == 0.0);

  Var bias = g.constant(Tensor({3}, {0.5, -1, 2}));
  Var gb = layer_norm(g.constant(Tensor::row({1, 5, -3})), zeros, bias, 1e-5);
  CHECK(gb.value() == Tensor({1, 3}, {0.5, -1, 2}));

  // oracle: mean 2, population variance 2/3
  Var n = layer_norm(g.constant(Tensor::row({1, 2, 3})), ones, zeros, 0.0);
  const double sd = std::sqrt(2.0 / 3.0);
  CHECK(std::abs(n.value()[0] - (-1.0 / sd)) < 1e-12);
  CHECK(std::abs(n.value()[1]) < 1e-12);
  CHECK(std::abs(n.value()[2] - (1.0 / sd)) < 1e-12);
  double mean = 0, var = 0;
  for (double v : n.value().data()) mean += v / 3;
  for (double v : n.value().data()) var += (v - mean) * (v - mean) / 3;
  CHECK(std::abs(mean) < 1e-10);
  CHECK(std::abs(var - 1.0) < 1e-10);

  Var one = g.constant(Tensor::filled({1}, 1.0));
  Var zero = g.constant(Tensor::zeros({1}));
  CHECK_THROWS_AS(layer_norm(g.constant(Tensor::row({3})), one, zero, 0.0), NumericError);
}

TEST_CASE("backward examples") {
  {
    Graph g;
    Var x = g.variable(Tensor::row({3, -1, 2}));
    Gradients gr = g.backward(sum(x));
    CHECK(gr.of(x) == Tensor::filled({1, 3}, 1.0));
  }
  {
    Graph g;
    Var x = g.variable(Tensor::row({1, 2}));
    Gradients gr = g.backward(sum(mul(x, x)));
    CHECK(gr.of(x) == Tensor::row({2, 4}));
  }
  {
    Graph g;
    Var x = g.variable(Tensor::row({1, 2}));
    Var unused = g.variable(Tensor::row({5, 5, 5}));
    Gradients gr = g.backward(sum(x));
    CHECK(gr.of(unused) == Tensor::zeros({1, 3}));
  }
}

TEST_CASE("backward contract errors") {
  Graph g;
  Var x = g.variable(Tensor::row({1, 2}));
  CHECK_THROWS_AS(g.backward(x), ContractError);  // non-scalar
  Var loss = sum(x);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), ContractError);  // second call
}

TEST_CASE("backward visits nodes in reverse topological order") {
  Graph g;
  std::vector<NodeId> visited;
  Var x = g.variable(Tensor::scalar(2.0));
  Var a = scale(x, 3.0);
  auto track = [&](Var in) {
    NodeId src = in.id;
    return g.record(OpKind::Scale, {src}, in.value(), [&visited, src](Graph& gr, NodeId self) {
      visited.push_back(self);
      Tensor& d = gr.grad(src);
      d[0] += gr.grad(self)[0];
    });
  };
  Var b = track(a);
  Var c = track(b);
  Var d = track(c);
  g.backward(d);
  CHECK(visited == std::vector<NodeId>{d.id, c.id, b.id});
  for (NodeId id = 0; id < g.size(); ++id)
    for (NodeId in : g.node(id).inputs) CHECK(in < id);
}

TEST_CASE("non-finite values are rejected when checking is on") {
  Graph g;
  g.set_check_finite(true);
  Var x = g.constant(Tensor::row({1e308, 1e308}));
  CHECK_THROWS_AS(scale(x, 10.0), NumericError);
}

TEST_CASE("finite_diff_check on a quadratic") {
  ParamMap params;
  params["theta"] = Tensor({4}, {0.3, -1.2, 2.0, 0.7});
  auto f = [](Graph& g, const ParamMap& p) {
    Var t = g.parameter("theta", p.at("theta"));
    return sum(mul(t, t));
  };
  CheckReport r = finite_diff_check(f, params, {.eps = 1e-5, .tol = 1e-8});
  CHECK(r.passed);
  CHECK(r.max_rel_err < 1e-8);
  REQUIRE(r.blocks.size() == 1);
  CHECK(r.blocks[0].coords_checked == 4);

  CHECK_THROWS_AS(finite_diff_check(f, params, {.eps = 1e-20}), NumericError);
}

TEST_CASE("finite_diff_check detects non-determinism") {
  ParamMap params;
  params["w"] = Tensor({2}, {1.0, 2.0});
  int calls = 0;
  auto f = [&calls](Graph& g, const ParamMap& p) {
    Var w = g.parameter("w", p.at("w"));
    return scale(sum(w), 1.0 + 1e-3 * (calls++));
  };
  CHECK_THROWS_AS(finite_diff_check(f, params), ReproducibilityError);
}

TEST_CASE("finite_diff_check samples coordinates when asked") {
  ParamMap params;
  Rng rng(5);
  params["w"] = random_tensor({10, 10}, rng);
  auto f = [](Graph& g, const ParamMap& p) { return sum(relu(g.parameter("w", p.at("w")))); };
  CheckReport r = finite_diff_check(f, params, {.max_coords_per_block = 7, .sample_seed = 9});
  REQUIRE(r.blocks.size() == 1);
  CHECK(r.blocks[0].coords_checked == 7);
  CHECK(r.sampling.find("7") != std::string::npos);
}

// Every differentiable op, exercised on random inputs, must agree with
// central differences.
TEST_CASE("every op passes the finite-difference check") {
  Rng rng(11);
  ParamMap p;
  p["a"] = random_tensor({3, 4}, rng);
  p["b"] = random_tensor({4, 4}, rng);
  p["c"] = random_tensor({3, 4}, rng);
  p["bias"] = random_tensor({4}, rng);
  p["gain"] = random_tensor({4}, rng);
  p["table"] = random_tensor({6, 4}, rng);
  p["row"] = random_tensor({1, 4}, rng);
  p["wq"] = random_tensor({4, 4}, rng, 0.7);
  p["wk"] = random_tensor({4, 4}, rng, 0.7);
  p["wv"] = random_tensor({4, 4}, rng, 0.7);
  p["wout"] = random_tensor({8, 6}, rng);

  using Builder = std::function<Var(Graph&, const ParamMap&)>;
  auto P = [](Graph& g, const ParamMap& m, const char* n) { return g.parameter(n, m.at(n)); };
  std::vector<std::pair<const char*, Builder>> cases = {
      {"matmul", [&](Graph& g, const ParamMap& m) { return sum(matmul(P(g, m, "a"), P(g, m, "b"))); }},
      {"transpose",
       [&](Graph& g, const ParamMap& m) {
         return sum(mul(matmul(transpose(P(g, m, "a")), P(g, m, "c")), P(g, m, "b")));
       }},
      {"add/sub/mul",
       [&](Graph& g, const ParamMap& m) {
         Var a = P(g, m, "a"), c = P(g, m, "c");
         return sum(mul(add(a, c), sub(a, scale(c, 0.5))));
       }},
      {"add_bias+relu",
       [&](Graph& g, const ParamMap& m) { return sum(mul(relu(add_bias(P(g, m, "a"), P(g, m, "bias"))), P(g, m, "c"))); }},
      {"sigmoid",
       [&](Graph& g, const ParamMap& m) { return sum(mul(sigmoid(P(g, m, "a")), P(g, m, "c"))); }},
      {"softmax axis 0",
       [&](Graph& g, const ParamMap& m) { return sum(mul(softmax(P(g, m, "a"), 0), P(g, m, "c"))); }},
      {"softmax axis 1",
       [&](Graph& g, const ParamMap& m) { return sum(mul(softmax(P(g, m, "a"), 1), P(g, m, "c"))); }},
      {"layer_norm",
       [&](Graph& g, const ParamMap& m) {
         return sum(mul(layer_norm(P(g, m, "a"), P(g, m, "gain"), P(g, m, "bias"), 1e-5), P(g, m, "c")));
       }},
      {"embedding",
       [&](Graph& g, const ParamMap& m) {
         std::vector<std::int32_t> ids{1, 4, 1};
         return sum(mul(embedding(P(g, m, "table"), ids), P(g, m, "c")));
       }},
      {"embedding_bag+repeat_rows",
       [&](Graph& g, const ParamMap& m) {
         std::vector<std::int32_t> ids{0, 2, 2, 5};
         std::vector<double> w{0.25, 0.5, 0.25, 1.0};
         Var bag = embedding_bag(P(g, m, "table"), ids, w);
         return sum(mul(repeat_rows(add(bag, P(g, m, "row")), 3), P(g, m, "c")));
       }},
      {"concat_cols",
       [&](Graph& g, const ParamMap& m) {
         return sum(matmul(concat_cols(P(g, m, "a"), P(g, m, "c")), P(g, m, "wout")));
       }},
      {"attention causal",
       [&](Graph& g, const ParamMap& m) {
         Var x = P(g, m, "a");
         Var q = matmul(x, P(g, m, "wq")), k = matmul(x, P(g, m, "wk")), v = matmul(x, P(g, m, "wv"));
         return sum(mul(attention(q, k, v, 2, {.causal = true}), P(g, m, "c")));
       }},
      {"attention masked cross",
       [&](Graph& g, const ParamMap& m) {
         Var q = matmul(P(g, m, "a"), P(g, m, "wq"));
         Var mem = P(g, m, "table");
         Var k = matmul(mem, P(g, m, "wk")), v = matmul(mem, P(g, m, "wv"));
         AttentionMask mask{.causal = false, .key_valid = {true, true, false, true, true, false}};
         return sum(mul(attention(q, k, v, 4, mask), P(g, m, "c")));
       }},
      {"cross_entropy",
       [&](Graph& g, const ParamMap& m) {
         std::vector<std::int32_t> targets{2, 0, 5};
         return cross_entropy(matmul(P(g, m, "a"), transpose(P(g, m, "table"))), targets, 0);
       }},
  };
  for (auto& [name, builder] : cases) {
    CAPTURE(name);
    CheckReport r = finite_diff_check(builder, p, {.eps = 1e-5, .tol = 1e-6});
    CHECK(r.passed);
    CHECK(r.max_rel_err < 1e-6);
  }
}

TEST_CASE("attention matches a brute-force masked oracle") {
  Rng rng(21);
  const std::size_t lq = 3, lk = 4, d = 4, heads = 2, dh = 2;
  Tensor q = random_tensor({lq, d}, rng), k = random_tensor({lk, d}, rng), v = random_tensor({lk, d}, rng);
  std::vector<bool> valid{true, false, true, true};
  Graph g;
  Var out = attention(g.constant(q), g.constant(k), g.constant(v), heads, {.causal = true, .key_valid = valid});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> w;
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += q.at(i, h * dh + t) * k.at(j, h * dh + t);
        double e = (j <= i && valid[j]) ? std::exp(s / std::sqrt(2.0)) : 0.0;
        w.push_back(e);
        z += e;
      }
      for (std::size_t t = 0; t < dh; ++t) {
        double expect = 0.0;
        for (std::size_t j = 0; j < lk; ++j) expect += w[j] / z * v.at(j, h * dh + t);
        CHECK(std::abs(out.value().at(i, h * dh + t) - expect) < 1e-12);
      }
    }
  }
}

TEST_CASE("cross_entropy with every target ignored is a contract error") {
  Graph g;
  std::vector<std::int32_t> targets{0, 0};
  CHECK_THROWS_AS(cross_entropy(g.constant(Tensor::zeros({2, 3})), targets, 0), ContractError);
}

TEST_CASE("dropout") {
  Rng rng(1);
  Graph g;
  Var x = g.variable(Tensor::filled({4, 8}, 2.0));
  CHECK(dropout(x, 0.0, rng).id == x.id);
  Var y = dropout(x, 0.5, rng);
  for (double v : y.value().data()) CHECK((v == 0.0 || v == 4.0));
  CHECK_THROWS_AS(dropout(x, 1.0, rng), ContractError);
}
