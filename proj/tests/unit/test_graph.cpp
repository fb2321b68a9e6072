#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/expect.hpp"
#include "support/grad_cases.hpp"
#include "xlab/graph.hpp"

using namespace xlab;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Pushes values away from zero so relu kinks stay out of finite-difference reach.
void nudge_from_zero(Tensor<double>& t) {
  for (double& v : t.data()) {
    if (std::abs(v) < gradcheck::kMargin) v = v < 0 ? -gradcheck::kMargin * 2 : gradcheck::kMargin * 2;
  }
}

// Reduces `out` to a scalar through a fixed random weighting so every element
// receives a distinct upstream gradient.
struct Probe {
  Graph<double> g;
  std::map<std::string, Tensor<double>, std::less<>> values;
  NodeId loss = 0;

  void finish(NodeId out, std::uint64_t seed) {
    values.emplace("probe.w", random_tensor(g.shape(out), seed));
    const NodeId w = g.leaf("probe.w", g.shape(out));
    loss = g.sum(g.mul(out, w));
  }
  Bindings<double> bindings() const {
    Bindings<double> b;
    for (const auto& [n, t] : values) b.insert_or_assign(n, std::cref(t));
    return b;
  }
  NodeId input(std::string name, Tensor<double> value) {
    const NodeId id = g.leaf(name, value.shape(), true);
    values.emplace(std::move(name), std::move(value));
    return id;
  }
};

double max_rel(Probe& p) { return gradient_check(p.g, p.bindings(), p.loss, 1e-4).max_rel_error; }

}  // namespace

TEST(Forward, ReluClampsNegatives) {
  Graph<float> g;
  const NodeId x = g.leaf("x", {3});
  const NodeId y = g.relu(x);
  const Tensor<float> in({3}, std::vector<float>{-1, 0, 2});
  const auto& out = g.forward({{"x", std::cref(in)}}, y);
  EXPECT_EQ(out, Tensor<float>({3}, std::vector<float>{0, 0, 2}));
}

TEST(Forward, MatmulShape) {
  Graph<float> g;
  const NodeId y = g.matmul(g.leaf("a", {2, 3}), g.leaf("b", {3, 1}));
  EXPECT_EQ(g.shape(y), (Shape{2, 1}));
  EXPECT_ERRC(g.matmul(g.leaf("c", {2, 3}), g.leaf("d", {2, 3})), Errc::shape_mismatch);
}

TEST(Forward, LogSoftmaxOfEqualLogits) {
  Graph<float> g;
  const NodeId y = g.log_softmax(g.leaf("x", {1, 2}));
  const Tensor<float> in({1, 2}, 0.0f);
  const auto& out = g.forward({{"x", std::cref(in)}}, y);
  EXPECT_NEAR(out[0], -std::log(2.0), 1e-6);
  EXPECT_NEAR(out[1], -std::log(2.0), 1e-6);
}

TEST(Forward, LogSoftmaxIsStableForLargeLogits) {
  Graph<float> g;
  const NodeId y = g.log_softmax(g.leaf("x", {1, 3}));
  const Tensor<float> in({1, 3}, std::vector<float>{1000, 1000, -1000});
  const auto& out = g.forward({{"x", std::cref(in)}}, y);
  EXPECT_NEAR(out[0], -std::log(2.0), 1e-5);
  EXPECT_TRUE(out.all_finite());
}

TEST(Forward, UnboundLeafAndShapeMismatch) {
  Graph<float> g;
  const NodeId x = g.leaf("x", {2});
  const NodeId y = g.relu(x);
  EXPECT_ERRC(g.forward({}, y), Errc::unbound_leaf);
  g.reset();
  const Tensor<float> wrong({3});
  EXPECT_ERRC(g.forward({{"x", std::cref(wrong)}}, y), Errc::shape_mismatch);
}

TEST(Forward, ShapeErrorsNameTheNode) {
  Graph<float> g;
  const NodeId a = g.leaf("a", {2, 3});
  const NodeId b = g.leaf("b", {4});
  try {
    g.add(a, b);
    FAIL() << "add accepted mismatched shapes";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("node #"), std::string::npos) << e.what();
  }
}

TEST(Forward, NodesAreTopologicallyOrdered) {
  auto c = gradcheck::random_grad_case(3, true);
  const Graph<double>& g = c->net.graph;
  for (NodeId id = 0; id < g.size(); ++id) {
    for (NodeId in : g.inputs(id)) EXPECT_LT(in, id);
  }
}

TEST(Forward, MaxpoolTiesGoToFirstIndex) {
  Graph<double> g;
  const NodeId x = g.leaf("x", {1, 2, 2}, true);
  const NodeId loss = g.sum(g.maxpool2d(x, 2));
  const Tensor<double> in({1, 2, 2}, 0.5);
  g.forward({{"x", std::cref(in)}}, loss);
  const auto grads = g.backward(loss);
  EXPECT_EQ(grads.at("x"), Tensor<double>({1, 2, 2}, std::vector<double>{1, 0, 0, 0}));
}

TEST(Backward, SquareAtThree) {
  Graph<double> g;
  const NodeId x = g.leaf("x", {}, true);
  const NodeId y = g.mul(x, x);
  const Tensor<double> in = Tensor<double>::scalar(3.0);
  g.forward({{"x", std::cref(in)}}, y);
  EXPECT_DOUBLE_EQ(g.backward(y).at("x").item(), 6.0);
}

TEST(Backward, InactiveReluHasZeroGradient) {
  Graph<double> g;
  const NodeId x = g.leaf("x", {}, true);
  const NodeId y = g.relu(x);
  const Tensor<double> in = Tensor<double>::scalar(-1.0);
  g.forward({{"x", std::cref(in)}}, y);
  EXPECT_EQ(g.backward(y).at("x").item(), 0.0);
}

TEST(Backward, SumsOverEveryPath) {
  // y = x·x + x at x = 2 → 2x + 1 = 5
  Graph<double> g;
  const NodeId x = g.leaf("x", {}, true);
  const NodeId y = g.add(g.mul(x, x), x);
  const Tensor<double> in = Tensor<double>::scalar(2.0);
  g.forward({{"x", std::cref(in)}}, y);
  EXPECT_DOUBLE_EQ(g.backward(y).at("x").item(), 5.0);
}

TEST(Backward, StateErrors) {
  Graph<double> g;
  const NodeId x = g.leaf("x", {2}, true);
  const NodeId r = g.relu(x);
  const NodeId s = g.sum(r);
  EXPECT_ERRC(g.backward(s), Errc::invalid_state);
  const Tensor<double> in({2}, 1.0);
  g.forward({{"x", std::cref(in)}}, r);
  EXPECT_ERRC(g.backward(r), Errc::shape_mismatch);
  g.reset();
  g.forward({{"x", std::cref(in)}}, s);
  g.backward(s);
  EXPECT_ERRC(g.backward(s), Errc::invalid_state);
  EXPECT_ERRC(g.forward({{"x", std::cref(in)}}, s), Errc::invalid_state);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto c = gradcheck::random_grad_case(seed, false);
    const CheckReport r = gradient_check(c->net.graph, c->bindings(), *c->net.loss, 1e-4);
    EXPECT_TRUE(r.passed) << "seed " << seed << " max rel " << r.max_rel_error;
  }
}

TEST(Conv2d, IdentityKernel) {
  Graph<float> g;
  const NodeId y = g.conv2d(g.leaf("x", {1, 3, 3}), g.leaf("k", {1, 1, 1, 1}));
  Tensor<float> x({1, 3, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1f * static_cast<float>(i);
  const Tensor<float> k({1, 1, 1, 1}, 1.0f);
  EXPECT_EQ(g.forward({{"x", std::cref(x)}, {"k", std::cref(k)}}, y), x);
}

TEST(Conv2d, AllOnesKernelSumsTheInput) {
  Graph<float> g;
  const NodeId y = g.conv2d(g.leaf("x", {1, 2, 2}), g.leaf("k", {1, 1, 2, 2}));
  const Tensor<float> x({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor<float> k({1, 1, 2, 2}, 1.0f);
  const auto& out = g.forward({{"x", std::cref(x)}, {"k", std::cref(k)}}, y);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 10.0f);
}

TEST(Conv2d, OutputShapeRule) {
  Graph<float> g;
  EXPECT_EQ(g.shape(g.conv2d(g.leaf("x", {1, 8, 8}), g.leaf("k", {4, 1, 3, 3}))), (Shape{4, 6, 6}));
  EXPECT_EQ(g.shape(g.conv2d(g.leaf("y", {2, 1, 8, 8}), g.leaf("j", {4, 1, 3, 3}), 2, 1)), (Shape{2, 4, 4, 4}));
}

TEST(Conv2d, IsCrossCorrelation) {
  Graph<float> g;
  const NodeId y = g.conv2d(g.leaf("x", {1, 1, 2}), g.leaf("k", {1, 1, 1, 2}));
  const Tensor<float> x({1, 1, 2}, std::vector<float>{1, 10});
  const Tensor<float> k({1, 1, 1, 2}, std::vector<float>{1, 0});
  EXPECT_EQ(g.forward({{"x", std::cref(x)}, {"k", std::cref(k)}}, y)[0], 1.0f);
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  Graph<float> g;
  EXPECT_ERRC(g.conv2d(g.leaf("x", {1, 2, 2}), g.leaf("k", {1, 1, 3, 3})), Errc::shape_mismatch);
  EXPECT_NO_THROW(g.conv2d(g.leaf("y", {1, 2, 2}), g.leaf("j", {1, 1, 3, 3}), 1, 1));
}

TEST(CrossEntropy, OneHotIsNegativeLogLikelihood) {
  Graph<double> g;
  const NodeId lp = g.log_softmax(g.leaf("z", {1, 3}));
  const NodeId loss = g.cross_entropy(lp, g.leaf("t", {1, 3}));
  const Tensor<double> z({1, 3}, std::vector<double>{0.2, 1.5, -0.3});
  const Tensor<double> t({1, 3}, std::vector<double>{0, 1, 0});
  const double got = g.forward({{"z", std::cref(z)}, {"t", std::cref(t)}}, loss).item();
  const double norm = std::exp(0.2) + std::exp(1.5) + std::exp(-0.3);
  EXPECT_NEAR(got, -std::log(std::exp(1.5) / norm), 1e-12);
}

TEST(CrossEntropy, UniformOverTenClasses) {
  Graph<double> g;
  const NodeId loss = g.cross_entropy(g.log_softmax(g.leaf("z", {2, 10})), g.leaf("t", {2, 10}));
  const Tensor<double> z({2, 10}, 0.0);
  const Tensor<double> t({2, 10}, 0.1);
  EXPECT_NEAR(g.forward({{"z", std::cref(z)}, {"t", std::cref(t)}}, loss).item(), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, SoftTargetHandValue) {
  Graph<double> g;
  const NodeId loss = g.cross_entropy(g.log_softmax(g.leaf("z", {1, 2})), g.leaf("t", {1, 2}));
  const Tensor<double> z({1, 2}, std::vector<double>{std::log(0.7), std::log(0.3)});
  const Tensor<double> t({1, 2}, 0.5);
  EXPECT_NEAR(g.forward({{"z", std::cref(z)}, {"t", std::cref(t)}}, loss).item(), 0.7803, 5e-5);
}

TEST(CrossEntropy, RejectsUnnormalizedTargets) {
  Graph<double> g;
  const NodeId loss = g.cross_entropy(g.log_softmax(g.leaf("z", {1, 2})), g.leaf("t", {1, 2}));
  const Tensor<double> z({1, 2}, 0.0);
  const Tensor<double> t({1, 2}, std::vector<double>{0.5, 0.6});
  EXPECT_ERRC(g.forward({{"z", std::cref(z)}, {"t", std::cref(t)}}, loss), Errc::not_normalized);
  EXPECT_ERRC(g.cross_entropy(g.log_softmax(g.leaf("y", {1, 2})), g.leaf("u", {1, 3})), Errc::shape_mismatch);
}

TEST(GradientCheck, QuadraticBowl) {
  Graph<double> g;
  const NodeId x = g.leaf("x", {5}, true);
  const NodeId f = g.sum(g.mul(x, x));
  const Tensor<double> in = random_tensor({5}, 4);
  EXPECT_TRUE(gradient_check(g, {{"x", std::cref(in)}}, f, 1e-6).passed);
}

TEST(GradientCheck, SmallCnn) {
  auto c = gradcheck::random_grad_case(21, true);
  const CheckReport r = gradient_check(c->net.graph, c->bindings(), *c->net.loss, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_FALSE(r.leaves.empty());
}

TEST(GradientCheck, CorruptedRuleIsCaught) {
  auto c = gradcheck::random_grad_case(22, false);
  c->net.graph.override_gradient(OpKind::relu, [](const Graph<double>& g, NodeId id, const Tensor<double>& up) {
    Tensor<double> wrong = up;
    const Tensor<double>& in = g.value(g.inputs(id)[0]);
    for (std::size_t i = 0; i < wrong.size(); ++i) wrong[i] = in[i] > 0 ? 0.5 * up[i] : up[i];
    return std::vector<Tensor<double>>{wrong};
  });
  EXPECT_FALSE(gradient_check(c->net.graph, c->bindings(), *c->net.loss, 1e-4).passed);
}

// Every primitive, in isolation, against central differences.
TEST(Primitives, MatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    {
      Probe p;
      const NodeId a = p.input("a", random_tensor({3, 4}, seed));
      const NodeId b = p.input("b", random_tensor({3, 4}, seed + 100));
      const NodeId bias = p.input("bias", random_tensor({4}, seed + 200));
      p.finish(p.g.add(p.g.sub(p.g.mul(a, b), a), bias), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "add/sub/mul seed " << seed;
    }
    {
      Probe p;
      const NodeId a = p.input("a", random_tensor({3, 4}, seed));
      const NodeId b = p.input("b", random_tensor({4, 2}, seed + 1));
      p.finish(p.g.matmul(a, b), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "matmul seed " << seed;
    }
    {
      Probe p;
      const NodeId x = p.input("x", random_tensor({2, 2, 5, 5}, seed));
      const NodeId k = p.input("k", random_tensor({3, 2, 3, 3}, seed + 1));
      p.finish(p.g.conv2d(x, k, 2, 1), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "conv2d seed " << seed;
    }
    {
      // Distinct values spaced well beyond the finite-difference step.
      Tensor<double> v({1, 2, 4, 4});
      std::vector<double> levels(v.size());
      for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = 0.05 * static_cast<double>(i);
      std::shuffle(levels.begin(), levels.end(), std::mt19937_64(seed));
      std::copy(levels.begin(), levels.end(), v.raw());
      Probe p;
      const NodeId x = p.input("x", v);
      p.finish(p.g.maxpool2d(x, 2), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "maxpool2d seed " << seed;
    }
    {
      Tensor<double> v = random_tensor({3, 5}, seed);
      nudge_from_zero(v);
      Probe p;
      const NodeId x = p.input("x", v);
      p.finish(p.g.relu(x), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "relu seed " << seed;
    }
    {
      Probe p;
      const NodeId x = p.input("x", random_tensor({2, 2, 3, 3}, seed));
      p.finish(p.g.flatten(x), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "flatten seed " << seed;
    }
    {
      Probe p;
      p.g.set_training(true);
      p.g.set_seed(seed);
      const NodeId x = p.input("x", random_tensor({4, 6}, seed));
      p.finish(p.g.dropout(x, 0.3), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "dropout seed " << seed;
    }
    {
      Probe p;
      const NodeId x = p.input("x", random_tensor({3, 5}, seed, -3, 3));
      p.finish(p.g.log_softmax(x), seed);
      EXPECT_LT(max_rel(p), 1e-4) << "log_softmax seed " << seed;
    }
    {
      Probe p;
      const NodeId z = p.input("z", random_tensor({3, 4}, seed, -2, 2));
      p.values.emplace("t", Tensor<double>({3, 4}, 0.25));
      const NodeId t = p.g.leaf("t", {3, 4});
      p.loss = p.g.scale(p.g.cross_entropy(p.g.log_softmax(z), t), 1.7);
      EXPECT_LT(max_rel(p), 1e-4) << "cross_entropy seed " << seed;
    }
  }
}

TEST(Properties, LogSoftmaxRowsExponentiateToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Graph<float> g;
    const NodeId y = g.log_softmax(g.leaf("x", {4, 7}));
    const Tensor<float> x = random_tensor({4, 7}, seed, -20, 20).cast<float>();
    const auto& out = g.forward({{"x", std::cref(x)}}, y);
    for (std::size_t r = 0; r < 4; ++r) {
      double mass = 0.0;
      for (std::size_t k = 0; k < 7; ++k) mass += std::exp(static_cast<double>(out[r * 7 + k]));
      EXPECT_NEAR(mass, 1.0, 1e-6);
    }
  }
}

TEST(Properties, ForwardIsBitwiseDeterministic) {
  auto a = gradcheck::random_grad_case(31, true);
  auto b = gradcheck::random_grad_case(31, true);
  const Tensor<double> first = a->net.graph.forward(a->bindings(), a->net.log_probs);
  const Tensor<double> second = b->net.graph.forward(b->bindings(), b->net.log_probs);
  EXPECT_EQ(first, second);

  auto m = gradcheck::random_grad_case(32, false);
  m->net.graph.set_training(true);
  m->net.graph.set_seed(99);
  const Tensor<double> d1 = m->net.graph.forward(m->bindings(), m->net.log_probs);
  m->net.graph.reset();
  const Tensor<double> d2 = m->net.graph.forward(m->bindings(), m->net.log_probs);
  EXPECT_EQ(d1, d2);
}

TEST(Properties, DropoutIsIdentityInEvaluation) {
  Graph<float> g;
  const NodeId y = g.dropout(g.leaf("x", {2, 5}), 0.5);
  const Tensor<float> x = random_tensor({2, 5}, 7).cast<float>();
  EXPECT_EQ(g.forward({{"x", std::cref(x)}}, y), x);
}

TEST(Properties, BackwardIsLinearInTheOutput) {
  for (std::uint64_t seed = 40; seed < 45; ++seed) {
    auto c = gradcheck::random_grad_case(seed, seed % 2 == 0);
    Graph<double>& g = c->net.graph;
    const NodeId scaled = g.scale(*c->net.loss, -2.5);
    g.forward(c->bindings(), *c->net.loss);
    const auto base = g.backward(*c->net.loss);
    g.reset();
    g.forward(c->bindings(), scaled);
    const auto grads = g.backward(scaled);
    for (const auto& [name, t] : base) {
      const Tensor<double>& s = grads.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(s[i], -2.5 * t[i], 1e-12 * (1 + std::abs(t[i])));
    }
  }
}

TEST(Properties, FloatGraphTracksDouble) {
  auto c = gradcheck::random_grad_case(50, true);
  Graph<double>& gd = c->net.graph;
  const Tensor<double> ref = gd.forward(c->bindings(), c->net.log_probs);
  auto gf = build_classifier_graph<float>(c->spec, ref.dim(0), {.with_loss = false});
  std::map<std::string, Tensor<float>, std::less<>> fv;
  for (const auto& [n, t] : c->values) fv.emplace(n, t.cast<float>());
  Bindings<float> fb;
  for (const auto& [n, t] : fv) fb.insert_or_assign(n, std::cref(t));
  gd.reset();
  gd.set_training(false);
  const Tensor<double> eval = gd.forward(c->bindings(), c->net.log_probs);
  const Tensor<float>& got = gf.graph.forward(fb, gf.log_probs);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], eval[i], 1e-5);
}
