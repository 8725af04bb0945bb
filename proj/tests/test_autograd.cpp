#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "sugar/autograd.hpp"
#include "sugar/optim.hpp"
#include "sugar/skeleton.hpp"

using namespace sugar;
using sugar::testing::gaussian_matrix;
using sugar::testing::gradcheck;
using sugar::testing::random_projection_loss;

namespace {

ad::Parameter param(const std::string& name, Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  return {name, gaussian_matrix(r, c, seed)};
}

}  // namespace

TEST_CASE("elementwise and matrix ops match finite differences") {
  auto a = param("a", 4, 3, 1);
  auto b = param("b", 3, 5, 2);
  auto c = param("c", 4, 3, 3);
  auto row = param("row", 1, 3, 4);
  const ad::ParameterRefs ps{&a, &b, &c, &row};
  auto loss = [&] {
    ad::Var x = ad::add_row(ad::mul(a.var(), c.var()) + ad::scale(a.var(), 0.5) - c.var(), row.var());
    ad::Var y = ad::gelu(ad::matmul(x, b.var()));
    ad::Var z = ad::matmul_nt(y, ad::matmul(c.var(), b.var()));
    return random_projection_loss(ad::relu(z), 5) + ad::mean(y);
  };
  const auto r = gradcheck(ps, loss);
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("row manipulation ops match finite differences") {
  auto a = param("a", 6, 4, 11);
  auto t = param("table", 5, 4, 12);
  const ad::ParameterRefs ps{&a, &t};
  auto loss = [&] {
    ad::Var parts = ad::concat_rows({ad::slice_rows(a.var(), 1, 3), ad::gather_rows(t.var(), {4, 0, 4, 2})});
    ad::Var g = ad::mean_groups(parts, 7);
    return random_projection_loss(ad::l2_normalize_rows(parts), 13) + random_projection_loss(g, 14);
  };
  CHECK(gradcheck(ps, loss).max_relative_error < 1e-6);
}

TEST_CASE("layer norm and attention match finite differences") {
  auto x = param("x", 6, 8, 21);
  auto m = param("m", 10, 8, 22);
  auto g = param("g", 1, 8, 23);
  auto bta = param("b", 1, 8, 24);
  const ad::ParameterRefs ps{&x, &m, &g, &bta};
  for (bool causal : {false, true}) {
    auto loss = [&] {
      ad::Var xn = ad::layer_norm(x.var(), g.var(), bta.var());
      ad::Var self = ad::attention(xn, xn, xn, 2, causal, 2);
      ad::Var cross = ad::attention(xn, m.var(), m.var(), 4, false, 2);
      return random_projection_loss(self + cross, 25);
    };
    CHECK(gradcheck(ps, loss).max_relative_error < 1e-6);
  }
}

TEST_CASE("cross entropy ignores negative targets and matches finite differences") {
  auto logits = param("logits", 5, 7, 31);
  const std::vector<int> targets{3, -1, 0, 6, -1};
  const ad::ParameterRefs ps{&logits};
  auto loss = [&] { return ad::softmax_cross_entropy(logits.var(), targets); };
  CHECK(gradcheck(ps, loss).max_relative_error < 1e-6);

  // Mean over counted rows.
  double expected = 0.0;
  for (int r : {0, 2, 3}) {
    const Eigen::RowVectorXd row = logits.value.row(r);
    const double lse = std::log(row.array().exp().sum());
    expected += lse - row(targets[static_cast<std::size_t>(r)]);
  }
  CHECK(loss().scalar() == doctest::Approx(expected / 3.0).epsilon(1e-12));
}

TEST_CASE("graph aggregation and temporal convolution match finite differences") {
  const auto graph = SkeletonGraph::toy();
  const Eigen::MatrixXd adj = normalized_adjacency(graph);
  const int V = graph.num_joints();
  auto x = param("x", 2 * 5 * V, 3, 41);
  auto k = param("k", 3, 3, 42);
  const ad::ParameterRefs ps{&x, &k};
  auto loss = [&] {
    ad::Var h = ad::graph_aggregate(x.var(), adj);
    return random_projection_loss(ad::temporal_conv(h, k.var(), 2, 5, V), 43);
  };
  CHECK(gradcheck(ps, loss).max_relative_error < 1e-6);
}

TEST_CASE("no-grad guard builds constants") {
  auto a = param("a", 2, 2, 51);
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(a.var().requires_grad());
  }
  CHECK(a.var().requires_grad());
  a.trainable = false;
  CHECK_FALSE(a.var().requires_grad());
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  ad::Parameter a("a", Eigen::MatrixXd::Zero(1, 2));
  ad::Parameter b("b", Eigen::MatrixXd::Zero(1, 1));
  a.grad = Eigen::MatrixXd::Constant(1, 2, 3.0);
  b.grad = Eigen::MatrixXd::Constant(1, 1, 1.0);
  const double before = clip_grad_norm({&a, &b}, 1.0);
  CHECK(before == doctest::Approx(std::sqrt(19.0)));
  CHECK(std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm()) == doctest::Approx(1.0));
}

TEST_CASE("sgd momentum follows the heavy-ball recursion") {
  ad::Parameter p("p", Eigen::MatrixXd::Constant(1, 1, 1.0));
  SgdMomentum opt({&p}, 0.1, 0.9);
  p.grad = Eigen::MatrixXd::Constant(1, 1, 1.0);
  opt.step();
  CHECK(p.value(0, 0) == doctest::Approx(0.9));
  p.grad = Eigen::MatrixXd::Constant(1, 1, 1.0);
  opt.step();  // v = 1.9
  CHECK(p.value(0, 0) == doctest::Approx(0.9 - 0.19));
}

TEST_CASE("adam minimizes a quadratic") {
  ad::Parameter p("p", Eigen::MatrixXd::Constant(1, 3, 5.0));
  Adam opt({&p}, 0.1);
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::mul(p.var(), p.var())));
    opt.step();
  }
  CHECK(p.value.norm() < 1e-2);
}
