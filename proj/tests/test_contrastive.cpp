#include <doctest.h>

#include <cmath>

#include "checks.hpp"
#include "sugar/contrastive.hpp"
#include "sugar/errors.hpp"

using namespace sugar;

TEST_CASE("MIL-NCE matches the brute-force oracle on 100 random batches") {
  CHECK(sugar::testing::mil_nce_oracle_error(100) <= 1e-10);
}

TEST_CASE("MIL-NCE two-sample hand case") {
  CHECK(std::abs(sugar::testing::mil_nce_two_sample_case() - std::log(1.0 + std::exp(-1.0))) <= 1e-9);
}

TEST_CASE("MIL-NCE gradients match finite differences") {
  const auto g = sugar::testing::gradcheck_mil_nce();
  CHECK(g.result.max_relative_error < 1e-4);

  // The closed-form gradient agrees with the graph form.
  const auto batch = sugar::testing::random_contrastive_batch(5);
  const auto lg = mil_nce_loss_and_grad(batch, 0.2);
  ad::Parameter p("p", batch.skeleton_features);
  p.zero_grad();
  ad::backward(mil_nce_loss(p.var(), batch.text_sets, 0.2));
  CHECK((lg.grad - p.grad).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(lg.loss == doctest::Approx(sugar::testing::brute_force_mil_nce(batch, 0.2)).epsilon(1e-12));
}

TEST_CASE("MIL-NCE rejects bad input") {
  auto batch = sugar::testing::random_contrastive_batch(6);
  CHECK_THROWS_AS(mil_nce_loss(batch, 0.0), ConfigError);
  batch.text_sets[0] = Eigen::MatrixXd(0, 8);
  CHECK_THROWS_AS(mil_nce_loss(batch, 0.1), BatchError);
}

TEST_CASE("learning-rate schedule decays at 60 and 80 percent") {
  TrainConfig cfg;
  cfg.lr = 1.0;
  cfg.epochs = 10;
  CHECK(scheduled_lr(cfg, 5) == 1.0);
  CHECK(scheduled_lr(cfg, 6) == doctest::Approx(0.1));
  CHECK(scheduled_lr(cfg, 8) == doctest::Approx(0.01));
}

TEST_CASE("retrieval picks the class with the closest text") {
  Eigen::VectorXd s(2);
  s << 1.0, 0.0;
  Eigen::MatrixXd a(2, 2), b(1, 2);
  a << 0.0, 1.0, -1.0, 0.0;
  b << 0.8, 0.6;
  CHECK(retrieve_class(s, {a, b}) == 1);
}
