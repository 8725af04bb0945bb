#include <doctest.h>

#include "checks.hpp"
#include "sugar/errors.hpp"
#include "sugar/tqp.hpp"

using namespace sugar;

TEST_CASE("Q-Former and TQP gradients match finite differences") {
  const auto q = sugar::testing::gradcheck_qformer();
  CHECK(q.model_parameters <= 5000);
  CHECK(q.result.max_relative_error < 1e-4);
  const auto t = sugar::testing::gradcheck_tqp();
  CHECK(t.model_parameters <= 5000);
  CHECK(t.result.max_relative_error < 1e-4);
}

TEST_CASE("TQP emits query_length tokens for any sequence length") {
  for (int frames : {10, 64, 1000}) CHECK(sugar::testing::tqp_output_length(frames) == 16);
  CHECK(sugar::testing::tqp_output_length(7, 1) == 1);
}

TEST_CASE("single-segment TQP equals the plain Q-Former bit for bit") {
  CHECK(sugar::testing::single_segment_tqp_matches_qformer());
}

TEST_CASE("segmentation pads the last segment") {
  const Eigen::MatrixXd v = sugar::testing::gaussian_matrix(10, 3, 1);
  const auto segs = segment(v, 4);
  REQUIRE(segs.size() == 3);
  CHECK(segs[2].valid == 2);
  CHECK(segs[2].values.rows() == 4);
  CHECK(segs[2].values.bottomRows(2).isZero());
  CHECK(segs[1].values == v.middleRows(4, 4));
  CHECK_THROWS_AS(segment(Eigen::MatrixXd(0, 3), 4), PreconditionError);
}

TEST_CASE("bridges: token counts, batching and input statistics") {
  TQPConfig cfg;
  cfg.input_dim = 6;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.heads = 2;
  cfg.lm_dim = 5;
  cfg.query_length = 3;
  cfg.segment_length = 4;
  for (auto kind : {BridgeKind::tqp, BridgeKind::qformer, BridgeKind::xattn, BridgeKind::linear}) {
    auto bridge = make_bridge(kind, cfg, 2);
    SkeletonRepresentation a, b;
    a.values = sugar::testing::gaussian_matrix(9, 6, 3);
    b.values = sugar::testing::gaussian_matrix(9, 6, 4);
    bridge->fit_input_statistics({a, b});
    const auto ta = bridge->project(a).tokens;
    CHECK(ta.rows() == bridge->token_count(9));
    CHECK(ta.cols() == 5);
    // A batch of two equals the two single passes.
    Eigen::MatrixXd stacked(18, 6);
    stacked << a.values, b.values;
    ad::NoGradGuard guard;
    const Eigen::MatrixXd both = bridge->forward(ad::constant(stacked), 2).value();
    CHECK((both.topRows(ta.rows()) - ta).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((both.bottomRows(ta.rows()) - bridge->project(b).tokens).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(parse_bridge(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(parse_bridge("mlp"), ConfigError);
}

TEST_CASE("TQP config validation") {
  TQPConfig cfg;
  cfg.query_length = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.heads = 3;  // 64 not divisible by 3
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
