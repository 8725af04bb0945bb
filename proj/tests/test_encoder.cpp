#include <doctest.h>

#include <filesystem>

#include "checks.hpp"
#include "sugar/encoder.hpp"
#include "sugar/errors.hpp"
#include "sugar/synthetic.hpp"

using namespace sugar;

namespace {

std::vector<SkeletonSequence> sequences(int frames) {
  SyntheticConfig cfg;
  cfg.samples_per_class = 1;
  cfg.frames = frames;
  return generate_synthetic_dataset(toy_action_specs(), cfg, SkeletonGraph::toy(), toy_rest_pose());
}

}  // namespace

TEST_CASE("encoder gradients match finite differences") {
  const auto g = sugar::testing::gradcheck_encoder();
  CHECK(g.model_parameters <= 5000);
  CHECK(g.result.max_relative_error < 1e-4);
}

TEST_CASE("encoder keeps every frame and emits unit pooled vectors") {
  EncoderConfig cfg;
  cfg.feature_dims = {8, 12};
  cfg.projection_dim = 10;
  SkeletonEncoder enc(cfg, SkeletonGraph::toy(), 1);
  const auto data = sequences(20);
  const auto rep = enc.encode(data[0]);
  CHECK(rep.length() == 20);
  CHECK(rep.values.cols() == 12);
  CHECK(rep.pooled.size() == 10);
  CHECK(rep.pooled.norm() == doctest::Approx(1.0));
  // Batched and single encoding agree.
  const auto all = enc.encode_all(data, 4);
  CHECK((all[0].values - rep.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("graph convolution template matches the hand formula") {
  const auto graph = SkeletonGraph::toy();
  const Eigen::MatrixXd a = normalized_adjacency(graph);
  const Eigen::MatrixXd h = sugar::testing::gaussian_matrix(2 * 8, 3, 1);
  const Eigen::MatrixXd w = sugar::testing::gaussian_matrix(3, 4, 2);
  const Eigen::RowVectorXd b = sugar::testing::gaussian_matrix(1, 4, 3);
  const Eigen::MatrixXd out = gcn_block_forward<double>(h, a, w, b, true);
  for (int t = 0; t < 2; ++t) {
    const Eigen::MatrixXd expect = ((a * h.middleRows(t * 8, 8) * w).rowwise() + b).cwiseMax(0.0);
    CHECK((out.middleRows(t * 8, 8) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("encoder checkpoints round-trip byte for byte") {
  EncoderConfig cfg;
  cfg.feature_dims = {4, 6};
  cfg.projection_dim = 8;
  SkeletonEncoder enc(cfg, SkeletonGraph::toy(), 9);
  const auto dir = std::filesystem::temp_directory_path() / "encoder_ckpt";
  std::filesystem::create_directories(dir);
  enc.save(dir / "a.sgb");
  SkeletonEncoder back = SkeletonEncoder::load(dir / "a.sgb");
  back.save(dir / "b.sgb");
  CHECK(std::filesystem::file_size(dir / "a.sgb") == std::filesystem::file_size(dir / "b.sgb"));
  const auto seqs = sequences(8);
  const auto x = enc.encode(seqs[1]);
  const auto y = back.encode(seqs[1]);
  // Stored as float32.
  CHECK((x.pooled - y.pooled).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(back.config().feature_dims == cfg.feature_dims);
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg;
  cfg.feature_dims = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.temporal_kernels = {4};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
