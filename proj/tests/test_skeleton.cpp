#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sugar/errors.hpp"
#include "sugar/skeleton.hpp"
#include "sugar/skeleton_io.hpp"
#include "sugar/synthetic.hpp"

using namespace sugar;

TEST_CASE("toy graph normalized adjacency is symmetric with unit spectral radius") {
  const auto g = SkeletonGraph::toy();
  REQUIRE(g.num_joints() == 8);
  const Eigen::MatrixXd a = normalized_adjacency(g);
  CHECK((a - a.transpose()).norm() < 1e-15);
  // D^-1/2 A D^-1/2 of a connected graph with self-loops has largest eigenvalue 1.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  CHECK(es.eigenvalues().maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
  for (int i = 0; i < 8; ++i) {
    CHECK(g.adjacency()(i, i) == 1.0);
    CHECK(g.degree()(i, i) == doctest::Approx(g.adjacency().row(i).sum()));
  }
}

TEST_CASE("graph construction rejects bad input") {
  CHECK_THROWS_AS(SkeletonGraph::create(0, {}), InvalidGraphError);
  CHECK_THROWS_AS(SkeletonGraph::create(3, {{0, 3}}), InvalidGraphError);
}

TEST_CASE("sequence validation") {
  SkeletonSequence s;
  s.joints = 8;
  s.frames = FrameArray::Zero(4, 24);
  CHECK_NOTHROW(s.validate(SkeletonGraph::toy()));
  s.frames(1, 2) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(s.validate(), DatasetError);
  s.frames = FrameArray::Zero(0, 24);
  CHECK_THROWS_AS(s.validate(), DatasetError);
  s.frames = FrameArray::Zero(3, 21);
  CHECK_THROWS_AS(s.validate(SkeletonGraph::toy()), DatasetError);
}

TEST_CASE("root centring moves the first root joint to the origin") {
  SkeletonSequence s;
  s.joints = 2;
  s.frames = FrameArray(2, 6);
  s.frames << 1, 2, 3, 4, 5, 6, 2, 3, 4, 5, 6, 7;
  const auto c = center_on_root(s);
  CHECK(c.at(0, 0, 0) == 0.0f);
  CHECK(c.at(0, 0, 2) == 0.0f);
  CHECK(c.at(1, 1, 0) == 4.0f);
}

TEST_CASE("skeleton files round-trip and reject corruption") {
  SyntheticConfig cfg;
  cfg.samples_per_class = 2;
  cfg.frames = 12;
  const auto data = generate_synthetic_dataset(toy_action_specs(), cfg, SkeletonGraph::toy(), toy_rest_pose());
  const auto path = std::filesystem::temp_directory_path() / "skeleton_roundtrip.skl";
  write_skeleton_file(path, data);
  const auto back = read_skeleton_file(path);
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(back[i] == data[i]);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(read_skeleton_file(path), FormatError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(read_skeleton_file(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic data is deterministic and labelled in spec order") {
  SyntheticConfig cfg;
  cfg.samples_per_class = 3;
  cfg.frames = 16;
  const auto specs = toy_action_specs();
  const auto a = generate_synthetic_dataset(specs, cfg, SkeletonGraph::toy(), toy_rest_pose());
  const auto b = generate_synthetic_dataset(specs, cfg, SkeletonGraph::toy(), toy_rest_pose());
  REQUIRE(a.size() == specs.size() * 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == b[i]);
    CHECK(*a[i].label == static_cast<int>(i / 3));
  }
  cfg.seed += 1;
  const auto c = generate_synthetic_dataset(specs, cfg, SkeletonGraph::toy(), toy_rest_pose());
  CHECK_FALSE(a[0] == c[0]);
}

TEST_CASE("confusable pairs are close in parameter space and others are far") {
  const double delta = 0.05;
  const auto specs = toy_action_specs(delta);
  CHECK_NOTHROW(validate_confusable_pairs(specs, 2 * delta));
  int pairs = 0;
  for (const auto& s : specs) {
    if (!s.confusable_with) continue;
    ++pairs;
    for (const auto& t : specs) {
      if (t.class_name == *s.confusable_with) CHECK(parameter_linf_distance(s, t) <= 2 * delta);
    }
  }
  CHECK(pairs >= 2);
}
