#include "sugar/skeleton.hpp"

#include <cmath>

#include "sugar/errors.hpp"

namespace sugar {

SkeletonGraph SkeletonGraph::create(int num_joints, const std::vector<std::pair<int, int>>& edges,
                                    std::vector<std::string> joint_names) {
  if (num_joints <= 0) throw InvalidGraphError("skeleton graph needs at least one joint");
  SkeletonGraph g;
  g.num_joints_ = num_joints;
  g.adjacency_ = Eigen::MatrixXd::Identity(num_joints, num_joints);
  for (const auto& [a, b] : edges) {
    if (a < 0 || b < 0 || a >= num_joints || b >= num_joints) {
      throw InvalidGraphError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") outside [0, " +
                              std::to_string(num_joints) + ")");
    }
    if (a == b) continue;
    const auto key = std::minmax(a, b);
    if (g.adjacency_(a, b) == 0.0) g.edges_.emplace_back(key.first, key.second);
    g.adjacency_(a, b) = 1.0;
    g.adjacency_(b, a) = 1.0;
  }
  g.degree_ = g.adjacency_.rowwise().sum().asDiagonal();
  if (joint_names.empty()) {
    for (int i = 0; i < num_joints; ++i) joint_names.push_back("joint" + std::to_string(i));
  } else if (static_cast<int>(joint_names.size()) != num_joints) {
    throw InvalidGraphError("joint name count does not match joint count");
  }
  g.joint_names_ = std::move(joint_names);
  return g;
}

SkeletonGraph SkeletonGraph::toy() {
  return create(8, {{0, 1}, {1, 2}, {2, 3}, {2, 4}, {2, 5}, {0, 6}, {0, 7}},
                {"pelvis", "spine", "neck", "head", "left_wrist", "right_wrist", "left_ankle", "right_ankle"});
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> normalized_adjacency(const SkeletonGraph& graph) {
  if (graph.num_joints() <= 0) throw InvalidGraphError("normalized_adjacency on an empty graph");
  const Eigen::VectorXd inv_sqrt = graph.degree().diagonal().cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd out = inv_sqrt.asDiagonal() * graph.adjacency() * inv_sqrt.asDiagonal();
  return out.cast<Scalar>();
}

template Eigen::MatrixXd normalized_adjacency<double>(const SkeletonGraph&);
template Eigen::MatrixXf normalized_adjacency<float>(const SkeletonGraph&);

Eigen::MatrixXd toy_rest_pose() {
  Eigen::MatrixXd pose(8, 3);
  pose << 0.0, 0.0, 0.0,    //
      0.0, 0.5, 0.0,        //
      0.0, 1.0, 0.0,        //
      0.0, 1.25, 0.0,       //
      -0.5, 0.6, 0.0,       //
      0.5, 0.6, 0.0,        //
      -0.2, -0.9, 0.0,      //
      0.2, -0.9, 0.0;
  return pose;
}

void SkeletonSequence::validate() const {
  if (frames.rows() < 1) throw DatasetError("skeleton sequence needs at least one frame");
  if (joints <= 0 || channels <= 0 || frames.cols() != static_cast<Eigen::Index>(joints) * channels) {
    throw DatasetError("skeleton sequence layout does not match joints x channels");
  }
  if (!frames.allFinite()) throw DatasetError("skeleton sequence contains non-finite coordinates");
}

void SkeletonSequence::validate(const SkeletonGraph& graph) const {
  validate();
  if (joints != graph.num_joints()) {
    throw DatasetError("sequence has " + std::to_string(joints) + " joints, graph has " +
                       std::to_string(graph.num_joints()));
  }
}

bool SkeletonSequence::operator==(const SkeletonSequence& other) const {
  return joints == other.joints && channels == other.channels && label == other.label && subject == other.subject &&
         frames.rows() == other.frames.rows() && frames.cols() == other.frames.cols() && frames == other.frames;
}

SkeletonSequence center_on_root(const SkeletonSequence& seq, int root) {
  seq.validate();
  if (root < 0 || root >= seq.joints) throw DatasetError("root joint out of range");
  SkeletonSequence out = seq;
  for (int c = 0; c < seq.channels; ++c) {
    const float origin = seq.at(0, root, c);
    for (int v = 0; v < seq.joints; ++v) out.frames.col(v * seq.channels + c).array() -= origin;
  }
  return out;
}

}  // namespace sugar
