#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace sugar {

/// Joint graph with self-loops. Immutable after construction.
class SkeletonGraph {
 public:
  /// Throws InvalidGraphError for V = 0 or an out-of-range edge endpoint.
  static SkeletonGraph create(int num_joints, const std::vector<std::pair<int, int>>& edges,
                              std::vector<std::string> joint_names = {});

  /// Eight-joint tree: pelvis-spine-neck-head chain, wrists hanging off the
  /// neck and ankles off the pelvis. Joint 0 (pelvis) is the root.
  static SkeletonGraph toy();

  int num_joints() const { return num_joints_; }
  const std::vector<std::pair<int, int>>& edges() const { return edges_; }
  const Eigen::MatrixXd& adjacency() const { return adjacency_; }
  const Eigen::MatrixXd& degree() const { return degree_; }
  const std::vector<std::string>& joint_names() const { return joint_names_; }

 private:
  int num_joints_ = 0;
  std::vector<std::pair<int, int>> edges_;
  Eigen::MatrixXd adjacency_;
  Eigen::MatrixXd degree_;
  std::vector<std::string> joint_names_;
};

/// D^{-1/2} A D^{-1/2}, with A carrying self-loops.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> normalized_adjacency(const SkeletonGraph& graph);

/// Rest pose of the toy graph, V x 3.
Eigen::MatrixXd toy_rest_pose();

using FrameArray = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// T x V x C coordinates, stored as a T x (V*C) row-major float array so the
/// memory order matches the on-disk order (frame, joint, channel).
struct SkeletonSequence {
  FrameArray frames;
  int joints = 0;
  int channels = 3;
  std::optional<int> label;
  std::optional<int> subject;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  float at(int t, int v, int c) const { return frames(t, v * channels + c); }
  float& at(int t, int v, int c) { return frames(t, v * channels + c); }

  /// T >= 1, layout consistent, all values finite. Throws DatasetError.
  void validate() const;
  /// Also checks V against the graph.
  void validate(const SkeletonGraph& graph) const;

  bool operator==(const SkeletonSequence& other) const;
};

/// Translates every frame so the root joint of frame 0 sits at the origin.
SkeletonSequence center_on_root(const SkeletonSequence& seq, int root = 0);

}  // namespace sugar
