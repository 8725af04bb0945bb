#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sugar/archive.hpp"
#include "sugar/autograd.hpp"
#include "sugar/errors.hpp"
#include "sugar/skeleton.hpp"

namespace sugar {

struct EncoderConfig {
  std::vector<int> feature_dims{16, 32, 64};  // F per block
  std::vector<int> temporal_kernels{3, 5};    // one depthwise branch each
  int in_channels = 3;
  int projection_dim = 256;  // d_t
  double input_scale = 4.0;  // fixed gain on the mean-removed joint offsets

  int num_blocks() const { return static_cast<int>(feature_dims.size()); }
  int representation_dim() const { return feature_dims.empty() ? 0 : feature_dims.back(); }
  int max_kernel() const;
  /// Throws ConfigError.
  void validate() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

/// Encoder output for one sequence. `values` keeps every frame (L_s = T).
struct SkeletonRepresentation {
  Eigen::MatrixXd values;  // L_s x d
  Eigen::VectorXd pooled;  // d_t, unit norm

  int length() const { return static_cast<int>(values.rows()); }
};

/// One graph convolution: sigma(A_hat H W + b) applied per frame. H stacks
/// frames of V joint rows; an empty `bias` means none.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> gcn_block_forward(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& h,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& adjacency,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& weight,
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& bias = {}, bool activate = true) {
  const Eigen::Index v = adjacency.rows();
  if (adjacency.cols() != v || v == 0 || h.rows() % v != 0) {
    throw DimensionError("gcn_block_forward: rows must be whole frames of V joints");
  }
  if (h.cols() != weight.rows()) throw DimensionError("gcn_block_forward: H columns must match W rows");
  if (bias.size() != 0 && bias.size() != weight.cols()) throw DimensionError("gcn_block_forward: bias width");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> hw = h * weight;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(h.rows(), weight.cols());
  for (Eigen::Index f = 0; f < h.rows() / v; ++f) out.middleRows(f * v, v).noalias() = adjacency * hw.middleRows(f * v, v);
  if (bias.size() != 0) out.rowwise() += bias;
  if (activate) out = out.cwiseMax(Scalar(0));
  return out;
}

/// Parallel depthwise temporal convolutions ('same' padding, stride 1), one
/// per kernel (k x F each, k odd), summed, biased and activated. Rows of `x`
/// are ordered (frame, joint). Throws ConfigError when T is shorter than the
/// largest kernel.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> temporal_multiscale_forward(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& x, Eigen::Index frames, Eigen::Index joints,
    const std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>& kernels,
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& bias = {}, bool activate = true) {
  if (x.rows() != frames * joints) throw DimensionError("temporal_multiscale_forward: row layout mismatch");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(x.rows(), x.cols());
  for (const auto& w : kernels) {
    const Eigen::Index k = w.rows();
    if (k % 2 == 0) throw ConfigError("temporal kernel sizes must be odd");
    if (k > frames) throw ConfigError("sequence shorter than the largest temporal kernel");
    if (w.cols() != x.cols()) throw DimensionError("temporal kernel width must match channels");
    const Eigen::Index pad = k / 2;
    for (Eigen::Index t = 0; t < frames; ++t) {
      for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index src = t + j - pad;
        if (src < 0 || src >= frames) continue;
        out.middleRows(t * joints, joints).array() +=
            x.middleRows(src * joints, joints).array().rowwise() * w.row(j).array();
      }
    }
  }
  if (bias.size() != 0) out.rowwise() += bias;
  if (activate) out = out.cwiseMax(Scalar(0));
  return out;
}

/// Stacked graph-convolution blocks, each followed by multi-scale temporal
/// modeling, without temporal pooling; a projection head maps the
/// space-time mean into the text space.
class SkeletonEncoder {
 public:
  SkeletonEncoder(const EncoderConfig& config, const SkeletonGraph& graph, std::uint64_t seed = 0);

  struct Output {
    ad::Var values;    // (N*T) x d, rows ordered (sequence, frame)
    ad::Var features;  // N x d, temporal mean of values
    ad::Var pooled;    // N x d_t, unit rows
  };

  /// All sequences must have the same frame count.
  Output forward(const std::vector<const SkeletonSequence*>& batch);
  SkeletonRepresentation encode(const SkeletonSequence& seq);
  std::vector<SkeletonRepresentation> encode_all(const std::vector<SkeletonSequence>& seqs, int chunk = 32);

  const EncoderConfig& config() const { return config_; }
  const SkeletonGraph& graph() const { return graph_; }
  ad::ParameterRefs parameters();
  void set_trainable(bool trainable);

  ParameterArchive checkpoint() const;
  void save(const std::filesystem::path& path) const;
  /// Rebuilds config and graph from the archive header.
  static SkeletonEncoder load(const std::filesystem::path& path);

 private:
  struct Block {
    ad::Parameter gcn_weight;
    ad::Parameter gcn_bias;
    std::vector<ad::Parameter> kernels;
    ad::Parameter tcn_bias;
  };

  EncoderConfig config_;
  SkeletonGraph graph_;
  Eigen::MatrixXd adjacency_;
  std::vector<Block> blocks_;
  ad::Parameter proj_weight_;
  ad::Parameter proj_bias_;
};

/// Flattens sequences into rows ordered (sequence, frame, joint) with C
/// columns: root-centred, each joint's temporal mean removed, times `scale`.
Eigen::MatrixXd stack_joint_rows(const std::vector<const SkeletonSequence*>& batch, double scale = 1.0);

}  // namespace sugar
