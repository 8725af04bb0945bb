#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sugar/autograd.hpp"
#include "sugar/encoder.hpp"

namespace sugar {

struct TQPConfig {
  int segment_length = 16;  // frames per segment; 0 = the whole sequence in one segment
  int query_length = 16;    // L
  int model_dim = 64;       // d
  int input_dim = 64;       // width of the skeleton representation
  int qformer_layers = 2;
  int heads = 4;
  int ffn_dim = 128;
  int lm_dim = 64;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static TQPConfig from_json(const nlohmann::json& j);
};

enum class BridgeKind { tqp, qformer, xattn, linear };

std::string to_string(BridgeKind kind);
/// Throws ConfigError for unknown names.
BridgeKind parse_bridge(const std::string& name);

struct ActionTokens {
  Eigen::MatrixXd tokens;  // L x lm_dim

  int length() const { return static_cast<int>(tokens.rows()); }
};

struct Segment {
  Eigen::MatrixXd values;  // segment_length x d, zero rows past `valid`
  int valid = 0;
};

/// Splits L_s rows into ceil(L_s / segment_length) segments in order; the
/// last one is zero-padded. Throws PreconditionError for L_s = 0.
std::vector<Segment> segment(const Eigen::MatrixXd& values, int segment_length);

/// Query/key/value/output projections of one multi-head attention; weights
/// are (in x out), applied as x W + b.
struct AttentionWeights {
  ad::Parameter wq, bq, wk, bk, wv, bv, wo, bo;

  AttentionWeights() = default;
  AttentionWeights(const std::string& prefix, int d_query, int d_memory, int d, std::mt19937_64& rng);
  void collect(ad::ParameterRefs& out);
};

/// Rows of `query` and `memory` are split into `groups` independent blocks.
ad::Var multi_head_attention(AttentionWeights& w, const ad::Var& query, const ad::Var& memory, int heads,
                             bool causal = false, Eigen::Index groups = 1);

struct QFormerLayer {
  AttentionWeights self_attn;
  AttentionWeights cross_attn;
  ad::Parameter ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  ad::Parameter ff1_w, ff1_b, ff2_w, ff2_b;

  QFormerLayer() = default;
  QFormerLayer(const std::string& prefix, const TQPConfig& cfg, std::mt19937_64& rng);
  void collect(ad::ParameterRefs& out);
};

/// Stack of Q-Former layers (post-norm): queries self-attend, cross-attend
/// to the memory rows, then pass a feed-forward net; each sub-block has a
/// residual connection and layer normalization.
class QFormer {
 public:
  QFormer() = default;
  QFormer(const TQPConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "qformer.");

  /// query: (groups*L) x d, memory: (groups*M) x input_dim.
  ad::Var step(const ad::Var& query, const ad::Var& memory, Eigen::Index groups = 1);
  ad::ParameterRefs parameters();
  std::vector<QFormerLayer>& layers() { return layers_; }

 private:
  int heads_ = 1;
  std::vector<QFormerLayer> layers_;
};

/// Maps skeleton representations to action tokens for the language model.
class Bridge {
 public:
  /// Every bridge layer-normalizes its input rows; `prefix` names those
  /// parameters.
  Bridge(TQPConfig cfg, const std::string& prefix);
  virtual ~Bridge() = default;

  virtual BridgeKind kind() const = 0;
  /// `values` holds `batch` representations of equal length, rows ordered
  /// (sample, frame). Returns (batch * token_count) x lm_dim.
  virtual ad::Var forward(const ad::Var& values, Eigen::Index batch) = 0;
  virtual int token_count(int input_length) const = 0;
  virtual ad::ParameterRefs parameters() = 0;

  ActionTokens project(const SkeletonRepresentation& rep);
  const TQPConfig& config() const { return cfg_; }
  void set_trainable(bool trainable);

  /// Fixed per-channel input standardization, fitted on every frame of the
  /// given representations; identity until fitted. Channels with a standard
  /// deviation below 1e-3 of the largest are floored there.
  void fit_input_statistics(const std::vector<SkeletonRepresentation>& reps);
  /// Non-trainable state saved alongside parameters().
  ad::ParameterRefs buffers() { return {&in_mean_, &in_scale_}; }

 protected:
  /// Checks the (batch * length) x input_dim shape, standardizes and
  /// applies the input norm.
  ad::Var normalize_input(const ad::Var& values, Eigen::Index batch);

  TQPConfig cfg_;
  ad::Parameter in_mean_, in_scale_;  // scale = 1 / std
  ad::Parameter in_ln_g_, in_ln_b_;
};

/// Chained, weight-shared Q-Former passes: s_0 = q, s_i = QFormer(s_{i-1},
/// segment_i), then a linear map d -> lm_dim. segment_length = 0 gives the
/// single Q-Former over the whole sequence.
class TemporalQueryProjection : public Bridge {
 public:
  TemporalQueryProjection(const TQPConfig& cfg, std::uint64_t seed, BridgeKind kind = BridgeKind::tqp);

  BridgeKind kind() const override { return kind_; }
  ad::Var forward(const ad::Var& values, Eigen::Index batch) override;
  int token_count(int) const override { return cfg_.query_length; }
  ad::ParameterRefs parameters() override;

  QFormer& qformer() { return qformer_; }
  ad::Parameter& queries() { return queries_; }
  ad::Parameter& out_weight() { return out_w_; }
  ad::Parameter& out_bias() { return out_b_; }

 private:
  BridgeKind kind_;
  ad::Parameter queries_;
  QFormer qformer_;
  ad::Parameter out_w_, out_b_;
};

/// One cross-attention block from learned queries to the whole sequence.
class CrossAttentionBridge : public Bridge {
 public:
  CrossAttentionBridge(const TQPConfig& cfg, std::uint64_t seed);

  BridgeKind kind() const override { return BridgeKind::xattn; }
  ad::Var forward(const ad::Var& values, Eigen::Index batch) override;
  int token_count(int) const override { return cfg_.query_length; }
  ad::ParameterRefs parameters() override;

 private:
  ad::Parameter queries_;
  AttentionWeights attn_;
  ad::Parameter ln_g_, ln_b_;
  ad::Parameter out_w_, out_b_;
};

/// Per-frame linear map: one token per input frame.
class LinearBridge : public Bridge {
 public:
  LinearBridge(const TQPConfig& cfg, std::uint64_t seed);

  BridgeKind kind() const override { return BridgeKind::linear; }
  ad::Var forward(const ad::Var& values, Eigen::Index batch) override;
  int token_count(int input_length) const override { return input_length; }
  ad::ParameterRefs parameters() override;

 private:
  ad::Parameter w_, b_;
};

std::unique_ptr<Bridge> make_bridge(BridgeKind kind, const TQPConfig& cfg, std::uint64_t seed);

}  // namespace sugar
