#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <ostream>
#include <vector>

#include "sugar/autograd.hpp"
#include "sugar/encoder.hpp"
#include "sugar/knowledge.hpp"
#include "sugar/text_encoder.hpp"

namespace sugar {

struct ContrastiveBatch {
  Eigen::MatrixXd skeleton_features;       // B x d_t, unit rows s_i
  std::vector<Eigen::MatrixXd> text_sets;  // per sample, unit rows t_{i,n}
};

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d skeleton_features
};

/// MIL-NCE: -(1/B) sum_i log( sum_{n in pos(i)} exp(s_i.t_{i,n}/tau) /
/// sum_k sum_n exp(s_i.t_{k,n}/tau) ). The denominator pools every sample's
/// set, so two samples of one class contribute their set twice.
/// Throws ConfigError for tau <= 0, BatchError for an empty set.
double mil_nce_loss(const ContrastiveBatch& batch, double temperature);
LossAndGrad mil_nce_loss_and_grad(const ContrastiveBatch& batch, double temperature);

/// Differentiable form used in training; `pooled` is B x d_t.
ad::Var mil_nce_loss(const ad::Var& pooled, const std::vector<Eigen::MatrixXd>& text_sets, double temperature);

struct TrainConfig {
  double temperature = 0.07;
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 30;
  int batch_size = 32;
  double lr_decay_factor = 0.1;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  /// `none` trains with a linear classification head and cross entropy.
  KnowledgeChannel channel = KnowledgeChannel::both;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Learning rate of an epoch: decayed once at 60% and again at 80%.
double scheduled_lr(const TrainConfig& cfg, int epoch);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double retrieval_top1 = 0.0;  // on the training batches of the epoch
  double lr = 0.0;

  nlohmann::json to_json() const;
};

/// Trains `encoder` in place. Sequence labels index `actions`; every label
/// must have an entry in `bank` (DatasetError otherwise, before any step).
/// Each epoch's metrics are appended to `log` as one JSON line if given.
std::vector<EpochMetrics> pretrain(const std::vector<SkeletonSequence>& data, const ActionList& actions,
                                   const EmbeddingBank& bank, SkeletonEncoder& encoder, const TrainConfig& cfg,
                                   std::ostream* log = nullptr);

/// Nearest class by maximum similarity to any vector in its text set.
int retrieve_class(const Eigen::VectorXd& pooled, const std::vector<Eigen::MatrixXd>& class_sets);

/// Fraction of `data` whose retrieved class (among `candidates`, indices
/// into `actions`) equals the label.
double retrieval_accuracy(SkeletonEncoder& encoder, const std::vector<SkeletonSequence>& data,
                          const ActionList& actions, const EmbeddingBank& bank, KnowledgeChannel channel,
                          const std::vector<int>& candidates);

}  // namespace sugar
