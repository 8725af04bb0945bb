#include "sugar/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "sugar/archive.hpp"
#include "sugar/errors.hpp"
#include "sugar/optim.hpp"

namespace sugar {

namespace {

struct Stacked {
  Eigen::MatrixXd texts;  // all sets, stacked
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> positive;
};

Stacked stack_sets(const std::vector<Eigen::MatrixXd>& sets, Eigen::Index dim) {
  Eigen::Index total = 0;
  for (const auto& s : sets) {
    if (s.rows() == 0) throw BatchError("mil_nce: empty text set");
    if (s.cols() != dim) throw DimensionError("mil_nce: text dimension mismatch");
    total += s.rows();
  }
  Stacked out;
  out.texts.resize(total, dim);
  out.positive.setConstant(static_cast<Eigen::Index>(sets.size()), total, false);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    out.texts.middleRows(row, sets[i].rows()) = sets[i];
    out.positive.row(static_cast<Eigen::Index>(i)).segment(row, sets[i].rows()).setConstant(true);
    row += sets[i].rows();
  }
  return out;
}

}  // namespace

ad::Var mil_nce_loss(const ad::Var& pooled, const std::vector<Eigen::MatrixXd>& text_sets, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (static_cast<Eigen::Index>(text_sets.size()) != pooled.rows()) throw BatchError("one text set per sample required");
  Stacked st = stack_sets(text_sets, pooled.cols());
  ad::Var sim = ad::matmul_nt(pooled, ad::constant(std::move(st.texts)));
  return ad::mil_nce(sim, st.positive, temperature);
}

LossAndGrad mil_nce_loss_and_grad(const ContrastiveBatch& batch, double temperature) {
  ad::Var s = ad::variable(batch.skeleton_features);
  ad::Var loss = mil_nce_loss(s, batch.text_sets, temperature);
  ad::backward(loss);
  return {loss.scalar(), s.grad()};
}

double mil_nce_loss(const ContrastiveBatch& batch, double temperature) {
  return mil_nce_loss(ad::constant(batch.skeleton_features), batch.text_sets, temperature).scalar();
}

void TrainConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"temperature", temperature}, {"lr", lr},       {"momentum", momentum},
          {"weight_decay", weight_decay}, {"epochs", epochs}, {"batch_size", batch_size},
          {"lr_decay_factor", lr_decay_factor}, {"max_grad_norm", max_grad_norm}, {"seed", seed}, {"channel", to_string(channel)}};
}

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  if (epoch >= static_cast<int>(0.6 * cfg.epochs)) lr *= cfg.lr_decay_factor;
  if (epoch >= static_cast<int>(0.8 * cfg.epochs)) lr *= cfg.lr_decay_factor;
  return lr;
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch}, {"loss", loss}, {"retrieval_top1", retrieval_top1}, {"lr", lr}};
}

int retrieve_class(const Eigen::VectorXd& pooled, const std::vector<Eigen::MatrixXd>& class_sets) {
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < class_sets.size(); ++c) {
    const double score = (class_sets[c] * pooled).maxCoeff();
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::vector<EpochMetrics> pretrain(const std::vector<SkeletonSequence>& data, const ActionList& actions,
                                   const EmbeddingBank& bank, SkeletonEncoder& encoder, const TrainConfig& cfg,
                                   std::ostream* log) {
  cfg.validate();
  if (data.empty()) throw DatasetError("pretraining needs data");
  const bool contrastive = cfg.channel != KnowledgeChannel::none;

  // Resolve every label up front so a bad dataset fails before any update.
  std::set<int> present;
  for (const auto& seq : data) {
    if (!seq.label || *seq.label < 0 || *seq.label >= static_cast<int>(actions.size())) {
      throw DatasetError("sequence without a valid action label");
    }
    if (contrastive && !bank.contains(actions[static_cast<std::size_t>(*seq.label)])) {
      throw DatasetError("label '" + actions[static_cast<std::size_t>(*seq.label)] + "' missing from the embedding bank");
    }
    present.insert(*seq.label);
  }
  std::vector<Eigen::MatrixXd> class_sets(actions.size());
  if (contrastive) {
    for (int c : present) class_sets[static_cast<std::size_t>(c)] = bank.text_set(actions[static_cast<std::size_t>(c)], cfg.channel);
  }

  std::mt19937_64 rng(cfg.seed);
  const int d = encoder.config().representation_dim();
  const int num_classes = static_cast<int>(actions.size());
  ad::Parameter head_w("head.weight", Eigen::MatrixXd::Zero(d, num_classes));
  ad::Parameter head_b("head.bias", Eigen::MatrixXd::Zero(1, num_classes));
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < head_w.value.size(); ++i) head_w.value.data()[i] = u(rng);
  }

  ad::ParameterRefs params = encoder.parameters();
  if (!contrastive) {
    params.push_back(&head_w);
    params.push_back(&head_b);
  }
  SgdMomentum opt(params, cfg.lr, cfg.momentum, cfg.weight_decay);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochMetrics> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(scheduled_lr(cfg, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int correct = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const SkeletonSequence*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&data[order[i]]);
        labels.push_back(*data[order[i]].label);
      }
      opt.zero_grad();
      auto out = encoder.forward(batch);
      ad::Var loss;
      if (contrastive) {
        std::vector<Eigen::MatrixXd> sets;
        for (int l : labels) sets.push_back(class_sets[static_cast<std::size_t>(l)]);
        loss = mil_nce_loss(out.pooled, sets, cfg.temperature);
        for (std::size_t b = 0; b < labels.size(); ++b) {
          // Retrieval among the classes present in training.
          const Eigen::VectorXd s = out.pooled.value().row(static_cast<Eigen::Index>(b)).transpose();
          int best = -1;
          double best_score = -std::numeric_limits<double>::infinity();
          for (int c : present) {
            const double score = (class_sets[static_cast<std::size_t>(c)] * s).maxCoeff();
            if (score > best_score) {
              best_score = score;
              best = c;
            }
          }
          correct += best == labels[b];
        }
      } else {
        ad::Var logits = ad::add_row(ad::matmul(out.features, head_w.var()), head_b.var());
        loss = ad::softmax_cross_entropy(logits, labels);
        for (std::size_t b = 0; b < labels.size(); ++b) {
          Eigen::Index arg;
          logits.value().row(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
          correct += static_cast<int>(arg) == labels[b];
        }
      }
      ad::backward(loss);
      if (cfg.max_grad_norm > 0.0) clip_grad_norm(params, cfg.max_grad_norm);
      opt.step();
      loss_sum += loss.scalar();
      ++batches;
    }
    EpochMetrics m{epoch, loss_sum / batches, static_cast<double>(correct) / static_cast<double>(data.size()),
                   opt.lr()};
    if (log) *log << m.to_json().dump() << "\n";
    history.push_back(m);
  }
  auto enc_params = encoder.parameters();
  round_to_storage_precision(enc_params);
  return history;
}

double retrieval_accuracy(SkeletonEncoder& encoder, const std::vector<SkeletonSequence>& data,
                          const ActionList& actions, const EmbeddingBank& bank, KnowledgeChannel channel,
                          const std::vector<int>& candidates) {
  if (data.empty()) return 0.0;
  std::vector<Eigen::MatrixXd> sets;
  for (int c : candidates) sets.push_back(bank.text_set(actions[static_cast<std::size_t>(c)], channel));
  const auto reps = encoder.encode_all(data);
  int correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int pick = retrieve_class(reps[i].pooled, sets);
    correct += data[i].label && candidates[static_cast<std::size_t>(pick)] == *data[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace sugar
