#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sugar/contrastive.hpp"
#include "sugar/encoder.hpp"
#include "sugar/knowledge.hpp"
#include "sugar/lm.hpp"
#include "sugar/recognizer.hpp"
#include "sugar/synthetic.hpp"
#include "sugar/tqp.hpp"

namespace sugar {

enum class ProtocolKind { closed_set, zero_shot_unseen, zero_shot_cross_list };
enum class SplitKind { by_subject, by_sample };

std::string to_string(ProtocolKind k);
ProtocolKind parse_protocol_kind(const std::string& s);
std::string to_string(SplitKind k);
SplitKind parse_split(const std::string& s);

/// closed_set: eval = train. zero_shot_unseen: eval and train disjoint; the
/// inference list is train followed by eval. zero_shot_cross_list: test
/// samples of the train classes, asked with `eval_classes` as the list,
/// which must contain every train class but differ from the train list.
struct Protocol {
  std::string id;
  ProtocolKind kind = ProtocolKind::closed_set;
  std::vector<std::string> train_classes;
  std::vector<std::string> eval_classes;
  SplitKind split = SplitKind::by_sample;
  int top_k = 5;

  /// Throws ProtocolError when an invariant of the kind is violated.
  void validate() const;
  /// Candidate list supplied to the recognizer at inference.
  std::vector<std::string> inference_list() const;
  /// Classes whose test samples are scored.
  std::vector<std::string> scored_classes() const;
  nlohmann::json to_json() const;
};

struct Metrics {
  double top1 = 0.0;
  double top5 = 0.0;
  double mean_per_class = 0.0;
  std::size_t count = 0;
  nlohmann::json to_json() const;
};

/// `ranked[i]` lists class indices best first (at least one entry),
/// `truth[i]` the true index. Top-5 uses the first min(5, |ranked[i]|)
/// entries. Mean per class averages the recall of every class that occurs
/// in `truth`. Throws DimensionError on mismatched or empty input.
Metrics compute_metrics(const std::vector<std::vector<int>>& ranked, const std::vector<int>& truth);

struct ResultRecord {
  std::string protocol_id;
  std::string variant;  // ablation row, empty for plain runs
  Metrics metrics;
  nlohmann::json extra = nlohmann::json::object();  // e.g. per-class recall, confusable-pair top-1
  std::string config_hash;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;

  /// Everything except the wall clock, with sorted keys.
  nlohmann::json canonical_json() const;
  nlohmann::json to_json() const;
};

/// Every setting that influences a run. Parsed from an INI manifest with
/// sections [data] [knowledge] [encoder] [tqp] [lm] [protocol] [output].
struct PipelineConfig {
  // [data]
  SyntheticConfig data;
  double confusable_delta = 0.05;
  int train_per_class = 50;  // the rest of each class is test
  // [knowledge]
  std::filesystem::path corpus;  // empty: bundled fixture corpus
  std::vector<int> scene_counts{5, 5, 4, 5, 4, 5};
  int text_dim = 256;
  std::uint64_t text_seed = 0;
  // [encoder]
  EncoderConfig encoder;
  TrainConfig pretrain;
  // [tqp]
  BridgeKind bridge = BridgeKind::tqp;
  TQPConfig tqp;
  // [lm]
  LMConfig lm;
  LMPretrainConfig lm_pretrain;
  FinetuneConfig finetune;
  // [protocol]
  Protocol protocol;
  std::uint64_t seed = 1;  // encoder, bridge, adapters and finetune order
  // [output]
  std::filesystem::path output_dir = "runs";
  std::filesystem::path cache_dir;  // empty: <output_dir>/cache

  /// Settings that determine results (not output locations).
  nlohmann::json to_json() const;
  std::string hash() const;
};

/// Throws ConfigError for malformed values or unknown keys.
PipelineConfig load_manifest(const std::filesystem::path& path);
PipelineConfig parse_manifest(const std::string& text);
/// Defaults for the six-class toy corpus.
PipelineConfig default_pipeline_config();

/// The toy data of a configuration: every class of the action list, split
/// by sample index or by subject.
struct ToyData {
  ActionList actions;
  std::vector<SkeletonSequence> train;
  std::vector<SkeletonSequence> test;
  std::vector<std::string> confusable;  // classes with a confusable partner
  std::string split_hash;               // fingerprint of the split contents
};
ToyData make_toy_data(const PipelineConfig& cfg);

/// Loads or generates the knowledge bank and its text embeddings.
struct KnowledgeBundle {
  KnowledgeBank knowledge;
  EmbeddingBank bank;
};
/// Uses the manifest's fixture corpus unless `generator` is given.
KnowledgeBundle make_knowledge(const PipelineConfig& cfg, const ActionList& actions,
                               GeneratorClient* generator = nullptr);

/// Encoder + recognizer ready for inference.
struct ModelBundle {
  SkeletonEncoder encoder;
  Recognizer recognizer;
};

/// Scores every test sample of the protocol's scored classes with the
/// protocol's inference list. Throws ProtocolError when a sample's class is
/// missing from that list. `confusable` names the confusable classes whose
/// top-1 is reported separately.
ResultRecord evaluate(const Protocol& protocol, ModelBundle& model, const std::vector<SkeletonSequence>& test,
                      const ActionList& dataset_actions, const std::vector<std::string>& confusable = {});

/// Train split restricted to the protocol's train classes, relabelled into
/// the train list. Throws ProtocolError if a held-out class slips in.
struct TrainingSet {
  ActionList actions;
  std::vector<SkeletonSequence> samples;
  std::vector<std::string> seen_classes;  // sorted
};
TrainingSet make_training_set(const PipelineConfig& cfg, const ToyData& data);

/// Pipeline stages. The base LM and the encoder are cached under the cache
/// directory, keyed by every setting they depend on.
ToyLM obtain_base_lm(const PipelineConfig& cfg, const KnowledgeBundle& kb, std::ostream* log = nullptr);
SkeletonEncoder obtain_encoder(const PipelineConfig& cfg, const ToyData& data, const KnowledgeBundle& kb,
                               const TrainingSet& train, std::ostream* log = nullptr);
Recognizer finetune_recognizer(const PipelineConfig& cfg, ToyLM base, SkeletonEncoder& encoder,
                               const TrainingSet& train, const KnowledgeBundle& kb, std::ostream* log = nullptr);

/// The toy protocols by name: closed_set (all six classes),
/// zero_shot_unseen (drink_can and dance held out) and zero_shot_cross_list
/// (trained on all six, asked with the list reversed).
Protocol builtin_protocol(const std::string& name, const ActionList& actions);

/// Artifacts of one pipeline run.
struct RunArtifacts {
  ResultRecord record;
  std::filesystem::path run_dir;
  std::vector<std::string> trained_labels;  // every class seen by a training stage
  double silhouette_init = 0.0;             // pooled test representations
  double silhouette_trained = 0.0;
};

/// Pretrains (or loads from cache) the base LM and the encoder, finetunes
/// the recognizer and evaluates. Writes checkpoints, training logs and the
/// result record into <output_dir>/<protocol id>-<config hash>/. Throws ProtocolError if
/// a training stage saw a class the protocol holds out.
RunArtifacts run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr, const std::string& variant = "");

/// Rows of an ablation differ only in the named setting.
std::vector<RunArtifacts> run_knowledge_ablation(const PipelineConfig& base, std::ostream* log = nullptr);
std::vector<RunArtifacts> run_bridge_ablation(const PipelineConfig& base, std::ostream* log = nullptr);
std::vector<RunArtifacts> run_token_length_sweep(const PipelineConfig& base, const std::vector<int>& lengths,
                                                 std::ostream* log = nullptr);

/// Appends records to <dir>/results.jsonl and rewrites <dir>/summary.csv,
/// each file replaced atomically.
void write_results(const std::filesystem::path& dir, const std::vector<ResultRecord>& records);

/// Mean silhouette over samples with Euclidean distance; samples of
/// singleton classes count as 0. Requires at least two classes.
double silhouette_score(const Eigen::MatrixXd& points, const std::vector<int>& labels);
/// Mean silhouette of each class's samples, indexed by label.
std::vector<double> per_class_silhouette(const Eigen::MatrixXd& points, const std::vector<int>& labels);

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 0.0;  // 0: max(n / early_exaggeration / 4, 50)
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::uint64_t seed = 0;
};

/// Exact t-SNE to two dimensions. Throws ConfigError when there are fewer
/// than perplexity + 1 points.
Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& points, const TsneConfig& cfg);

/// Writes "x,y,label" rows after a header carrying the silhouette of the
/// input representations overall and per class. Requires two classes.
void export_embeddings_2d(const Eigen::MatrixXd& points, const std::vector<int>& labels, const ActionList& actions,
                          const std::filesystem::path& out, const TsneConfig& cfg);

/// One-sided binomial test: P(X >= successes) for X ~ Bin(trials, p).
double binomial_p_value(int successes, int trials, double p);

}  // namespace sugar
