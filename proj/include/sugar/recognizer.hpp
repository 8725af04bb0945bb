#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "sugar/encoder.hpp"
#include "sugar/knowledge.hpp"
#include "sugar/lm.hpp"
#include "sugar/text_encoder.hpp"
#include "sugar/tqp.hpp"

namespace sugar {

/// "[action]" marks the action-token slot, "[action list]" the candidates.
inline constexpr const char* kInstructionTemplate =
    "Given a sequence of action tokens [action] , please choose the most compatible action from [action list] .";

std::string render_instruction(const std::vector<std::string>& action_list,
                               const std::string& tmpl = kInstructionTemplate);

/// "<class> . <brief description>"
std::string target_text(const std::string& action, const std::string& brief);

/// Specials, template words, action names and every whitespace token of
/// the knowledge texts.
Vocab build_vocab(const ActionList& actions, const KnowledgeBank& knowledge,
                  const std::string& tmpl = kInstructionTemplate);

struct InstructionSample {
  std::string instruction;  // rendered, contains exactly one <ACT>
  ad::Var action_tokens;    // L x lm_dim
  std::string target;       // may be empty at inference
};

struct AssembledInput {
  ad::Var embeddings;        // T x lm_dim, positions applied
  std::vector<int> ids;      // token id per position, <ACT> for spliced rows
  std::vector<int> targets;  // next-token id on target positions, else -1
  int prompt_length = 0;     // positions before the first target token
  int act_offset = 0;
  int act_length = 0;
};

/// <BOS> instruction (with the <ACT> slot replaced by the action tokens)
/// followed by the target tokens and <EOS> when a target is given. Throws
/// VocabError for unknown words or a missing/duplicate slot.
AssembledInput assemble_input(ToyLM& lm, const InstructionSample& sample);

/// Bridge + language model; the encoder stays outside and frozen.
class Recognizer {
 public:
  Recognizer(ToyLM lm, std::unique_ptr<Bridge> bridge);

  ToyLM& lm() { return lm_; }
  Bridge& bridge() { return *bridge_; }

  struct Prediction {
    std::vector<std::string> ranked;  // top_k class names, best first
    std::vector<double> scores;       // matching length-normalized log-probabilities
    std::string description;          // greedy continuation after "<top-1> ."
  };

  /// Length-normalized log-probability of every candidate name given the
  /// prompt, in list order.
  std::vector<double> score_classes(const ActionTokens& tokens, const ActionList& list);
  /// Throws ConfigError for an empty list or top_k outside [1, |list|].
  Prediction predict(const ActionTokens& tokens, const ActionList& list, int top_k, bool describe = true,
                     int max_description_tokens = 24);
  Prediction predict(const SkeletonRepresentation& rep, const ActionList& list, int top_k, bool describe = true);

  /// LoRA + bridge parameters with a header recording their configuration.
  ParameterArchive adapter_archive();
  void save_adapters(const std::filesystem::path& path);
  /// Rebuilds the bridge and adapters described by the archive on top of `lm`.
  static Recognizer load(ToyLM lm, const std::filesystem::path& adapters);

 private:
  ToyLM lm_;
  std::unique_ptr<Bridge> bridge_;
};

/// Fixed random map from the text space into the LM embedding space; the
/// base LM learns to read action-token slots filled with mapped text
/// embeddings, standing in for the language prior of a pretrained LLM.
Eigen::MatrixXd slot_projection(int text_dim, int lm_dim, std::uint64_t seed);

struct LMPretrainConfig {
  int steps = 400;
  int batch_size = 16;
  double lr = 3e-3;
  std::vector<int> slot_lengths{1, 4, 16, 64};
  double slot_noise = 0.1;   // per-token noise in the LM space
  double text_noise = 0.1;   // per-sample noise scale in the text space, drawn from U(0, value)
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

/// Trains a fresh base LM on instruction/answer pairs for every action of
/// the knowledge bank. Slots hold projected, bank-centred text embeddings,
/// the geometry a contrastively aligned skeleton embedding lives in.
ToyLM pretrain_base_lm(const KnowledgeBank& knowledge, const EmbeddingBank& bank, const LMConfig& lm_cfg,
                       const LMPretrainConfig& cfg, std::ostream* log = nullptr);

struct FinetuneConfig {
  LoraConfig lora;
  double lr = 1e-3;
  double bridge_lr = 0.0;  // 0 uses `lr`
  int epochs = 10;
  int batch_size = 16;
  bool train_bridge = true;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct FinetuneEpoch {
  int epoch = 0;
  double loss = 0.0;
  nlohmann::json to_json() const;
};

/// Next-token cross entropy on the target positions only; the base LM is
/// frozen, LoRA (attached here if absent) and optionally the bridge train.
/// `labels` index `list`, which is also the action list of the instruction.
std::vector<FinetuneEpoch> finetune(Recognizer& recognizer, const std::vector<SkeletonRepresentation>& reps,
                                    const std::vector<int>& labels, const ActionList& list,
                                    const KnowledgeBank& knowledge, const FinetuneConfig& cfg,
                                    std::ostream* log = nullptr);

}  // namespace sugar
