#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sugar/archive.hpp"
#include "sugar/autograd.hpp"
#include "sugar/errors.hpp"

namespace sugar {

/// Whitespace vocabulary. Ids 0..2 are <BOS>, <EOS> and the <ACT> slot.
class Vocab {
 public:
  static constexpr const char* kBos = "<BOS>";
  static constexpr const char* kEos = "<EOS>";
  static constexpr const char* kAct = "<ACT>";

  Vocab() = default;
  /// Specials are prepended; duplicates and specials in `words` are skipped.
  explicit Vocab(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  /// Throws VocabError for unknown tokens.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  int bos() const { return 0; }
  int eos() const { return 1; }
  int act() const { return 2; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Splits on whitespace only.
std::vector<std::string> whitespace_tokens(const std::string& text);

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets{"wq", "wk", "wv", "wo"};

  double scaling() const { return alpha / static_cast<double>(rank); }
  nlohmann::json to_json() const;
  static LoraConfig from_json(const nlohmann::json& j);
};

/// Throws ConfigError unless 1 <= rank <= min(d_in, d_out) and alpha > 0.
void validate_lora(int rank, double alpha, Eigen::Index d_in, Eigen::Index d_out);

/// Row-batched LoRA linear map: x W^T + (alpha / r) (x A^T) B^T, with W
/// d_out x d_in, A r x d_in, B d_out x r; each row of x is one input.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> lora_forward(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& x,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& w_base,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& a,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& b, Scalar alpha) {
  const auto rank = a.rows();
  validate_lora(static_cast<int>(rank), static_cast<double>(alpha), w_base.cols(), w_base.rows());
  if (a.cols() != w_base.cols() || b.rows() != w_base.rows() || b.cols() != rank || x.cols() != w_base.cols()) {
    throw DimensionError("lora_forward: shape mismatch");
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out = x * w_base.transpose();
  out.noalias() += (alpha / static_cast<Scalar>(rank)) * ((x * a.transpose()) * b.transpose());
  return out;
}

/// Linear layer with an optional low-rank adapter.
struct AdaptedLinear {
  ad::Parameter weight;  // d_out x d_in
  ad::Parameter bias;    // 1 x d_out
  ad::Parameter lora_a;  // r x d_in, empty when detached
  ad::Parameter lora_b;  // d_out x r
  double scaling = 0.0;

  bool adapted() const { return lora_a.value.size() != 0; }
  ad::Var forward(const ad::Var& x);
};

struct LMConfig {
  int layers = 4;
  int heads = 4;
  int dim = 64;
  int mlp_dim = 128;
  int max_positions = 192;

  void validate() const;
  nlohmann::json to_json() const;
  static LMConfig from_json(const nlohmann::json& j);
};

/// Small pre-norm decoder-only transformer with learned positions and an
/// untied output head.
class ToyLM {
 public:
  ToyLM() = default;
  ToyLM(Vocab vocab, const LMConfig& cfg, std::uint64_t seed);

  const Vocab& vocab() const { return vocab_; }
  const LMConfig& config() const { return cfg_; }

  /// Token embeddings for `ids` (no positions).
  ad::Var embed(const std::vector<int>& ids);
  /// Adds positional embeddings to `batch` sequences of equal length.
  ad::Var add_positions(const ad::Var& x, Eigen::Index batch);
  /// x: (batch * T) x dim with positions applied. Returns logits
  /// (batch * T) x vocab, causal within each sequence.
  ad::Var forward(const ad::Var& x, Eigen::Index batch);

  void attach_lora(const LoraConfig& cfg, std::uint64_t seed);
  void detach_lora();
  bool has_lora() const { return lora_.has_value(); }
  const LoraConfig& lora_config() const;

  ad::ParameterRefs base_parameters();
  ad::ParameterRefs lora_parameters();
  void set_base_trainable(bool trainable);
  /// FNV-1a over the raw bytes of every base parameter.
  std::uint64_t base_checksum();

  ParameterArchive base_archive();
  void save_base(const std::filesystem::path& path);
  static ToyLM load_base(const std::filesystem::path& path);
  ParameterArchive adapter_archive();
  void load_adapters(const ParameterArchive& archive);

  /// Direct access for tests.
  struct Layer {
    ad::Parameter ln1_g, ln1_b;
    AdaptedLinear wq, wk, wv, wo;
    ad::Parameter ln2_g, ln2_b;
    AdaptedLinear fc1, fc2;
  };
  std::vector<Layer>& layers() { return layers_; }
  ad::Parameter& head() { return head_w_; }
  ad::Parameter& head_bias() { return head_b_; }

 private:
  AdaptedLinear* target(Layer& l, const std::string& name);

  Vocab vocab_;
  LMConfig cfg_;
  ad::Parameter tok_emb_, pos_emb_;
  std::vector<Layer> layers_;
  ad::Parameter lnf_g_, lnf_b_;
  ad::Parameter head_w_, head_b_;
  std::optional<LoraConfig> lora_;
};

}  // namespace sugar
