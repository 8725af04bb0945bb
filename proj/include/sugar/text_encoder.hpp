#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sugar/knowledge.hpp"

namespace sugar {

/// Maps a sentence to a unit vector in the text space.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
  /// Throws EncodingError for text without tokens.
  virtual Eigen::VectorXd encode(const std::string& text) const = 0;
};

/// Lower-cased whitespace tokens with surrounding punctuation stripped.
std::vector<std::string> text_tokens(const std::string& text);

/// Deterministic stand-in for a frozen text encoder: each token maps to a
/// Gaussian vector seeded by (token, seed); a sentence is the L2-normalized
/// mean of its token vectors.
class StubTextEncoder : public TextEncoder {
 public:
  explicit StubTextEncoder(int dim = 256, std::uint64_t seed = 0);

  int dim() const override { return dim_; }
  std::string id() const override;
  Eigen::VectorXd encode(const std::string& text) const override;
  Eigen::VectorXd token_vector(const std::string& token) const;

 private:
  int dim_;
  std::uint64_t seed_;
};

enum class KnowledgeChannel { none, visual, motion, both };

std::string to_string(KnowledgeChannel c);
KnowledgeChannel parse_channel(const std::string& s);

struct ActionEmbeddings {
  std::string action;
  Eigen::VectorXd motion;   // m
  Eigen::MatrixXd visual;   // one v_i per row
};

class EmbeddingBank {
 public:
  EmbeddingBank() = default;
  EmbeddingBank(int dim, std::vector<ActionEmbeddings> entries);

  int dim() const { return dim_; }
  const std::vector<ActionEmbeddings>& entries() const { return entries_; }
  bool contains(const std::string& action) const;
  const ActionEmbeddings& at(const std::string& action) const;

  /// Target set t for an action, one vector per row: {m} u {v_i} for
  /// `both`, {m} for `motion`, {v_i} for `visual`. Throws ConfigError for
  /// `none`.
  Eigen::MatrixXd text_set(const std::string& action, KnowledgeChannel channel = KnowledgeChannel::both) const;

 private:
  int dim_ = 0;
  std::vector<ActionEmbeddings> entries_;
};

EmbeddingBank encode_bank(const KnowledgeBank& knowledge, const TextEncoder& encoder);

// "SUGB", u32 version, u32 d_t, then until end of file per action: u32 name
// length + UTF-8 name, u32 vector count, count * d_t float32 values. The
// first vector of each action is m, the rest are the v_i.
void write_embedding_bank(const std::filesystem::path& path, const EmbeddingBank& bank);
EmbeddingBank read_embedding_bank(const std::filesystem::path& path);

}  // namespace sugar
