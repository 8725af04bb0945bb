#include "sugar/text_encoder.hpp"

#include <cctype>
#include <fstream>
#include <random>
#include <sstream>

#include "sugar/archive.hpp"
#include "sugar/binary_io.hpp"
#include "sugar/errors.hpp"
#include "sugar/hash.hpp"

namespace sugar {

std::vector<std::string> text_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    std::size_t b = 0;
    std::size_t e = tok.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(tok[b])) && tok[b] != '_') ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1])) && tok[e - 1] != '_') --e;
    if (b == e) continue;
    std::string t = tok.substr(b, e - b);
    for (auto& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(t));
  }
  return out;
}

StubTextEncoder::StubTextEncoder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw ConfigError("text encoder dimension must be positive");
}

std::string StubTextEncoder::id() const { return "stub:" + std::to_string(dim_) + ":" + std::to_string(seed_); }

Eigen::VectorXd StubTextEncoder::token_vector(const std::string& token) const {
  std::mt19937_64 rng(fnv1a64(token) ^ (seed_ * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dim_);
  for (int i = 0; i < dim_; ++i) v(i) = n(rng);
  return v;
}

Eigen::VectorXd StubTextEncoder::encode(const std::string& text) const {
  const auto tokens = text_tokens(text);
  if (tokens.empty()) throw EncodingError("cannot encode text without tokens");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim_);
  for (const auto& t : tokens) acc += token_vector(t);
  acc /= static_cast<double>(tokens.size());
  const double n = acc.norm();
  if (n < 1e-12) throw EncodingError("text embedding collapsed to zero");
  return acc / n;
}

std::string to_string(KnowledgeChannel c) {
  switch (c) {
    case KnowledgeChannel::none: return "none";
    case KnowledgeChannel::visual: return "visual";
    case KnowledgeChannel::motion: return "motion";
    case KnowledgeChannel::both: return "both";
  }
  return "?";
}

KnowledgeChannel parse_channel(const std::string& s) {
  if (s == "none") return KnowledgeChannel::none;
  if (s == "visual") return KnowledgeChannel::visual;
  if (s == "motion") return KnowledgeChannel::motion;
  if (s == "both") return KnowledgeChannel::both;
  throw ConfigError("unknown knowledge channel '" + s + "'");
}

EmbeddingBank::EmbeddingBank(int dim, std::vector<ActionEmbeddings> entries) : dim_(dim), entries_(std::move(entries)) {
  for (const auto& e : entries_) {
    if (e.motion.size() != dim_ || (e.visual.size() > 0 && e.visual.cols() != dim_)) {
      throw DimensionError("embedding bank entry " + e.action + " has the wrong dimension");
    }
  }
}

bool EmbeddingBank::contains(const std::string& action) const {
  for (const auto& e : entries_)
    if (e.action == action) return true;
  return false;
}

const ActionEmbeddings& EmbeddingBank::at(const std::string& action) const {
  for (const auto& e : entries_)
    if (e.action == action) return e;
  throw LookupError("embedding bank has no action '" + action + "'");
}

Eigen::MatrixXd EmbeddingBank::text_set(const std::string& action, KnowledgeChannel channel) const {
  const auto& e = at(action);
  switch (channel) {
    case KnowledgeChannel::motion: return e.motion.transpose();
    case KnowledgeChannel::visual:
      if (e.visual.rows() == 0) throw ConfigError("action " + action + " has no visual embeddings");
      return e.visual;
    case KnowledgeChannel::both: {
      Eigen::MatrixXd out(1 + e.visual.rows(), dim_);
      out.row(0) = e.motion.transpose();
      out.bottomRows(e.visual.rows()) = e.visual;
      return out;
    }
    case KnowledgeChannel::none: break;
  }
  throw ConfigError("the 'none' channel has no text targets");
}

EmbeddingBank encode_bank(const KnowledgeBank& knowledge, const TextEncoder& encoder) {
  std::vector<ActionEmbeddings> entries;
  for (const auto& rec : knowledge.records) {
    ActionEmbeddings e;
    e.action = rec.action;
    for (const auto& p : rec.motion.parts)
      if (p.empty()) throw EncodingError("empty motion sentence for " + rec.action);
    e.motion = encoder.encode(rec.motion.text());
    e.visual.resize(static_cast<Eigen::Index>(rec.visual.descriptions.size()), encoder.dim());
    for (std::size_t i = 0; i < rec.visual.descriptions.size(); ++i) {
      const auto& d = rec.visual.descriptions[i];
      if (d.empty()) throw EncodingError("empty visual description for " + rec.action);
      e.visual.row(static_cast<Eigen::Index>(i)) = encoder.encode(d).transpose();
    }
    entries.push_back(std::move(e));
  }
  return EmbeddingBank(encoder.dim(), std::move(entries));
}

namespace {
constexpr std::uint32_t kBankVersion = 1;
}

void write_embedding_bank(const std::filesystem::path& path, const EmbeddingBank& bank) {
  std::ostringstream buf(std::ios::binary);
  io::Writer w(buf);
  w.magic("SUGB");
  w.u32(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  for (const auto& e : bank.entries()) {
    w.string(e.action);
    w.u32(static_cast<std::uint32_t>(1 + e.visual.rows()));
    for (Eigen::Index i = 0; i < e.motion.size(); ++i) w.f32(static_cast<float>(e.motion(i)));
    for (Eigen::Index r = 0; r < e.visual.rows(); ++r)
      for (Eigen::Index c = 0; c < e.visual.cols(); ++c) w.f32(static_cast<float>(e.visual(r, c)));
  }
  write_file_atomic(path, buf.str());
}

EmbeddingBank read_embedding_bank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open embedding bank " + path.string(), 0);
  io::Reader r(in);
  r.expect_magic("SUGB");
  const auto version_at = r.offset();
  if (r.u32("version") != kBankVersion) throw FormatError("unsupported embedding bank version", version_at);
  const auto dim_at = r.offset();
  const auto dim = r.u32("dimension");
  if (dim == 0 || dim > (1u << 16)) throw FormatError("implausible embedding dimension", dim_at);
  std::vector<ActionEmbeddings> entries;
  while (!r.at_end()) {
    ActionEmbeddings e;
    e.action = r.string("action name", 4096);
    const auto count_at = r.offset();
    const auto count = r.u32("vector count");
    if (count == 0 || count > (1u << 20)) throw FormatError("action needs at least the motion vector", count_at);
    std::vector<float> values(static_cast<std::size_t>(count) * dim);
    r.floats(values.data(), values.size(), "embedding vectors");
    e.motion = Eigen::Map<Eigen::VectorXf>(values.data(), dim).cast<double>();
    e.visual.resize(count - 1, dim);
    for (std::uint32_t i = 1; i < count; ++i)
      e.visual.row(i - 1) = Eigen::Map<Eigen::RowVectorXf>(values.data() + static_cast<std::size_t>(i) * dim, dim).cast<double>();
    entries.push_back(std::move(e));
  }
  return EmbeddingBank(static_cast<int>(dim), std::move(entries));
}

}  // namespace sugar
