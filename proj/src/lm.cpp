#include "sugar/lm.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "sugar/hash.hpp"

namespace sugar {

std::vector<std::string> whitespace_tokens(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

Vocab::Vocab(const std::vector<std::string>& words) {
  for (const char* s : {kBos, kEos, kAct}) {
    index_.emplace(s, static_cast<int>(tokens_.size()));
    tokens_.emplace_back(s);
  }
  for (const auto& w : words) {
    if (w.empty() || index_.count(w)) continue;
    index_.emplace(w, static_cast<int>(tokens_.size()));
    tokens_.push_back(w);
  }
}

int Vocab::id(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) throw VocabError("token '" + token + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& t : whitespace_tokens(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

nlohmann::json LoraConfig::to_json() const { return {{"rank", rank}, {"alpha", alpha}, {"targets", targets}}; }

LoraConfig LoraConfig::from_json(const nlohmann::json& j) {
  LoraConfig c;
  c.rank = j.at("rank").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.targets = j.at("targets").get<std::vector<std::string>>();
  return c;
}

void validate_lora(int rank, double alpha, Eigen::Index d_in, Eigen::Index d_out) {
  if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
  if (rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                      std::to_string(std::min(d_in, d_out)));
  }
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
}

ad::Var AdaptedLinear::forward(const ad::Var& x) {
  ad::Var y = ad::add_row(ad::matmul_nt(x, weight.var()), bias.var());
  if (!adapted()) return y;
  ad::Var low = ad::matmul_nt(ad::matmul_nt(x, lora_a.var()), lora_b.var());
  return y + ad::scale(low, scaling);
}

void LMConfig::validate() const {
  if (layers < 1 || heads < 1 || dim < 1 || mlp_dim < 1 || max_positions < 1) throw ConfigError("LM dims must be positive");
  if (dim % heads != 0) throw ConfigError("LM dim must be divisible by heads");
}

nlohmann::json LMConfig::to_json() const {
  return {{"layers", layers}, {"heads", heads}, {"dim", dim}, {"mlp_dim", mlp_dim}, {"max_positions", max_positions}};
}

LMConfig LMConfig::from_json(const nlohmann::json& j) {
  LMConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dim = j.at("dim").get<int>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.validate();
  return c;
}

namespace {

Eigen::MatrixXd normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

AdaptedLinear linear(const std::string& name, int in, int out, double std, std::mt19937_64& rng) {
  AdaptedLinear l;
  l.weight = {name + ".w", normal(out, in, std, rng)};
  l.bias = {name + ".b", Eigen::MatrixXd::Zero(1, out)};
  return l;
}

ad::Parameter row(const std::string& name, int cols, double v) {
  return {name, Eigen::MatrixXd::Constant(1, cols, v)};
}

}  // namespace

ToyLM::ToyLM(Vocab vocab, const LMConfig& cfg, std::uint64_t seed) : vocab_(std::move(vocab)), cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.dim;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  // Residual-branch outputs are scaled down with depth.
  const double out_std = w_std / std::sqrt(2.0 * cfg_.layers);
  tok_emb_ = {"lm.tok_emb", normal(vocab_.size(), d, 0.5, rng)};
  pos_emb_ = {"lm.pos_emb", normal(cfg_.max_positions, d, 0.5, rng)};
  for (int i = 0; i < cfg_.layers; ++i) {
    const std::string p = "lm.layer" + std::to_string(i) + ".";
    Layer l;
    l.ln1_g = row(p + "ln1.g", d, 1.0);
    l.ln1_b = row(p + "ln1.b", d, 0.0);
    l.wq = linear(p + "wq", d, d, w_std, rng);
    l.wk = linear(p + "wk", d, d, w_std, rng);
    l.wv = linear(p + "wv", d, d, w_std, rng);
    l.wo = linear(p + "wo", d, d, out_std, rng);
    l.ln2_g = row(p + "ln2.g", d, 1.0);
    l.ln2_b = row(p + "ln2.b", d, 0.0);
    l.fc1 = linear(p + "fc1", d, cfg_.mlp_dim, w_std, rng);
    l.fc2 = linear(p + "fc2", cfg_.mlp_dim, d, out_std * std::sqrt(static_cast<double>(d) / cfg_.mlp_dim), rng);
    layers_.push_back(std::move(l));
  }
  lnf_g_ = row("lm.lnf.g", d, 1.0);
  lnf_b_ = row("lm.lnf.b", d, 0.0);
  head_w_ = {"lm.head.w", normal(vocab_.size(), d, w_std, rng)};
  head_b_ = row("lm.head.b", vocab_.size(), 0.0);
}

ad::Var ToyLM::embed(const std::vector<int>& ids) {
  for (int i : ids) vocab_.token(i);
  return ad::gather_rows(tok_emb_.var(), ids);
}

ad::Var ToyLM::add_positions(const ad::Var& x, Eigen::Index batch) {
  if (batch <= 0 || x.rows() % batch != 0) throw DimensionError("LM input rows must split evenly by batch");
  const Eigen::Index len = x.rows() / batch;
  if (len > cfg_.max_positions) {
    throw DimensionError("sequence of " + std::to_string(len) + " tokens exceeds max_positions " +
                         std::to_string(cfg_.max_positions));
  }
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index t = 0; t < len; ++t) ids.push_back(static_cast<int>(t));
  return x + ad::gather_rows(pos_emb_.var(), ids);
}

ad::Var ToyLM::forward(const ad::Var& x, Eigen::Index batch) {
  if (x.cols() != cfg_.dim) throw DimensionError("LM input width must equal lm_dim");
  ad::Var h = x;
  for (auto& l : layers_) {
    ad::Var n1 = ad::layer_norm(h, l.ln1_g.var(), l.ln1_b.var());
    ad::Var att = ad::attention(l.wq.forward(n1), l.wk.forward(n1), l.wv.forward(n1), cfg_.heads, true, batch);
    h = h + l.wo.forward(att);
    ad::Var n2 = ad::layer_norm(h, l.ln2_g.var(), l.ln2_b.var());
    h = h + l.fc2.forward(ad::gelu(l.fc1.forward(n2)));
  }
  ad::Var n = ad::layer_norm(h, lnf_g_.var(), lnf_b_.var());
  return ad::add_row(ad::matmul_nt(n, head_w_.var()), head_b_.var());
}

AdaptedLinear* ToyLM::target(Layer& l, const std::string& name) {
  if (name == "wq") return &l.wq;
  if (name == "wk") return &l.wk;
  if (name == "wv") return &l.wv;
  if (name == "wo") return &l.wo;
  if (name == "fc1") return &l.fc1;
  if (name == "fc2") return &l.fc2;
  throw ConfigError("unknown LoRA target '" + name + "'");
}

void ToyLM::attach_lora(const LoraConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& l : layers_) {
    for (const auto& t : cfg.targets) {
      AdaptedLinear* lin = target(l, t);
      const auto d_in = lin->weight.value.cols();
      const auto d_out = lin->weight.value.rows();
      validate_lora(cfg.rank, cfg.alpha, d_in, d_out);
      // A gets the fan-in uniform init, B starts at zero so the adapter is
      // a no-op until trained.
      const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Eigen::MatrixXd a(cfg.rank, d_in);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
      const std::string base = lin->weight.name.substr(0, lin->weight.name.size() - 2);
      lin->lora_a = {base + ".lora_a", std::move(a)};
      lin->lora_b = {base + ".lora_b", Eigen::MatrixXd::Zero(d_out, cfg.rank)};
      lin->scaling = cfg.scaling();
    }
  }
  lora_ = cfg;
}

void ToyLM::detach_lora() {
  for (auto& l : layers_) {
    for (auto* lin : {&l.wq, &l.wk, &l.wv, &l.wo, &l.fc1, &l.fc2}) {
      lin->lora_a = {};
      lin->lora_b = {};
      lin->scaling = 0.0;
    }
  }
  lora_.reset();
}

const LoraConfig& ToyLM::lora_config() const {
  if (!lora_) throw PreconditionError("no LoRA adapters attached");
  return *lora_;
}

ad::ParameterRefs ToyLM::base_parameters() {
  ad::ParameterRefs refs{&tok_emb_, &pos_emb_};
  for (auto& l : layers_) {
    refs.push_back(&l.ln1_g);
    refs.push_back(&l.ln1_b);
    for (auto* lin : {&l.wq, &l.wk, &l.wv, &l.wo}) {
      refs.push_back(&lin->weight);
      refs.push_back(&lin->bias);
    }
    refs.push_back(&l.ln2_g);
    refs.push_back(&l.ln2_b);
    for (auto* lin : {&l.fc1, &l.fc2}) {
      refs.push_back(&lin->weight);
      refs.push_back(&lin->bias);
    }
  }
  for (auto* p : {&lnf_g_, &lnf_b_, &head_w_, &head_b_}) refs.push_back(p);
  return refs;
}

ad::ParameterRefs ToyLM::lora_parameters() {
  ad::ParameterRefs refs;
  for (auto& l : layers_) {
    for (auto* lin : {&l.wq, &l.wk, &l.wv, &l.wo, &l.fc1, &l.fc2}) {
      if (!lin->adapted()) continue;
      refs.push_back(&lin->lora_a);
      refs.push_back(&lin->lora_b);
    }
  }
  return refs;
}

void ToyLM::set_base_trainable(bool trainable) {
  for (auto* p : base_parameters()) p->trainable = trainable;
}

std::uint64_t ToyLM::base_checksum() {
  std::uint64_t h = fnv1a64("");
  for (const auto* p : base_parameters()) {
    h = fnv1a64(p->name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p->value.data()),
                                 static_cast<std::size_t>(p->value.size()) * sizeof(double)),
                h);
  }
  return h;
}

ParameterArchive ToyLM::base_archive() {
  nlohmann::json header = {{"kind", "toy_lm"}, {"config", cfg_.to_json()}, {"vocab", vocab_.tokens()}};
  return make_archive(std::move(header), base_parameters());
}

void ToyLM::save_base(const std::filesystem::path& path) { write_archive(path, base_archive()); }

ToyLM ToyLM::load_base(const std::filesystem::path& path) {
  const ParameterArchive archive = read_archive(path);
  if (archive.header.value("kind", std::string()) != "toy_lm") throw ConfigError("archive is not a toy LM");
  auto tokens = archive.header.at("vocab").get<std::vector<std::string>>();
  if (tokens.size() < 3 || tokens[0] != Vocab::kBos || tokens[1] != Vocab::kEos || tokens[2] != Vocab::kAct) {
    throw FormatError("toy LM vocabulary lacks the special tokens", 0);
  }
  ToyLM lm(Vocab(std::vector<std::string>(tokens.begin() + 3, tokens.end())),
           LMConfig::from_json(archive.header.at("config")), 0);
  load_parameters(archive, lm.base_parameters());
  return lm;
}

ParameterArchive ToyLM::adapter_archive() {
  nlohmann::json header = {{"kind", "lora"}, {"lora", lora_config().to_json()}};
  return make_archive(std::move(header), lora_parameters());
}

void ToyLM::load_adapters(const ParameterArchive& archive) {
  const LoraConfig cfg = LoraConfig::from_json(archive.header.at("lora"));
  attach_lora(cfg, 0);
  load_parameters(archive, lora_parameters());
}

}  // namespace sugar
