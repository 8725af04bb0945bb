#include "sugar/tqp.hpp"

#include <cmath>

#include "sugar/errors.hpp"

namespace sugar {

namespace {

Eigen::MatrixXd xavier(int in, int out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Eigen::MatrixXd m(in, out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Eigen::MatrixXd gaussian(int rows, int cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ad::Parameter zeros(const std::string& name, int cols) { return {name, Eigen::MatrixXd::Zero(1, cols)}; }
ad::Parameter ones(const std::string& name, int cols) { return {name, Eigen::MatrixXd::Ones(1, cols)}; }

ad::Var affine(const ad::Var& x, ad::Parameter& w, ad::Parameter& b) {
  return ad::add_row(ad::matmul(x, w.var()), b.var());
}

/// The learned queries repeated once per sample.
ad::Var tile_queries(ad::Parameter& q, Eigen::Index batch) {
  const int l = static_cast<int>(q.value.rows());
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(batch * l));
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int i = 0; i < l; ++i) ids.push_back(i);
  return ad::gather_rows(q.var(), ids);
}

Eigen::Index checked_length(const ad::Var& values, Eigen::Index batch) {
  if (batch <= 0 || values.rows() % batch != 0) throw DimensionError("bridge input rows must split evenly by batch");
  const Eigen::Index len = values.rows() / batch;
  if (len == 0) throw PreconditionError("bridge input has no frames");
  return len;
}

}  // namespace

void TQPConfig::validate() const {
  if (segment_length < 0) throw ConfigError("segment_length must be >= 1 (or 0 for a single segment)");
  if (query_length < 1) throw ConfigError("query_length must be >= 1");
  if (model_dim < 1 || input_dim < 1 || ffn_dim < 1 || lm_dim < 1) throw ConfigError("bridge dims must be positive");
  if (qformer_layers < 1) throw ConfigError("qformer_layers must be >= 1");
  if (heads < 1 || model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
}

nlohmann::json TQPConfig::to_json() const {
  return {{"segment_length", segment_length}, {"query_length", query_length}, {"model_dim", model_dim},
          {"input_dim", input_dim},           {"qformer_layers", qformer_layers}, {"heads", heads},
          {"ffn_dim", ffn_dim},               {"lm_dim", lm_dim}};
}

TQPConfig TQPConfig::from_json(const nlohmann::json& j) {
  TQPConfig c;
  c.segment_length = j.at("segment_length").get<int>();
  c.query_length = j.at("query_length").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.qformer_layers = j.at("qformer_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.lm_dim = j.at("lm_dim").get<int>();
  c.validate();
  return c;
}

std::string to_string(BridgeKind kind) {
  switch (kind) {
    case BridgeKind::tqp: return "tqp";
    case BridgeKind::qformer: return "qformer";
    case BridgeKind::xattn: return "xattn";
    case BridgeKind::linear: return "linear";
  }
  return "?";
}

BridgeKind parse_bridge(const std::string& name) {
  for (auto k : {BridgeKind::tqp, BridgeKind::qformer, BridgeKind::xattn, BridgeKind::linear})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown bridge '" + name + "' (expected tqp, qformer, xattn or linear)");
}

std::vector<Segment> segment(const Eigen::MatrixXd& values, int segment_length) {
  if (values.rows() == 0) throw PreconditionError("cannot segment an empty representation");
  if (segment_length < 1) throw ConfigError("segment_length must be >= 1");
  const Eigen::Index n = values.rows();
  std::vector<Segment> out;
  for (Eigen::Index start = 0; start < n; start += segment_length) {
    Segment s;
    s.valid = static_cast<int>(std::min<Eigen::Index>(segment_length, n - start));
    s.values = Eigen::MatrixXd::Zero(segment_length, values.cols());
    s.values.topRows(s.valid) = values.middleRows(start, s.valid);
    out.push_back(std::move(s));
  }
  return out;
}

AttentionWeights::AttentionWeights(const std::string& prefix, int d_query, int d_memory, int d, std::mt19937_64& rng)
    : wq(prefix + "wq", xavier(d_query, d, rng)),
      bq(zeros(prefix + "bq", d)),
      wk(prefix + "wk", xavier(d_memory, d, rng)),
      bk(zeros(prefix + "bk", d)),
      wv(prefix + "wv", xavier(d_memory, d, rng)),
      bv(zeros(prefix + "bv", d)),
      wo(prefix + "wo", xavier(d, d_query, rng)),
      bo(zeros(prefix + "bo", d_query)) {}

void AttentionWeights::collect(ad::ParameterRefs& out) {
  for (auto* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) out.push_back(p);
}

ad::Var multi_head_attention(AttentionWeights& w, const ad::Var& query, const ad::Var& memory, int heads, bool causal,
                             Eigen::Index groups) {
  ad::Var q = affine(query, w.wq, w.bq);
  ad::Var k = affine(memory, w.wk, w.bk);
  ad::Var v = affine(memory, w.wv, w.bv);
  return affine(ad::attention(q, k, v, heads, causal, groups), w.wo, w.bo);
}

QFormerLayer::QFormerLayer(const std::string& prefix, const TQPConfig& cfg, std::mt19937_64& rng)
    : self_attn(prefix + "self.", cfg.model_dim, cfg.model_dim, cfg.model_dim, rng),
      cross_attn(prefix + "cross.", cfg.model_dim, cfg.input_dim, cfg.model_dim, rng),
      ln1_g(ones(prefix + "ln1.g", cfg.model_dim)),
      ln1_b(zeros(prefix + "ln1.b", cfg.model_dim)),
      ln2_g(ones(prefix + "ln2.g", cfg.model_dim)),
      ln2_b(zeros(prefix + "ln2.b", cfg.model_dim)),
      ln3_g(ones(prefix + "ln3.g", cfg.model_dim)),
      ln3_b(zeros(prefix + "ln3.b", cfg.model_dim)),
      ff1_w(prefix + "ff1.w", xavier(cfg.model_dim, cfg.ffn_dim, rng)),
      ff1_b(zeros(prefix + "ff1.b", cfg.ffn_dim)),
      ff2_w(prefix + "ff2.w", xavier(cfg.ffn_dim, cfg.model_dim, rng)),
      ff2_b(zeros(prefix + "ff2.b", cfg.model_dim)) {}

void QFormerLayer::collect(ad::ParameterRefs& out) {
  self_attn.collect(out);
  cross_attn.collect(out);
  for (auto* p : {&ln1_g, &ln1_b, &ln2_g, &ln2_b, &ln3_g, &ln3_b, &ff1_w, &ff1_b, &ff2_w, &ff2_b}) out.push_back(p);
}

QFormer::QFormer(const TQPConfig& cfg, std::mt19937_64& rng, const std::string& prefix) : heads_(cfg.heads) {
  for (int l = 0; l < cfg.qformer_layers; ++l) layers_.emplace_back(prefix + "layer" + std::to_string(l) + ".", cfg, rng);
}

ad::Var QFormer::step(const ad::Var& query, const ad::Var& memory, Eigen::Index groups) {
  ad::Var x = query;
  for (auto& l : layers_) {
    x = ad::layer_norm(x + multi_head_attention(l.self_attn, x, x, heads_, false, groups), l.ln1_g.var(), l.ln1_b.var());
    x = ad::layer_norm(x + multi_head_attention(l.cross_attn, x, memory, heads_, false, groups), l.ln2_g.var(),
                       l.ln2_b.var());
    ad::Var ff = affine(ad::gelu(affine(x, l.ff1_w, l.ff1_b)), l.ff2_w, l.ff2_b);
    x = ad::layer_norm(x + ff, l.ln3_g.var(), l.ln3_b.var());
  }
  return x;
}

ad::ParameterRefs QFormer::parameters() {
  ad::ParameterRefs refs;
  for (auto& l : layers_) l.collect(refs);
  return refs;
}

Bridge::Bridge(TQPConfig cfg, const std::string& prefix)
    : cfg_(std::move(cfg)),
      in_mean_(zeros(prefix + "in_mean", cfg_.input_dim)),
      in_scale_(ones(prefix + "in_scale", cfg_.input_dim)),
      in_ln_g_(ones(prefix + "in_ln.g", cfg_.input_dim)),
      in_ln_b_(zeros(prefix + "in_ln.b", cfg_.input_dim)) {}

ad::Var Bridge::normalize_input(const ad::Var& values, Eigen::Index batch) {
  checked_length(values, batch);
  if (values.cols() != cfg_.input_dim) throw DimensionError("representation width does not match the bridge input");
  const ad::Var centred = ad::add_row(values, ad::constant(-in_mean_.value));
  const ad::Var scaled = ad::matmul(centred, ad::constant(in_scale_.value.row(0).asDiagonal().toDenseMatrix()));
  return ad::layer_norm(scaled, in_ln_g_.var(), in_ln_b_.var());
}

void Bridge::fit_input_statistics(const std::vector<SkeletonRepresentation>& reps) {
  if (reps.empty()) throw PreconditionError("no representations to fit input statistics on");
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(cfg_.input_dim);
  Eigen::RowVectorXd sq = sum;
  double n = 0.0;
  for (const auto& r : reps) {
    if (r.values.cols() != cfg_.input_dim) throw DimensionError("representation width does not match the bridge input");
    sum += r.values.colwise().sum();
    sq += r.values.array().square().colwise().sum().matrix();
    n += static_cast<double>(r.values.rows());
  }
  const Eigen::RowVectorXd mean = sum / n;
  Eigen::ArrayXXd sd = (sq / n - mean.array().square().matrix()).array().max(0.0).sqrt();
  sd = sd.max(std::max(1e-3 * sd.maxCoeff(), 1e-12));
  in_mean_.value = mean;
  in_scale_.value = sd.inverse().matrix();
}

ActionTokens Bridge::project(const SkeletonRepresentation& rep) {
  ad::NoGradGuard guard;
  return {forward(ad::constant(rep.values), 1).value()};
}

void Bridge::set_trainable(bool trainable) {
  for (auto* p : parameters()) p->trainable = trainable;
}

TemporalQueryProjection::TemporalQueryProjection(const TQPConfig& cfg, std::uint64_t seed, BridgeKind kind)
    : Bridge(cfg, "tqp."), kind_(kind) {
  cfg_.validate();
  if (kind_ == BridgeKind::qformer) cfg_.segment_length = 0;
  std::mt19937_64 rng(seed);
  queries_ = {"tqp.queries", gaussian(cfg_.query_length, cfg_.model_dim, 0.02, rng)};
  qformer_ = QFormer(cfg_, rng, "tqp.qformer.");
  out_w_ = {"tqp.out.w", xavier(cfg_.model_dim, cfg_.lm_dim, rng)};
  out_b_ = zeros("tqp.out.b", cfg_.lm_dim);
}

ad::Var TemporalQueryProjection::forward(const ad::Var& input, Eigen::Index batch) {
  const ad::Var values = normalize_input(input, batch);
  const Eigen::Index len = values.rows() / batch;
  const Eigen::Index seg = cfg_.segment_length == 0 ? len : cfg_.segment_length;
  ad::Var state = tile_queries(queries_, batch);
  // Padding rows of the last segment carry no content, so the cross
  // attention sees only the valid rows of each segment.
  for (Eigen::Index start = 0; start < len; start += seg) {
    const Eigen::Index valid = std::min(seg, len - start);
    ad::Var memory;
    if (batch == 1) {
      memory = valid == len ? values : ad::slice_rows(values, start, valid);
    } else {
      std::vector<int> ids;
      ids.reserve(static_cast<std::size_t>(batch * valid));
      for (Eigen::Index b = 0; b < batch; ++b)
        for (Eigen::Index t = 0; t < valid; ++t) ids.push_back(static_cast<int>(b * len + start + t));
      memory = ad::gather_rows(values, ids);
    }
    state = qformer_.step(state, memory, batch);
  }
  return affine(state, out_w_, out_b_);
}

ad::ParameterRefs TemporalQueryProjection::parameters() {
  ad::ParameterRefs refs{&in_ln_g_, &in_ln_b_, &queries_};
  for (auto* p : qformer_.parameters()) refs.push_back(p);
  refs.push_back(&out_w_);
  refs.push_back(&out_b_);
  return refs;
}

CrossAttentionBridge::CrossAttentionBridge(const TQPConfig& cfg, std::uint64_t seed) : Bridge(cfg, "xattn.") {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  queries_ = {"xattn.queries", gaussian(cfg_.query_length, cfg_.model_dim, 0.02, rng)};
  attn_ = AttentionWeights("xattn.cross.", cfg_.model_dim, cfg_.input_dim, cfg_.model_dim, rng);
  ln_g_ = ones("xattn.ln.g", cfg_.model_dim);
  ln_b_ = zeros("xattn.ln.b", cfg_.model_dim);
  out_w_ = {"xattn.out.w", xavier(cfg_.model_dim, cfg_.lm_dim, rng)};
  out_b_ = zeros("xattn.out.b", cfg_.lm_dim);
}

ad::Var CrossAttentionBridge::forward(const ad::Var& input, Eigen::Index batch) {
  const ad::Var values = normalize_input(input, batch);
  ad::Var q = tile_queries(queries_, batch);
  ad::Var x = ad::layer_norm(q + multi_head_attention(attn_, q, values, cfg_.heads, false, batch), ln_g_.var(),
                             ln_b_.var());
  return affine(x, out_w_, out_b_);
}

ad::ParameterRefs CrossAttentionBridge::parameters() {
  ad::ParameterRefs refs{&in_ln_g_, &in_ln_b_, &queries_};
  attn_.collect(refs);
  for (auto* p : {&ln_g_, &ln_b_, &out_w_, &out_b_}) refs.push_back(p);
  return refs;
}

LinearBridge::LinearBridge(const TQPConfig& cfg, std::uint64_t seed) : Bridge(cfg, "linear.") {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  w_ = {"linear.w", xavier(cfg_.input_dim, cfg_.lm_dim, rng)};
  b_ = zeros("linear.b", cfg_.lm_dim);
}

ad::Var LinearBridge::forward(const ad::Var& input, Eigen::Index batch) {
  return affine(normalize_input(input, batch), w_, b_);
}

ad::ParameterRefs LinearBridge::parameters() { return {&in_ln_g_, &in_ln_b_, &w_, &b_}; }

std::unique_ptr<Bridge> make_bridge(BridgeKind kind, const TQPConfig& cfg, std::uint64_t seed) {
  switch (kind) {
    case BridgeKind::tqp:
    case BridgeKind::qformer: return std::make_unique<TemporalQueryProjection>(cfg, seed, kind);
    case BridgeKind::xattn: return std::make_unique<CrossAttentionBridge>(cfg, seed);
    case BridgeKind::linear: return std::make_unique<LinearBridge>(cfg, seed);
  }
  throw ConfigError("unknown bridge kind");
}

}  // namespace sugar
