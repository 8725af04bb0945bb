#include "checks.hpp"

#include <cmath>
#include <random>

#include "sugar/encoder.hpp"
#include "sugar/generator.hpp"
#include "sugar/knowledge.hpp"
#include "sugar/lm.hpp"
#include "sugar/recognizer.hpp"
#include "sugar/synthetic.hpp"
#include "sugar/tqp.hpp"

namespace sugar::testing {

namespace {

std::size_t count(const ad::ParameterRefs& ps) {
  std::size_t n = 0;
  for (auto* p : ps) n += static_cast<std::size_t>(p->value.size());
  return n;
}

Eigen::MatrixXd unit_rows(Eigen::MatrixXd m) {
  m.rowwise().normalize();
  return m;
}

std::vector<SkeletonSequence> toy_sequences(int per_class, int frames, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.samples_per_class = per_class;
  cfg.frames = frames;
  cfg.seed = seed;
  return generate_synthetic_dataset(toy_action_specs(), cfg, SkeletonGraph::toy(), toy_rest_pose());
}

TQPConfig small_tqp() {
  TQPConfig c;
  c.segment_length = 4;
  c.query_length = 3;
  c.model_dim = 8;
  c.input_dim = 6;
  c.qformer_layers = 1;
  c.heads = 2;
  c.ffn_dim = 12;
  c.lm_dim = 5;
  return c;
}

ToyLM tiny_lm(std::uint64_t seed) {
  LMConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.mlp_dim = 16;
  c.max_positions = 8;
  return ToyLM(Vocab({"a", "b", "c", "d", "e"}), c, seed);
}

}  // namespace

SizedGradcheck gradcheck_encoder() {
  EncoderConfig cfg;
  cfg.feature_dims = {4, 6};
  cfg.temporal_kernels = {3, 5};
  cfg.projection_dim = 8;
  SkeletonEncoder enc(cfg, SkeletonGraph::toy(), 3);
  // Zero biases put dead-input rows exactly on a ReLU kink.
  std::uint64_t s = 4;
  for (auto* p : enc.parameters()) {
    if (p->name.find("bias") != std::string::npos) p->value += gaussian_matrix(p->value.rows(), p->value.cols(), s++, 0.1);
  }
  const auto data = toy_sequences(1, 6, 5);
  const std::vector<const SkeletonSequence*> batch{&data[0], &data[3]};
  auto loss = [&] {
    const auto out = enc.forward(batch);
    return random_projection_loss(out.pooled, 1) + random_projection_loss(out.values, 2);
  };
  return {gradcheck(enc.parameters(), loss), count(enc.parameters())};
}

SizedGradcheck gradcheck_mil_nce() {
  const auto batch = random_contrastive_batch(17);
  ad::Parameter pooled("pooled", batch.skeleton_features);
  auto loss = [&] { return mil_nce_loss(pooled.var(), batch.text_sets, 0.07); };
  return {gradcheck({&pooled}, loss), static_cast<std::size_t>(pooled.value.size())};
}

SizedGradcheck gradcheck_qformer() {
  const TQPConfig cfg = small_tqp();
  std::mt19937_64 rng(7);
  QFormer qf(cfg, rng, "qf.");
  ad::Parameter query("query", gaussian_matrix(2 * cfg.query_length, cfg.model_dim, 8));
  ad::Parameter memory("memory", gaussian_matrix(2 * 5, cfg.input_dim, 9));
  ad::ParameterRefs ps = qf.parameters();
  ps.push_back(&query);
  ps.push_back(&memory);
  auto loss = [&] { return random_projection_loss(qf.step(query.var(), memory.var(), 2), 10); };
  return {gradcheck(ps, loss), count(ps)};
}

SizedGradcheck gradcheck_tqp() {
  const TQPConfig cfg = small_tqp();
  TemporalQueryProjection tqp(cfg, 11);
  ad::Parameter input("input", gaussian_matrix(2 * 10, cfg.input_dim, 12));  // 3 segments, last one partial
  ad::ParameterRefs ps = tqp.parameters();
  ps.push_back(&input);
  auto loss = [&] { return random_projection_loss(tqp.forward(input.var(), 2), 13); };
  return {gradcheck(ps, loss), count(ps)};
}

SizedGradcheck gradcheck_lora() {
  ToyLM lm = tiny_lm(21);
  LoraConfig lc;
  lc.rank = 2;
  lc.alpha = 4.0;
  lc.targets = {"wq", "wk", "wv", "wo", "fc1", "fc2"};
  lm.attach_lora(lc, 22);
  // Move B off zero so every adapter path carries gradient.
  std::uint64_t s = 23;
  for (auto* p : lm.lora_parameters()) p->value += gaussian_matrix(p->value.rows(), p->value.cols(), s++, 0.3);
  lm.set_base_trainable(false);
  const std::vector<int> ids{0, 3, 4, 2, 5, 6, 7};
  const std::vector<int> targets{3, 4, -1, 5, 6, 7, 1};
  auto loss = [&] {
    return ad::softmax_cross_entropy(lm.forward(lm.add_positions(lm.embed(ids), 1), 1), targets);
  };
  std::size_t total = count(lm.base_parameters()) + count(lm.lora_parameters());
  return {gradcheck(lm.lora_parameters(), loss), total};
}

double brute_force_mil_nce(const ContrastiveBatch& batch, double temperature) {
  const auto B = batch.skeleton_features.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index k = 0; k < B; ++k) {
      const auto& set = batch.text_sets[static_cast<std::size_t>(k)];
      for (Eigen::Index n = 0; n < set.rows(); ++n) {
        double dot = 0.0;
        for (Eigen::Index c = 0; c < set.cols(); ++c) dot += batch.skeleton_features(i, c) * set(n, c);
        const double e = std::exp(dot / temperature);
        den += e;
        if (k == i) num += e;
      }
    }
    total += -std::log(num / den);
  }
  return total / static_cast<double>(B);
}

ContrastiveBatch random_contrastive_batch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int B = std::uniform_int_distribution<int>(2, 6)(rng);
  std::uniform_int_distribution<int> set_size(1, 4);
  ContrastiveBatch batch;
  batch.skeleton_features = unit_rows(gaussian_matrix(B, 8, rng()));
  for (int i = 0; i < B; ++i) batch.text_sets.push_back(unit_rows(gaussian_matrix(set_size(rng), 8, rng())));
  return batch;
}

double mil_nce_oracle_error(int batches, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> tau(0.05, 1.0);
  double worst = 0.0;
  for (int b = 0; b < batches; ++b) {
    const auto batch = random_contrastive_batch(rng());
    const double t = tau(rng);
    const double expected = brute_force_mil_nce(batch, t);
    const double closed = mil_nce_loss(batch, t);
    const double graph = mil_nce_loss(ad::constant(batch.skeleton_features), batch.text_sets, t).scalar();
    worst = std::max({worst, std::abs(closed - expected), std::abs(graph - expected)});
  }
  return worst;
}

double mil_nce_two_sample_case() {
  ContrastiveBatch batch;
  batch.skeleton_features = Eigen::MatrixXd::Identity(2, 2);
  batch.text_sets = {Eigen::MatrixXd::Identity(2, 2).row(0), Eigen::MatrixXd::Identity(2, 2).row(1)};
  // Each sample: -log(e^1 / (e^1 + e^0)) = log(1 + e^-1).
  return mil_nce_loss(batch, 1.0);
}

int tqp_output_length(int frames, int query_length) {
  TQPConfig cfg;
  cfg.query_length = query_length;
  cfg.input_dim = 12;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.lm_dim = 8;
  TemporalQueryProjection tqp(cfg, 1);
  SkeletonRepresentation rep;
  rep.values = gaussian_matrix(frames, cfg.input_dim, static_cast<std::uint64_t>(frames));
  return tqp.project(rep).length();
}

bool single_segment_tqp_matches_qformer() {
  TQPConfig cfg = small_tqp();
  SkeletonRepresentation rep;
  rep.values = gaussian_matrix(9, cfg.input_dim, 31);
  cfg.segment_length = 9;
  TemporalQueryProjection tqp(cfg, 5, BridgeKind::tqp);
  cfg.segment_length = 4;  // ignored by the plain Q-Former bridge
  TemporalQueryProjection qformer(cfg, 5, BridgeKind::qformer);
  const auto a = tqp.project(rep).tokens;
  const auto b = qformer.project(rep).tokens;
  return a.rows() == b.rows() && a.cols() == b.cols() && a.cwiseEqual(b).all();
}

bool lora_zero_init_is_identity() {
  ToyLM lm = tiny_lm(41);
  const std::vector<int> ids{0, 3, 4, 5, 2, 6};
  ad::NoGradGuard guard;
  const Eigen::MatrixXd before = lm.forward(lm.add_positions(lm.embed(ids), 1), 1).value();
  LoraConfig lc;
  lc.rank = 2;
  lc.targets = {"wq", "wk", "wv", "wo", "fc1", "fc2"};
  lm.attach_lora(lc, 42);
  const Eigen::MatrixXd after = lm.forward(lm.add_positions(lm.embed(ids), 1), 1).value();
  // The closed-form adapted linear map with B = 0 reduces to x W^T exactly.
  const Eigen::MatrixXd x = gaussian_matrix(3, 8, 43);
  const Eigen::MatrixXd w = gaussian_matrix(5, 8, 44);
  const Eigen::MatrixXd a = gaussian_matrix(2, 8, 45);
  const Eigen::MatrixXd plain = x * w.transpose();
  const Eigen::MatrixXd adapted = lora_forward<double>(x, w, a, Eigen::MatrixXd::Zero(5, 2), 16.0);
  return before.cwiseEqual(after).all() && plain.cwiseEqual(adapted).all();
}

bool finetune_keeps_frozen_weights() {
  const ActionList actions = ActionList::load(std::filesystem::path(SUGAR_DATA_DIR) / "toy_actions.txt");
  FixtureGenerator gen(default_fixture_corpus());
  SyntheticFrameSource frames(actions, {5, 5, 4, 5, 4, 5});
  const KnowledgeBank knowledge = generate_knowledge(actions, gen, frames);

  EncoderConfig ec;
  ec.feature_dims = {8, 12};
  ec.projection_dim = 16;
  SkeletonEncoder encoder(ec, SkeletonGraph::toy(), 1);
  const auto data = toy_sequences(2, 16, 3);
  const auto reps = encoder.encode_all(data);
  std::vector<int> labels;
  for (const auto& s : data) labels.push_back(*s.label);

  LMConfig lc;
  lc.layers = 1;
  lc.dim = 16;
  lc.mlp_dim = 32;
  lc.heads = 2;
  TQPConfig tc;
  tc.input_dim = ec.representation_dim();
  tc.model_dim = 16;
  tc.ffn_dim = 32;
  tc.lm_dim = lc.dim;
  tc.query_length = 4;
  tc.qformer_layers = 1;
  tc.heads = 2;
  Recognizer rec(ToyLM(build_vocab(actions, knowledge), lc, 2), make_bridge(BridgeKind::tqp, tc, 3));

  const auto base_before = rec.lm().base_checksum();
  std::vector<std::pair<std::string, Eigen::MatrixXd>> enc_before;
  for (auto* p : encoder.parameters()) enc_before.emplace_back(p->name, p->value);
  const Eigen::MatrixXd bridge_before = rec.bridge().parameters().back()->value;

  FinetuneConfig fc;
  fc.epochs = 2;
  fc.lr = 1e-2;
  fc.lora.rank = 2;
  finetune(rec, reps, labels, actions, knowledge, fc);

  bool same = rec.lm().base_checksum() == base_before;
  const auto params = encoder.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) same = same && params[i]->value.cwiseEqual(enc_before[i].second).all();
  // Sanity: the trainable parts did move.
  bool moved = !rec.bridge().parameters().back()->value.cwiseEqual(bridge_before).all();
  for (auto* p : rec.lm().lora_parameters()) {
    if (p->name.find("lora_b") != std::string::npos) moved = moved && p->value.norm() > 0.0;
  }
  return same && moved;
}

}  // namespace sugar::testing
