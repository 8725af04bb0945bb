#include "sugar/recognizer.hpp"

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

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

/// Unpositioned rows of one sample plus bookkeeping.
struct Rows {
  ad::Var x;
  std::vector<int> ids;
  std::vector<int> targets;
  int prompt_length = 0;
  int act_offset = 0;
  int act_length = 0;
};

Rows assemble_rows(ToyLM& lm, const InstructionSample& s) {
  const Vocab& vocab = lm.vocab();
  const auto words = whitespace_tokens(s.instruction);
  const auto slots = std::count(words.begin(), words.end(), std::string(Vocab::kAct));
  if (slots != 1) throw VocabError("instruction must contain exactly one " + std::string(Vocab::kAct) + " slot");
  if (!s.action_tokens.defined() || s.action_tokens.rows() == 0) throw DimensionError("no action tokens to splice");
  if (s.action_tokens.cols() != lm.config().dim) throw DimensionError("action tokens must be lm_dim wide");

  std::vector<int> pre{vocab.bos()};
  std::vector<int> post;
  bool after = false;
  for (const auto& w : words) {
    if (w == Vocab::kAct) {
      after = true;
      continue;
    }
    (after ? post : pre).push_back(vocab.id(w));
  }
  std::vector<int> target;
  if (!s.target.empty()) {
    target = vocab.encode(s.target);
    target.push_back(vocab.eos());
  }

  Rows r;
  r.act_offset = static_cast<int>(pre.size());
  r.act_length = static_cast<int>(s.action_tokens.rows());
  r.prompt_length = r.act_offset + r.act_length + static_cast<int>(post.size());
  r.ids = pre;
  r.ids.insert(r.ids.end(), static_cast<std::size_t>(r.act_length), vocab.act());
  r.ids.insert(r.ids.end(), post.begin(), post.end());
  r.ids.insert(r.ids.end(), target.begin(), target.end());

  std::vector<ad::Var> parts{lm.embed(pre), s.action_tokens};
  std::vector<int> tail = post;
  tail.insert(tail.end(), target.begin(), target.end());
  if (!tail.empty()) parts.push_back(lm.embed(tail));
  r.x = ad::concat_rows(parts);

  r.targets.assign(r.ids.size(), -1);
  for (std::size_t p = static_cast<std::size_t>(r.prompt_length); p < r.ids.size(); ++p) r.targets[p - 1] = r.ids[p];
  return r;
}

/// Pads every sample to the longest with <EOS> rows (ignored targets) and
/// stacks them. Causal attention keeps the padding invisible to real rows.
std::pair<ad::Var, std::vector<int>> stack_padded(ToyLM& lm, std::vector<Rows>& rows) {
  std::size_t longest = 0;
  for (const auto& r : rows) longest = std::max(longest, r.ids.size());
  std::vector<ad::Var> parts;
  std::vector<int> targets;
  for (auto& r : rows) {
    parts.push_back(r.x);
    targets.insert(targets.end(), r.targets.begin(), r.targets.end());
    const std::size_t pad = longest - r.ids.size();
    if (pad > 0) {
      parts.push_back(lm.embed(std::vector<int>(pad, lm.vocab().eos())));
      targets.insert(targets.end(), pad, -1);
    }
  }
  return {ad::concat_rows(parts), std::move(targets)};
}

Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

}  // namespace

std::string render_instruction(const std::vector<std::string>& action_list, const std::string& tmpl) {
  std::string names;
  for (const auto& a : action_list) names += (names.empty() ? "" : " ") + a;
  std::string out = tmpl;
  replace_all(out, "[action list]", names);
  replace_all(out, "[action]", Vocab::kAct);
  return out;
}

std::string target_text(const std::string& action, const std::string& brief) {
  std::string out = action + " .";
  for (const auto& w : whitespace_tokens(brief)) out += " " + w;
  return out;
}

Vocab build_vocab(const ActionList& actions, const KnowledgeBank& knowledge, const std::string& tmpl) {
  std::vector<std::string> words;
  auto add = [&](const std::string& text) {
    for (auto& w : whitespace_tokens(text)) words.push_back(std::move(w));
  };
  add(render_instruction({}, tmpl));
  words.emplace_back(".");
  for (const auto& a : actions.names()) words.push_back(a);
  for (const auto& r : knowledge.records) {
    words.push_back(r.action);
    add(r.brief);
    for (const auto& p : r.motion.parts) add(p);
    for (const auto& d : r.visual.descriptions) add(d);
  }
  return Vocab(words);
}

AssembledInput assemble_input(ToyLM& lm, const InstructionSample& sample) {
  Rows r = assemble_rows(lm, sample);
  AssembledInput out;
  out.embeddings = lm.add_positions(r.x, 1);
  out.ids = std::move(r.ids);
  out.targets = std::move(r.targets);
  out.prompt_length = r.prompt_length;
  out.act_offset = r.act_offset;
  out.act_length = r.act_length;
  return out;
}

Recognizer::Recognizer(ToyLM lm, std::unique_ptr<Bridge> bridge) : lm_(std::move(lm)), bridge_(std::move(bridge)) {
  if (!bridge_) throw ConfigError("recognizer needs a bridge");
  if (bridge_->config().lm_dim != lm_.config().dim) throw DimensionError("bridge lm_dim must equal the LM width");
}

std::vector<double> Recognizer::score_classes(const ActionTokens& tokens, const ActionList& list) {
  if (list.size() == 0) throw ConfigError("empty action list");
  ad::NoGradGuard guard;
  AssembledInput in = assemble_input(lm_, {render_instruction(list.names()), ad::constant(tokens.tokens), ""});
  ad::Var logits = lm_.forward(in.embeddings, 1);
  const Eigen::RowVectorXd lp = log_softmax(logits.value().row(logits.rows() - 1));
  std::vector<double> scores;
  scores.reserve(list.size());
  // Action names are single tokens, so the length-normalized sum over the
  // name reduces to the log-probability of that token after the prompt.
  for (const auto& name : list.names()) scores.push_back(lp(lm_.vocab().id(name)));
  return scores;
}

Recognizer::Prediction Recognizer::predict(const ActionTokens& tokens, const ActionList& list, int top_k,
                                           bool describe, int max_description_tokens) {
  if (list.size() == 0) throw ConfigError("empty action list");
  if (top_k < 1 || top_k > static_cast<int>(list.size())) throw ConfigError("top_k must lie in [1, |action list|]");
  const std::vector<double> scores = score_classes(tokens, list);
  std::vector<int> order(list.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  Prediction p;
  for (int i = 0; i < top_k; ++i) {
    p.ranked.push_back(list[static_cast<std::size_t>(order[i])]);
    p.scores.push_back(scores[static_cast<std::size_t>(order[i])]);
  }
  if (describe) {
    ad::NoGradGuard guard;
    const Vocab& vocab = lm_.vocab();
    std::vector<int> generated{vocab.id(p.ranked.front()), vocab.id(".")};
    std::vector<int> description;
    for (int step = 0; step < max_description_tokens; ++step) {
      Rows r = assemble_rows(lm_, {render_instruction(list.names()), ad::constant(tokens.tokens), ""});
      ad::Var x = ad::concat_rows({r.x, lm_.embed(generated)});
      if (x.rows() > lm_.config().max_positions) break;
      ad::Var logits = lm_.forward(lm_.add_positions(x, 1), 1);
      Eigen::Index next;
      logits.value().row(logits.rows() - 1).maxCoeff(&next);
      if (static_cast<int>(next) == vocab.eos()) break;
      generated.push_back(static_cast<int>(next));
      description.push_back(static_cast<int>(next));
    }
    p.description = vocab.decode(description);
  }
  return p;
}

Recognizer::Prediction Recognizer::predict(const SkeletonRepresentation& rep, const ActionList& list, int top_k,
                                           bool describe) {
  return predict(bridge_->project(rep), list, top_k, describe);
}

ParameterArchive Recognizer::adapter_archive() {
  nlohmann::json header = {{"kind", "sugar_adapters"},
                           {"lora", lm_.lora_config().to_json()},
                           {"bridge", to_string(bridge_->kind())},
                           {"tqp", bridge_->config().to_json()}};
  ad::ParameterRefs params = lm_.lora_parameters();
  for (auto* p : bridge_->parameters()) params.push_back(p);
  for (auto* p : bridge_->buffers()) params.push_back(p);
  return make_archive(std::move(header), params);
}

void Recognizer::save_adapters(const std::filesystem::path& path) { write_archive(path, adapter_archive()); }

Recognizer Recognizer::load(ToyLM lm, const std::filesystem::path& adapters) {
  const ParameterArchive archive = read_archive(adapters);
  if (archive.header.value("kind", std::string()) != "sugar_adapters") throw ConfigError("archive is not an adapter checkpoint");
  auto bridge = make_bridge(parse_bridge(archive.header.at("bridge").get<std::string>()),
                            TQPConfig::from_json(archive.header.at("tqp")), 0);
  lm.attach_lora(LoraConfig::from_json(archive.header.at("lora")), 0);
  Recognizer rec(std::move(lm), std::move(bridge));
  load_parameters(archive, rec.lm().lora_parameters());
  load_parameters(archive, rec.bridge().parameters());
  load_parameters(archive, rec.bridge().buffers());
  return rec;
}

Eigen::MatrixXd slot_projection(int text_dim, int lm_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  Eigen::MatrixXd m(lm_dim, text_dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

nlohmann::json LMPretrainConfig::to_json() const {
  return {{"steps", steps}, {"batch_size", batch_size},   {"lr", lr},         {"slot_lengths", slot_lengths},
          {"slot_noise", slot_noise}, {"text_noise", text_noise}, {"max_grad_norm", max_grad_norm}, {"seed", seed}};
}

ToyLM pretrain_base_lm(const KnowledgeBank& knowledge, const EmbeddingBank& bank, const LMConfig& lm_cfg,
                       const LMPretrainConfig& cfg, std::ostream* log) {
  if (cfg.slot_lengths.empty() || cfg.steps < 0 || cfg.batch_size < 1) throw ConfigError("invalid LM pretraining config");
  const ActionList& actions = knowledge.actions;
  ToyLM lm(build_vocab(actions, knowledge), lm_cfg, cfg.seed);
  const Eigen::MatrixXd proj = slot_projection(bank.dim(), lm_cfg.dim, cfg.seed + 1);
  std::vector<Eigen::MatrixXd> sets;
  Eigen::RowVectorXd centre = Eigen::RowVectorXd::Zero(bank.dim());
  for (const auto& a : actions.names()) {
    sets.push_back(bank.text_set(a, KnowledgeChannel::both));
    centre += sets.back().colwise().mean() / static_cast<double>(actions.size());
  }
  for (auto& set : sets) set.rowwise() -= centre;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.slot_noise);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> text_sigma(0.0, cfg.text_noise);
  ad::ParameterRefs params = lm.base_parameters();
  Adam opt(params, cfg.lr);
  const int n = static_cast<int>(actions.size());
  for (int step = 0; step < cfg.steps; ++step) {
    const int slot = cfg.slot_lengths[std::uniform_int_distribution<std::size_t>(0, cfg.slot_lengths.size() - 1)(rng)];
    std::vector<Rows> rows;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int c = std::uniform_int_distribution<int>(0, n - 1)(rng);
      // A shuffled random sub-list that contains the answer.
      std::vector<int> others;
      for (int i = 0; i < n; ++i)
        if (i != c) others.push_back(i);
      std::shuffle(others.begin(), others.end(), rng);
      const int extra = std::uniform_int_distribution<int>(std::min(1, n - 1), n - 1)(rng);
      std::vector<int> members(others.begin(), others.begin() + extra);
      members.push_back(c);
      std::shuffle(members.begin(), members.end(), rng);
      std::vector<std::string> names;
      for (int m : members) names.push_back(actions[static_cast<std::size_t>(m)]);

      // Slot content: the projected mean of a random non-empty subset of
      // the class's centred text set, plus text-space and per-token noise.
      const Eigen::MatrixXd& set = sets[static_cast<std::size_t>(c)];
      Eigen::VectorXd t = Eigen::VectorXd::Zero(set.cols());
      int picked = 0;
      for (Eigen::Index i = 0; i < set.rows(); ++i) {
        if (std::bernoulli_distribution(0.5)(rng)) {
          t += set.row(i).transpose();
          ++picked;
        }
      }
      if (picked == 0) t = set.row(std::uniform_int_distribution<Eigen::Index>(0, set.rows() - 1)(rng)).transpose();
      t.normalize();
      const double sigma = text_sigma(rng);
      for (Eigen::Index i = 0; i < t.size(); ++i) t(i) += sigma * unit(rng);
      t.normalize();
      Eigen::MatrixXd tokens(slot, lm_cfg.dim);
      const Eigen::RowVectorXd mapped = (proj * t).transpose();
      for (int i = 0; i < slot; ++i) {
        tokens.row(i) = mapped;
        for (int j = 0; j < lm_cfg.dim; ++j) tokens(i, j) += noise(rng);
      }
      const auto& rec = knowledge.at(actions[static_cast<std::size_t>(c)]);
      rows.push_back(assemble_rows(lm, {render_instruction(names), ad::constant(std::move(tokens)),
                                        target_text(rec.action, rec.brief)}));
    }
    auto [x, targets] = stack_padded(lm, rows);
    opt.zero_grad();
    ad::Var loss = ad::softmax_cross_entropy(lm.forward(lm.add_positions(x, cfg.batch_size), cfg.batch_size), targets);
    ad::backward(loss);
    if (cfg.max_grad_norm > 0.0) clip_grad_norm(params, cfg.max_grad_norm);
    opt.step();
    if (log && (step % 50 == 0 || step + 1 == cfg.steps)) {
      *log << nlohmann::json{{"step", step}, {"loss", loss.scalar()}}.dump() << "\n";
    }
  }
  round_to_storage_precision(params);
  return lm;
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"lora", lora.to_json()},       {"lr", lr}, {"bridge_lr", bridge_lr},
          {"epochs", epochs},             {"batch_size", batch_size},
          {"train_bridge", train_bridge}, {"max_grad_norm", max_grad_norm},
          {"seed", seed}};
}

nlohmann::json FinetuneEpoch::to_json() const { return {{"epoch", epoch}, {"loss", loss}}; }

std::vector<FinetuneEpoch> finetune(Recognizer& recognizer, const std::vector<SkeletonRepresentation>& reps,
                                    const std::vector<int>& labels, const ActionList& list,
                                    const KnowledgeBank& knowledge, const FinetuneConfig& cfg, std::ostream* log) {
  if (reps.size() != labels.size() || reps.empty()) throw DatasetError("finetune needs one label per representation");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("invalid finetune config");
  ToyLM& lm = recognizer.lm();
  Bridge& bridge = recognizer.bridge();
  if (!lm.has_lora()) lm.attach_lora(cfg.lora, cfg.seed + 1);
  lm.set_base_trainable(false);
  bridge.set_trainable(cfg.train_bridge);
  if (cfg.train_bridge) {
    bridge.fit_input_statistics(reps);
    round_to_storage_precision(bridge.buffers());
  }

  std::vector<std::string> targets;
  for (int l : labels) {
    if (l < 0 || l >= static_cast<int>(list.size())) throw DatasetError("finetune label outside the action list");
    const auto& rec = knowledge.at(list[static_cast<std::size_t>(l)]);
    targets.push_back(target_text(rec.action, rec.brief));
  }
  const std::string instruction = render_instruction(list.names());

  const ad::ParameterRefs lora_params = lm.lora_parameters();
  const ad::ParameterRefs bridge_params = cfg.train_bridge ? bridge.parameters() : ad::ParameterRefs{};
  ad::ParameterRefs params = lora_params;
  params.insert(params.end(), bridge_params.begin(), bridge_params.end());
  Adam lora_opt(lora_params, cfg.lr);
  Adam bridge_opt(bridge_params, cfg.bridge_lr > 0.0 ? cfg.bridge_lr : cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(reps.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<FinetuneEpoch> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      // Representations of one batch must share a length to go through the
      // bridge together; otherwise they are bridged one at a time.
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      bool same_length = true;
      for (auto i : idx) same_length = same_length && reps[i].length() == reps[idx.front()].length();
      std::vector<ad::Var> token_vars;
      if (same_length) {
        std::vector<ad::Var> values;
        for (auto i : idx) values.push_back(ad::constant(reps[i].values));
        const auto b = static_cast<Eigen::Index>(idx.size());
        ad::Var all = bridge.forward(ad::concat_rows(values), b);
        const Eigen::Index per = all.rows() / b;
        for (Eigen::Index k = 0; k < b; ++k) token_vars.push_back(ad::slice_rows(all, k * per, per));
      } else {
        for (auto i : idx) token_vars.push_back(bridge.forward(ad::constant(reps[i].values), 1));
      }
      std::vector<Rows> rows;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        rows.push_back(assemble_rows(lm, {instruction, token_vars[k], targets[idx[k]]}));
      }
      auto [x, tgt] = stack_padded(lm, rows);
      const auto b = static_cast<Eigen::Index>(idx.size());
      lora_opt.zero_grad();
      bridge_opt.zero_grad();
      ad::Var loss = ad::softmax_cross_entropy(lm.forward(lm.add_positions(x, b), b), tgt);
      ad::backward(loss);
      if (cfg.max_grad_norm > 0.0) clip_grad_norm(params, cfg.max_grad_norm);
      lora_opt.step();
      bridge_opt.step();
      loss_sum += loss.scalar();
      ++batches;
    }
    FinetuneEpoch e{epoch, loss_sum / batches};
    if (log) *log << e.to_json().dump() << "\n";
    history.push_back(e);
  }
  round_to_storage_precision(params);
  return history;
}

}  // namespace sugar
