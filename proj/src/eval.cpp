#include "sugar/eval.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "sugar/archive.hpp"
#include "sugar/errors.hpp"
#include "sugar/generator.hpp"
#include "sugar/hash.hpp"
#include "sugar/text_encoder.hpp"

namespace sugar {

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<int> split_ints(const std::string& text) {
  std::vector<int> out;
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
    }
  }
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::filesystem::path cache_dir_of(const PipelineConfig& cfg) {
  return cfg.cache_dir.empty() ? cfg.output_dir / "cache" : cfg.cache_dir;
}

void write_json_lines(std::ostream* log, const std::string& stage, const std::string& text) {
  if (!log) return;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) *log << "[" << stage << "] " << line << "\n";
}

Eigen::MatrixXd pooled_rows(SkeletonEncoder& encoder, const std::vector<SkeletonSequence>& seqs) {
  const auto reps = encoder.encode_all(seqs);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(reps.size()), encoder.config().projection_dim);
  for (std::size_t i = 0; i < reps.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = reps[i].pooled.transpose();
  return out;
}

std::vector<int> labels_of(const std::vector<SkeletonSequence>& seqs) {
  std::vector<int> out;
  for (const auto& s : seqs) out.push_back(s.label.value_or(-1));
  return out;
}

}  // namespace

std::string to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::closed_set: return "closed_set";
    case ProtocolKind::zero_shot_unseen: return "zero_shot_unseen";
    case ProtocolKind::zero_shot_cross_list: return "zero_shot_cross_list";
  }
  throw ConfigError("unknown protocol kind");
}

ProtocolKind parse_protocol_kind(const std::string& s) {
  if (s == "closed_set") return ProtocolKind::closed_set;
  if (s == "zero_shot_unseen") return ProtocolKind::zero_shot_unseen;
  if (s == "zero_shot_cross_list") return ProtocolKind::zero_shot_cross_list;
  throw ConfigError("unknown protocol kind '" + s + "'");
}

std::string to_string(SplitKind k) { return k == SplitKind::by_subject ? "by_subject" : "by_sample"; }

SplitKind parse_split(const std::string& s) {
  if (s == "by_subject") return SplitKind::by_subject;
  if (s == "by_sample") return SplitKind::by_sample;
  throw ConfigError("unknown split '" + s + "'");
}

void Protocol::validate() const {
  if (train_classes.empty() || eval_classes.empty()) throw ProtocolError("protocol needs train and eval classes");
  if (top_k < 1) throw ProtocolError("top_k must be positive");
  for (const auto* list : {&train_classes, &eval_classes}) {
    std::set<std::string> unique(list->begin(), list->end());
    if (unique.size() != list->size()) throw ProtocolError("duplicate class in protocol list");
  }
  switch (kind) {
    case ProtocolKind::closed_set:
      if (train_classes != eval_classes) throw ProtocolError("closed_set requires eval classes equal to train classes");
      break;
    case ProtocolKind::zero_shot_unseen:
      for (const auto& c : eval_classes)
        if (contains(train_classes, c)) throw ProtocolError("zero_shot_unseen eval class '" + c + "' is a train class");
      break;
    case ProtocolKind::zero_shot_cross_list:
      for (const auto& c : train_classes)
        if (!contains(eval_classes, c)) throw ProtocolError("cross-list eval list misses train class '" + c + "'");
      if (eval_classes == train_classes) throw ProtocolError("cross-list eval list must differ from the train list");
      break;
  }
}

std::vector<std::string> Protocol::inference_list() const {
  if (kind != ProtocolKind::zero_shot_unseen) return eval_classes;
  std::vector<std::string> out = train_classes;
  out.insert(out.end(), eval_classes.begin(), eval_classes.end());
  return out;
}

std::vector<std::string> Protocol::scored_classes() const {
  return kind == ProtocolKind::zero_shot_cross_list ? train_classes : eval_classes;
}

nlohmann::json Protocol::to_json() const {
  return {{"id", id},       {"kind", to_string(kind)},   {"train_classes", train_classes},
          {"eval_classes", eval_classes}, {"split", to_string(split)}, {"top_k", top_k}};
}

nlohmann::json Metrics::to_json() const {
  return {{"top1", top1}, {"top5", top5}, {"mean_per_class", mean_per_class}, {"count", count}};
}

Metrics compute_metrics(const std::vector<std::vector<int>>& ranked, const std::vector<int>& truth) {
  if (ranked.size() != truth.size()) throw DimensionError("one ranking per sample required");
  if (truth.empty()) throw DimensionError("no samples to score");
  std::map<int, std::pair<int, int>> per_class;  // label -> (hits, total)
  int hit1 = 0;
  int hit5 = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (ranked[i].empty()) throw DimensionError("empty ranking");
    const bool top1 = ranked[i].front() == truth[i];
    const auto end = ranked[i].begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(5, ranked[i].size()));
    hit1 += top1;
    hit5 += std::find(ranked[i].begin(), end, truth[i]) != end;
    auto& pc = per_class[truth[i]];
    pc.first += top1;
    ++pc.second;
  }
  Metrics m;
  m.count = truth.size();
  m.top1 = static_cast<double>(hit1) / static_cast<double>(truth.size());
  m.top5 = static_cast<double>(hit5) / static_cast<double>(truth.size());
  double recall = 0.0;
  for (const auto& [label, pc] : per_class) recall += static_cast<double>(pc.first) / pc.second;
  m.mean_per_class = recall / static_cast<double>(per_class.size());
  return m;
}

nlohmann::json ResultRecord::canonical_json() const {
  return {{"protocol_id", protocol_id}, {"variant", variant}, {"metrics", metrics.to_json()},
          {"extra", extra},             {"config_hash", config_hash}, {"seed", seed}};
}

nlohmann::json ResultRecord::to_json() const {
  nlohmann::json j = canonical_json();
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j;
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"data",
           {{"samples_per_class", data.samples_per_class},
            {"train_per_class", train_per_class},
            {"frames", data.frames},
            {"jitter_std", data.jitter_std},
            {"jitter_clip", data.jitter_clip},
            {"phase_jitter", data.phase_jitter},
            {"amplitude_jitter", data.amplitude_jitter},
            {"subjects", data.subjects},
            {"seed", data.seed},
            {"confusable_delta", confusable_delta}}},
          {"knowledge",
           {{"corpus", corpus.empty() ? std::string("fixture") : read_text(corpus)},
            {"scene_counts", scene_counts},
            {"text_dim", text_dim},
            {"text_seed", text_seed}}},
          {"encoder", {{"model", encoder.to_json()}, {"train", pretrain.to_json()}}},
          {"tqp", {{"bridge", to_string(bridge)}, {"config", tqp.to_json()}}},
          {"lm",
           {{"model", lm.to_json()}, {"pretrain", lm_pretrain.to_json()}, {"finetune", finetune.to_json()}}},
          {"protocol", protocol.to_json()},
          {"seed", seed}};
}

std::string PipelineConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

PipelineConfig default_pipeline_config() {
  PipelineConfig cfg;
  cfg.data.samples_per_class = 60;
  const ActionList actions([] {
    std::vector<std::string> names;
    for (const auto& s : toy_action_specs()) names.push_back(s.class_name);
    return names;
  }());
  cfg.protocol.id = "toy_closed_set";
  cfg.protocol.train_classes = actions.names();
  cfg.protocol.eval_classes = actions.names();
  return cfg;
}

Protocol builtin_protocol(const std::string& name, const ActionList& actions) {
  Protocol p;
  p.id = name;
  p.kind = parse_protocol_kind(name);
  const std::vector<std::string> held_out{"drink_can", "dance"};
  switch (p.kind) {
    case ProtocolKind::closed_set:
      p.train_classes = actions.names();
      p.eval_classes = actions.names();
      break;
    case ProtocolKind::zero_shot_unseen:
      for (const auto& c : held_out)
        if (!actions.contains(c)) throw ProtocolError("toy class '" + c + "' missing from the action list");
      for (const auto& c : actions.names()) (contains(held_out, c) ? p.eval_classes : p.train_classes).push_back(c);
      break;
    case ProtocolKind::zero_shot_cross_list:
      p.train_classes = actions.names();
      p.eval_classes.assign(actions.names().rbegin(), actions.names().rend());
      break;
  }
  p.validate();
  return p;
}

PipelineConfig parse_manifest(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  PipelineConfig cfg = default_pipeline_config();
  const std::set<std::string> sections{"data", "knowledge", "encoder", "tqp", "lm", "protocol", "output"};
  for (const auto& [section, body] : tree) {
    if (!sections.count(section)) throw ConfigError("manifest: unknown section [" + section + "]");
    for (const auto& [key, node] : body) {
      const std::string v = node.get_value<std::string>();
      const std::string where = "manifest: [" + section + "] " + key;
      auto as_int = [&] {
        try {
          std::size_t used = 0;
          const int x = std::stoi(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
          return x;
        } catch (const std::exception&) {
          throw ConfigError(where + ": expected an integer, got '" + v + "'");
        }
      };
      auto as_double = [&] {
        try {
          std::size_t used = 0;
          const double x = std::stod(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
          return x;
        } catch (const std::exception&) {
          throw ConfigError(where + ": expected a number, got '" + v + "'");
        }
      };
      auto as_seed = [&] {
        const int x = as_int();
        if (x < 0) throw ConfigError(where + ": seeds are non-negative");
        return static_cast<std::uint64_t>(x);
      };
      auto unknown = [&] { throw ConfigError(where + ": unknown key"); };
      if (section == "data") {
        if (key == "samples_per_class") cfg.data.samples_per_class = as_int();
        else if (key == "train_per_class") cfg.train_per_class = as_int();
        else if (key == "frames") cfg.data.frames = as_int();
        else if (key == "jitter_std") cfg.data.jitter_std = as_double();
        else if (key == "phase_jitter") cfg.data.phase_jitter = as_double();
        else if (key == "amplitude_jitter") cfg.data.amplitude_jitter = as_double();
        else if (key == "subjects") cfg.data.subjects = as_int();
        else if (key == "seed") cfg.data.seed = as_seed();
        else if (key == "confusable_delta") cfg.confusable_delta = as_double();
        else unknown();
      } else if (section == "knowledge") {
        if (key == "corpus") cfg.corpus = v == "fixture" ? std::filesystem::path() : std::filesystem::path(v);
        else if (key == "scene_counts") cfg.scene_counts = split_ints(v);
        else if (key == "text_dim") cfg.text_dim = as_int();
        else if (key == "text_seed") cfg.text_seed = as_seed();
        else unknown();
      } else if (section == "encoder") {
        if (key == "feature_dims") cfg.encoder.feature_dims = split_ints(v);
        else if (key == "temporal_kernels") cfg.encoder.temporal_kernels = split_ints(v);
        else if (key == "projection_dim") cfg.encoder.projection_dim = as_int();
        else if (key == "input_scale") cfg.encoder.input_scale = as_double();
        else if (key == "channel") cfg.pretrain.channel = parse_channel(v);
        else if (key == "epochs") cfg.pretrain.epochs = as_int();
        else if (key == "lr") cfg.pretrain.lr = as_double();
        else if (key == "momentum") cfg.pretrain.momentum = as_double();
        else if (key == "weight_decay") cfg.pretrain.weight_decay = as_double();
        else if (key == "batch_size") cfg.pretrain.batch_size = as_int();
        else if (key == "temperature") cfg.pretrain.temperature = as_double();
        else if (key == "max_grad_norm") cfg.pretrain.max_grad_norm = as_double();
        else unknown();
      } else if (section == "tqp") {
        if (key == "bridge") cfg.bridge = parse_bridge(v);
        else if (key == "segment_length") cfg.tqp.segment_length = as_int();
        else if (key == "query_length") cfg.tqp.query_length = as_int();
        else if (key == "model_dim") cfg.tqp.model_dim = as_int();
        else if (key == "layers") cfg.tqp.qformer_layers = as_int();
        else if (key == "heads") cfg.tqp.heads = as_int();
        else if (key == "ffn_dim") cfg.tqp.ffn_dim = as_int();
        else unknown();
      } else if (section == "lm") {
        if (key == "layers") cfg.lm.layers = as_int();
        else if (key == "heads") cfg.lm.heads = as_int();
        else if (key == "dim") cfg.lm.dim = as_int();
        else if (key == "mlp_dim") cfg.lm.mlp_dim = as_int();
        else if (key == "max_positions") cfg.lm.max_positions = as_int();
        else if (key == "pretrain_steps") cfg.lm_pretrain.steps = as_int();
        else if (key == "pretrain_batch_size") cfg.lm_pretrain.batch_size = as_int();
        else if (key == "pretrain_lr") cfg.lm_pretrain.lr = as_double();
        else if (key == "pretrain_seed") cfg.lm_pretrain.seed = as_seed();
        else if (key == "slot_noise") cfg.lm_pretrain.slot_noise = as_double();
        else if (key == "text_noise") cfg.lm_pretrain.text_noise = as_double();
        else if (key == "lora_rank") cfg.finetune.lora.rank = as_int();
        else if (key == "lora_alpha") cfg.finetune.lora.alpha = as_double();
        else if (key == "lora_targets") cfg.finetune.lora.targets = split_list(v);
        else if (key == "finetune_lr") cfg.finetune.lr = as_double();
        else if (key == "finetune_bridge_lr") cfg.finetune.bridge_lr = as_double();
        else if (key == "finetune_epochs") cfg.finetune.epochs = as_int();
        else if (key == "finetune_batch_size") cfg.finetune.batch_size = as_int();
        else unknown();
      } else if (section == "protocol") {
        if (key == "id") cfg.protocol.id = v;
        else if (key == "kind") cfg.protocol.kind = parse_protocol_kind(v);
        else if (key == "train_classes") cfg.protocol.train_classes = split_list(v);
        else if (key == "eval_classes") cfg.protocol.eval_classes = split_list(v);
        else if (key == "split") cfg.protocol.split = parse_split(v);
        else if (key == "top_k") cfg.protocol.top_k = as_int();
        else if (key == "seed") cfg.seed = as_seed();
        else unknown();
      } else if (section == "output") {
        if (key == "dir") cfg.output_dir = v;
        else if (key == "cache_dir") cfg.cache_dir = v;
        else unknown();
      }
    }
  }
  cfg.protocol.validate();
  return cfg;
}

PipelineConfig load_manifest(const std::filesystem::path& path) {
  PipelineConfig cfg = parse_manifest(read_text(path));
  // Relative paths inside a manifest are relative to the manifest.
  const auto base = path.parent_path();
  if (!cfg.corpus.empty() && cfg.corpus.is_relative()) cfg.corpus = base / cfg.corpus;
  if (cfg.output_dir.is_relative()) cfg.output_dir = base / cfg.output_dir;
  if (!cfg.cache_dir.empty() && cfg.cache_dir.is_relative()) cfg.cache_dir = base / cfg.cache_dir;
  return cfg;
}

ToyData make_toy_data(const PipelineConfig& cfg) {
  if (cfg.train_per_class < 1 || cfg.train_per_class >= cfg.data.samples_per_class) {
    throw ConfigError("train_per_class must leave at least one test sample per class");
  }
  const auto specs = toy_action_specs(cfg.confusable_delta);
  validate_confusable_pairs(specs, std::max(2.0 * cfg.confusable_delta, 1e-9));
  ToyData out;
  std::vector<std::string> names;
  for (const auto& s : specs) {
    names.push_back(s.class_name);
    if (s.confusable_with) out.confusable.push_back(s.class_name);
  }
  out.actions = ActionList(names);
  const auto graph = SkeletonGraph::toy();
  auto all = generate_synthetic_dataset(specs, cfg.data, graph, toy_rest_pose());
  const int per_class = cfg.data.samples_per_class;
  // by_subject keeps the first train_per_class/samples_per_class share of
  // subjects for training.
  const int train_subjects = cfg.data.subjects * cfg.train_per_class / per_class;
  std::uint64_t h = fnv1a64(to_string(cfg.protocol.split));
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int k = static_cast<int>(i) % per_class;
    const bool train = cfg.protocol.split == SplitKind::by_sample ? k < cfg.train_per_class
                                                                  : all[i].subject.value_or(0) < train_subjects;
    h = fnv1a64(std::string(train ? "T" : "E") + std::to_string(i), h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(all[i].frames.data()),
                                 static_cast<std::size_t>(all[i].frames.size()) * sizeof(float)),
                h);
    (train ? out.train : out.test).push_back(std::move(all[i]));
  }
  if (out.train.empty() || out.test.empty()) throw ConfigError("split leaves no train or no test samples");
  out.split_hash = hex64(h);
  return out;
}

KnowledgeBundle make_knowledge(const PipelineConfig& cfg, const ActionList& actions, GeneratorClient* generator) {
  std::optional<FixtureGenerator> fixture;
  if (!generator) generator = &fixture.emplace(cfg.corpus.empty() ? default_fixture_corpus() : cfg.corpus);
  SyntheticFrameSource frames(actions, cfg.scene_counts);
  KnowledgeBundle out;
  out.knowledge = generate_knowledge(actions, *generator, frames);
  StubTextEncoder text(cfg.text_dim, cfg.text_seed);
  out.bank = encode_bank(out.knowledge, text);
  return out;
}

ResultRecord evaluate(const Protocol& protocol, ModelBundle& model, const std::vector<SkeletonSequence>& test,
                      const ActionList& dataset_actions, const std::vector<std::string>& confusable) {
  protocol.validate();
  const ActionList list(protocol.inference_list());
  const auto scored = protocol.scored_classes();
  const int k = std::min<int>(protocol.top_k, static_cast<int>(list.size()));
  std::vector<std::vector<int>> ranked;
  std::vector<int> truth;
  std::vector<int> confusable_hits;
  int members = 0;
  int predictions = 0;
  const auto reps = model.encoder.encode_all(test);
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!test[i].label) throw ProtocolError("test sample without a label");
    const std::string& name = dataset_actions[static_cast<std::size_t>(*test[i].label)];
    if (!contains(scored, name) || !list.contains(name)) {
      throw ProtocolError("test class '" + name + "' is absent from the protocol's eval list");
    }
    const auto pred = model.recognizer.predict(reps[i], list, k, false);
    std::vector<int> r;
    for (const auto& p : pred.ranked) {
      const int idx = list.index_of(p);
      ++predictions;
      members += idx >= 0;
      r.push_back(idx);
    }
    ranked.push_back(std::move(r));
    truth.push_back(list.index_of(name));
    if (contains(confusable, name)) confusable_hits.push_back(ranked.back().front() == truth.back());
  }
  ResultRecord rec;
  rec.protocol_id = protocol.id;
  rec.metrics = compute_metrics(ranked, truth);
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& c : scored) {
    const int idx = list.index_of(c);
    int hits = 0;
    int total = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != idx) continue;
      ++total;
      hits += ranked[i].front() == idx;
    }
    if (total > 0) per_class[c] = static_cast<double>(hits) / total;
  }
  rec.extra["per_class_top1"] = per_class;
  rec.extra["top1_hits"] = static_cast<int>(std::lround(rec.metrics.top1 * static_cast<double>(truth.size())));
  rec.extra["list_member_rate"] = predictions > 0 ? static_cast<double>(members) / predictions : 1.0;
  if (!confusable_hits.empty()) {
    const int s = std::accumulate(confusable_hits.begin(), confusable_hits.end(), 0);
    rec.extra["confusable_hits"] = s;
    rec.extra["confusable_count"] = static_cast<int>(confusable_hits.size());
    rec.extra["confusable_top1"] = static_cast<double>(s) / static_cast<double>(confusable_hits.size());
  }
  return rec;
}

TrainingSet make_training_set(const PipelineConfig& cfg, const ToyData& data) {
  cfg.protocol.validate();
  for (const auto* list : {&cfg.protocol.train_classes, &cfg.protocol.eval_classes}) {
    for (const auto& c : *list) {
      if (!data.actions.contains(c)) throw ProtocolError("protocol class '" + c + "' is not in the dataset");
    }
  }
  TrainingSet out;
  out.actions = ActionList(cfg.protocol.train_classes);
  std::set<std::string> seen;
  for (const auto& s : data.train) {
    const std::string& name = data.actions[static_cast<std::size_t>(*s.label)];
    if (!out.actions.contains(name)) continue;
    const int idx = out.actions.index_of(name);
    SkeletonSequence copy = s;
    copy.label = idx;
    out.samples.push_back(std::move(copy));
    seen.insert(name);
  }
  out.seen_classes.assign(seen.begin(), seen.end());
  if (cfg.protocol.kind == ProtocolKind::zero_shot_unseen) {
    for (const auto& c : cfg.protocol.eval_classes)
      if (seen.count(c)) throw ProtocolError("held-out class '" + c + "' reached a training stage");
  }
  return out;
}

ToyLM obtain_base_lm(const PipelineConfig& cfg, const KnowledgeBundle& kb, std::ostream* log) {
  const auto cache = cache_dir_of(cfg);
  std::filesystem::create_directories(cache);
  const nlohmann::json key = {{"knowledge", cfg.to_json()["knowledge"]},
                              {"lm", cfg.lm.to_json()},
                              {"pretrain", cfg.lm_pretrain.to_json()},
                              {"actions", kb.knowledge.actions.names()}};
  const auto path = cache / ("base_lm-" + hex64(fnv1a64(key.dump())) + ".sgb");
  if (std::filesystem::exists(path)) return ToyLM::load_base(path);
  std::ostringstream lm_log;
  ToyLM lm = pretrain_base_lm(kb.knowledge, kb.bank, cfg.lm, cfg.lm_pretrain, &lm_log);
  write_json_lines(log, "lm", lm_log.str());
  lm.save_base(path);
  return lm;
}

SkeletonEncoder obtain_encoder(const PipelineConfig& cfg, const ToyData& data, const KnowledgeBundle& kb,
                               const TrainingSet& train, std::ostream* log) {
  const auto cache = cache_dir_of(cfg);
  std::filesystem::create_directories(cache);
  TrainConfig tc = cfg.pretrain;
  tc.seed = cfg.seed;
  const nlohmann::json key = {{"encoder", cfg.encoder.to_json()}, {"train", tc.to_json()},
                              {"split", data.split_hash},         {"classes", train.actions.names()},
                              {"knowledge", cfg.to_json()["knowledge"]}};
  const auto path = cache / ("encoder-" + hex64(fnv1a64(key.dump())) + ".sgb");
  if (std::filesystem::exists(path)) return SkeletonEncoder::load(path);
  SkeletonEncoder encoder(cfg.encoder, SkeletonGraph::toy(), cfg.seed);
  std::ostringstream enc_log;
  pretrain(train.samples, train.actions, kb.bank, encoder, tc, &enc_log);
  write_json_lines(log, "encoder", enc_log.str());
  encoder.save(path);
  return encoder;
}

Recognizer finetune_recognizer(const PipelineConfig& cfg, ToyLM base, SkeletonEncoder& encoder,
                               const TrainingSet& train, const KnowledgeBundle& kb, std::ostream* log) {
  TQPConfig tqp = cfg.tqp;
  tqp.input_dim = cfg.encoder.representation_dim();
  tqp.lm_dim = cfg.lm.dim;
  FinetuneConfig fc = cfg.finetune;
  fc.seed = cfg.seed;
  Recognizer recognizer(std::move(base), make_bridge(cfg.bridge, tqp, cfg.seed));
  const auto reps = encoder.encode_all(train.samples);
  std::vector<int> labels;
  for (const auto& s : train.samples) labels.push_back(*s.label);
  std::ostringstream ft_log;
  finetune(recognizer, reps, labels, train.actions, kb.knowledge, fc, &ft_log);
  write_json_lines(log, "finetune", ft_log.str());
  return recognizer;
}

RunArtifacts run_pipeline(const PipelineConfig& cfg, std::ostream* log, const std::string& variant) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string hash = cfg.hash();
  const ToyData data = make_toy_data(cfg);
  const TrainingSet train = make_training_set(cfg, data);
  const KnowledgeBundle kb = make_knowledge(cfg, data.actions);
  const auto run_dir = cfg.output_dir / (cfg.protocol.id + "-" + hash);
  std::filesystem::create_directories(run_dir);

  ToyLM base = obtain_base_lm(cfg, kb, log);
  SkeletonEncoder initial(cfg.encoder, SkeletonGraph::toy(), cfg.seed);
  const double sil_init = silhouette_score(pooled_rows(initial, data.test), labels_of(data.test));
  SkeletonEncoder encoder = obtain_encoder(cfg, data, kb, train, log);
  const double sil_trained = silhouette_score(pooled_rows(encoder, data.test), labels_of(data.test));
  std::ostringstream ft_log;
  Recognizer recognizer = finetune_recognizer(cfg, std::move(base), encoder, train, kb, &ft_log);
  if (log) *log << ft_log.str();

  encoder.save(run_dir / "encoder.sgb");
  recognizer.lm().save_base(run_dir / "base_lm.sgb");
  recognizer.save_adapters(run_dir / "adapters.sgb");
  save_knowledge(run_dir / "knowledge.json", kb.knowledge);
  write_file_atomic(run_dir / "finetune.log", ft_log.str());
  write_file_atomic(run_dir / "config.json", cfg.to_json().dump(2) + "\n");

  std::vector<SkeletonSequence> test;
  const auto scored = cfg.protocol.scored_classes();
  for (const auto& s : data.test) {
    if (contains(scored, data.actions[static_cast<std::size_t>(*s.label)])) test.push_back(s);
  }
  ModelBundle bundle{std::move(encoder), std::move(recognizer)};
  RunArtifacts out;
  out.record = evaluate(cfg.protocol, bundle, test, data.actions, data.confusable);
  out.record.variant = variant;
  out.record.config_hash = hash;
  out.record.seed = cfg.seed;
  out.record.extra["split_hash"] = data.split_hash;
  out.record.extra["silhouette_init"] = sil_init;
  out.record.extra["silhouette_trained"] = sil_trained;
  out.record.extra["trained_classes"] = train.seen_classes;
  out.record.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file_atomic(run_dir / "record.json", out.record.canonical_json().dump(2) + "\n");
  write_file_atomic(run_dir / "timing.json",
                    nlohmann::json{{"wall_clock_seconds", out.record.wall_clock_seconds}}.dump() + "\n");
  out.run_dir = run_dir;
  out.trained_labels = train.seen_classes;
  out.silhouette_init = sil_init;
  out.silhouette_trained = sil_trained;
  if (log) *log << out.record.to_json().dump() << "\n";
  return out;
}

std::vector<RunArtifacts> run_knowledge_ablation(const PipelineConfig& base, std::ostream* log) {
  std::vector<RunArtifacts> out;
  for (auto ch : {KnowledgeChannel::none, KnowledgeChannel::visual, KnowledgeChannel::motion, KnowledgeChannel::both}) {
    PipelineConfig cfg = base;
    cfg.pretrain.channel = ch;
    out.push_back(run_pipeline(cfg, log, "knowledge=" + to_string(ch)));
  }
  return out;
}

std::vector<RunArtifacts> run_bridge_ablation(const PipelineConfig& base, std::ostream* log) {
  std::vector<RunArtifacts> out;
  for (auto kind : {BridgeKind::xattn, BridgeKind::qformer, BridgeKind::linear, BridgeKind::tqp}) {
    PipelineConfig cfg = base;
    cfg.bridge = kind;
    out.push_back(run_pipeline(cfg, log, "bridge=" + to_string(kind)));
  }
  return out;
}

std::vector<RunArtifacts> run_token_length_sweep(const PipelineConfig& base, const std::vector<int>& lengths,
                                                 std::ostream* log) {
  if (lengths.empty()) throw ConfigError("token sweep needs at least one length");
  std::vector<RunArtifacts> out;
  for (int len : lengths) {
    PipelineConfig cfg = base;
    cfg.tqp.query_length = len;
    cfg.tqp.validate();
    out.push_back(run_pipeline(cfg, log, "tokens=" + std::to_string(len)));
  }
  return out;
}

void write_results(const std::filesystem::path& dir, const std::vector<ResultRecord>& records) {
  std::filesystem::create_directories(dir);
  const auto jsonl = dir / "results.jsonl";
  std::string lines = std::filesystem::exists(jsonl) ? read_text(jsonl) : std::string();
  for (const auto& r : records) lines += r.to_json().dump() + "\n";
  write_file_atomic(jsonl, lines);

  std::ostringstream csv;
  csv << "protocol_id,variant,seed,config_hash,top1,top5,mean_per_class,confusable_top1,count\n";
  std::istringstream in(lines);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto& m = j.at("metrics");
    const auto& extra = j.at("extra");
    csv << j.at("protocol_id").get<std::string>() << "," << j.at("variant").get<std::string>() << ","
        << j.at("seed").get<std::uint64_t>() << "," << j.at("config_hash").get<std::string>() << ","
        << format_double(m.at("top1").get<double>()) << "," << format_double(m.at("top5").get<double>()) << ","
        << format_double(m.at("mean_per_class").get<double>()) << ","
        << (extra.contains("confusable_top1") ? format_double(extra.at("confusable_top1").get<double>()) : "")
        << "," << m.at("count").get<std::size_t>() << "\n";
  }
  write_file_atomic(dir / "summary.csv", csv.str());
}

std::vector<double> per_class_silhouette(const Eigen::MatrixXd& points, const std::vector<int>& labels) {
  const Eigen::Index n = points.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw DimensionError("one label per point required");
  std::map<int, int> counts;
  for (int l : labels) {
    if (l < 0) throw ConfigError("labels must be non-negative");
    ++counts[l];
  }
  if (counts.size() < 2) throw ConfigError("silhouette needs at least two classes");
  const int num_labels = counts.rbegin()->first + 1;
  // Pairwise distances from the Gram matrix.
  const Eigen::VectorXd sq = points.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * points * points.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  const Eigen::MatrixXd d = d2.cwiseMax(0.0).cwiseSqrt();
  std::vector<double> sum(static_cast<std::size_t>(num_labels), 0.0);
  std::vector<int> cnt(static_cast<std::size_t>(num_labels), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int li = labels[static_cast<std::size_t>(i)];
    double s = 0.0;
    if (counts[li] > 1) {
      std::vector<double> mean_to(static_cast<std::size_t>(num_labels), 0.0);
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) mean_to[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += d(i, j);
      double a = 0.0;
      double b = std::numeric_limits<double>::infinity();
      for (const auto& [l, c] : counts) {
        if (l == li) {
          a = mean_to[static_cast<std::size_t>(l)] / (c - 1);
        } else {
          b = std::min(b, mean_to[static_cast<std::size_t>(l)] / c);
        }
      }
      const double m = std::max(a, b);
      s = m > 0.0 ? (b - a) / m : 0.0;
    }
    sum[static_cast<std::size_t>(li)] += s;
    ++cnt[static_cast<std::size_t>(li)];
  }
  std::vector<double> out(static_cast<std::size_t>(num_labels), 0.0);
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = cnt[l] > 0 ? sum[l] / cnt[l] : 0.0;
  return out;
}

double silhouette_score(const Eigen::MatrixXd& points, const std::vector<int>& labels) {
  const auto per_class = per_class_silhouette(points, labels);
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  double total = 0.0;
  for (const auto& [l, c] : counts) total += per_class[static_cast<std::size_t>(l)] * c;
  return total / static_cast<double>(labels.size());
}

Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& points, const TsneConfig& cfg) {
  const Eigen::Index n = points.rows();
  if (cfg.perplexity <= 0.0) throw ConfigError("perplexity must be positive");
  if (static_cast<double>(n) < cfg.perplexity + 1.0) throw ConfigError("t-SNE needs more points than perplexity + 1");
  if (cfg.iterations < 1) throw ConfigError("t-SNE needs at least one iteration");

  const Eigen::VectorXd sq = points.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * points * points.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  // Conditional affinities with a per-point bandwidth matched to the
  // perplexity by bisection on the precision.
  const double target = std::log(cfg.perplexity);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    Eigen::VectorXd row(n);
    for (int it = 0; it < 200; ++it) {
      double min_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) min_d = std::min(min_d, d2(i, j));
      double z = 0.0;
      double weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-beta * (d2(i, j) - min_d));
        z += row(j);
        weighted += row(j) * (d2(i, j) - min_d);
      }
      const double entropy = std::log(z) + beta * weighted / z;
      row /= z;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    p.row(i) = row.transpose();
  }
  p = (p + p.transpose()).eval() / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> init(0.0, 1e-4);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = init(rng);
  const double lr = cfg.learning_rate > 0.0
                       ? cfg.learning_rate
                       : std::max(static_cast<double>(n) / cfg.early_exaggeration / 4.0, 50.0);
  Eigen::MatrixXd step = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  for (int it = 0; it < cfg.iterations; ++it) {
    const double exaggeration = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
    const double momentum = it < cfg.exaggeration_iterations ? 0.5 : 0.8;
    const Eigen::VectorXd ysq = y.rowwise().squaredNorm();
    Eigen::MatrixXd num = (-2.0 * y * y.transpose()).colwise() + ysq;
    num.rowwise() += ysq.transpose();
    num = (1.0 + num.array()).inverse().matrix();
    num.diagonal().setZero();
    const Eigen::MatrixXd q = (num / num.sum()).cwiseMax(1e-12);
    const Eigen::MatrixXd w = ((exaggeration * p - q).array() * num.array()).matrix();
    const Eigen::MatrixXd grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      double& g = gains.data()[i];
      g = (grad.data()[i] > 0.0) != (step.data()[i] > 0.0) ? g + 0.2 : g * 0.8;
      g = std::max(g, 0.01);
      step.data()[i] = momentum * step.data()[i] - lr * g * grad.data()[i];
    }
    y += step;
    y.rowwise() -= y.colwise().mean();
  }
  return y;
}

void export_embeddings_2d(const Eigen::MatrixXd& points, const std::vector<int>& labels, const ActionList& actions,
                          const std::filesystem::path& out, const TsneConfig& cfg) {
  if (static_cast<Eigen::Index>(labels.size()) != points.rows()) throw DimensionError("one label per point required");
  for (int l : labels) {
    if (l < 0 || l >= static_cast<int>(actions.size())) throw ConfigError("label outside the action list");
  }
  const auto per_class = per_class_silhouette(points, labels);
  const double overall = silhouette_score(points, labels);
  const Eigen::MatrixXd y = tsne_2d(points, cfg);
  std::ostringstream csv;
  csv << "# silhouette=" << format_double(overall) << "\n";
  std::set<int> present(labels.begin(), labels.end());
  for (int l : present) {
    csv << "# silhouette." << actions[static_cast<std::size_t>(l)] << "="
        << format_double(per_class[static_cast<std::size_t>(l)]) << "\n";
  }
  csv << "# perplexity=" << format_double(cfg.perplexity) << ",iterations=" << cfg.iterations << ",seed=" << cfg.seed
      << "\n";
  csv << "x,y,label\n";
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    csv << format_double(y(i, 0)) << "," << format_double(y(i, 1)) << ","
        << actions[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] << "\n";
  }
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  write_file_atomic(out, csv.str());
}

double binomial_p_value(int successes, int trials, double p) {
  if (trials < 0 || successes < 0 || successes > trials || p < 0.0 || p > 1.0) {
    throw ConfigError("invalid binomial test arguments");
  }
  if (successes == 0) return 1.0;
  const boost::math::binomial_distribution<double> dist(static_cast<double>(trials), p);
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(successes - 1)));
}

}  // namespace sugar
