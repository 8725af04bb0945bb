#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sugar/archive.hpp"
#include "sugar/errors.hpp"
#include "sugar/eval.hpp"
#include "sugar/generator.hpp"
#include "sugar/skeleton_io.hpp"

namespace fs = std::filesystem;
using namespace sugar;

namespace {

PipelineConfig config_from(const std::string& manifest) {
  return manifest.empty() ? default_pipeline_config() : load_manifest(manifest);
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::uint64_t> seeds_or(const std::vector<std::uint64_t>& seeds, std::uint64_t fallback) {
  return seeds.empty() ? std::vector<std::uint64_t>{fallback} : seeds;
}

void print_record(const ResultRecord& r) { std::cout << r.to_json().dump() << "\n"; }

void write_all(const PipelineConfig& cfg, const std::vector<RunArtifacts>& runs) {
  std::vector<ResultRecord> records;
  for (const auto& a : runs) {
    print_record(a.record);
    records.push_back(a.record);
  }
  write_results(cfg.output_dir, records);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-guided skeleton action recognition (toy scale)"};
  app.require_subcommand(1);
  std::string manifest;
  bool verbose = false;
  app.add_option("--manifest", manifest, "INI manifest; defaults apply when omitted");
  app.add_flag("-v,--verbose", verbose, "Stream training logs to stderr");

  // data-gen
  auto* data_gen = app.add_subcommand("data-gen", "Write the toy train/test splits as skeleton files");
  fs::path data_out = "toy_data";
  data_gen->add_option("--out", data_out, "Output directory");

  // build-knowledge
  auto* build_knowledge = app.add_subcommand("build-knowledge", "Generate the knowledge bank for the action list");
  fs::path knowledge_out = "knowledge.json";
  fs::path actions_path;
  fs::path bank_out;
  std::string generator_kind = "fixture";
  HttpGeneratorOptions http;
  fs::path generator_cache;
  build_knowledge->add_option("--out", knowledge_out, "Output JSON");
  build_knowledge->add_option("--actions", actions_path, "Action list file (default: toy classes)");
  build_knowledge->add_option("--bank", bank_out, "Also write the embedding bank");
  build_knowledge->add_option("--generator", generator_kind, "fixture | http")
      ->check(CLI::IsMember({"fixture", "http"}));
  build_knowledge->add_option("--endpoint", http.endpoint, "Chat-completions URL for --generator http");
  build_knowledge->add_option("--token", http.auth_token, "Bearer token")->envname("GENERATOR_TOKEN");
  build_knowledge->add_option("--model-name", http.model, "Model field of each request");
  build_knowledge->add_option("--cache", generator_cache, "Response cache directory");

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Contrastively pretrain the skeleton encoder");
  fs::path encoder_out = "encoder.sgb";
  pretrain_cmd->add_option("--out", encoder_out, "Encoder checkpoint");

  // finetune
  auto* finetune_cmd = app.add_subcommand("finetune", "Finetune bridge and adapters on a pretrained encoder");
  fs::path ft_encoder;
  fs::path ft_out = "model";
  finetune_cmd->add_option("--encoder,--ckpt", ft_encoder, "Encoder checkpoint (pretrained on the fly when omitted)");
  finetune_cmd->add_option("--out", ft_out, "Directory for base_lm.sgb, adapters.sgb and encoder.sgb");

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "Rank a candidate list for every sequence of a skeleton file");
  fs::path model_dir = "model";
  fs::path input;
  std::string list_text;
  fs::path list_file;
  int top_k = 1;
  bool describe = false;
  predict_cmd->add_option("--model", model_dir, "Directory written by finetune or run");
  predict_cmd->add_option("--input", input, "Skeleton file")->required();
  auto* list_opt = predict_cmd->add_option("--list", list_text, "Comma-separated candidate actions");
  auto* actions_opt = predict_cmd->add_option("--actions", list_file, "Candidate action list file");
  list_opt->excludes(actions_opt);
  actions_opt->excludes(list_opt);
  predict_cmd->add_option("--top-k,--topk", top_k, "Ranked names to print");
  predict_cmd->add_flag("--describe", describe, "Also generate a description");

  // run
  auto* run_cmd = app.add_subcommand("run", "Run the full pipeline described by --manifest");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Run a built-in protocol over one or more seeds");
  std::string protocol_name = "closed_set";
  std::vector<std::uint64_t> seeds;
  eval_cmd->add_option("--protocol", protocol_name, "closed_set | zero_shot_unseen | zero_shot_cross_list");
  eval_cmd->add_option("--seeds", seeds, "Seeds (default: manifest seed)")->delimiter(',');

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Ablation grids");
  ablate_cmd->require_subcommand(1);
  auto* ab_knowledge = ablate_cmd->add_subcommand("knowledge", "none / visual / motion / both");
  auto* ab_bridge = ablate_cmd->add_subcommand("bridge", "xattn / qformer / linear / tqp");
  auto* ab_tokens = ablate_cmd->add_subcommand("tokens", "Query-length sweep");
  std::vector<int> lengths{64, 16, 4, 1};
  ab_tokens->add_option("--lengths", lengths, "Query lengths")->delimiter(',');
  for (auto* sub : {ab_knowledge, ab_bridge, ab_tokens}) {
    sub->add_option("--seeds", seeds, "Seeds (default: manifest seed)")->delimiter(',');
  }

  // export-tsne
  auto* tsne_cmd = app.add_subcommand("export-tsne", "2-D t-SNE of pooled test representations");
  fs::path tsne_out = "tsne.csv";
  std::string stage = "trained";
  TsneConfig tsne;
  tsne_cmd->add_option("--out", tsne_out, "CSV output");
  tsne_cmd->add_option("--stage", stage, "init | trained")->check(CLI::IsMember({"init", "trained"}));
  tsne_cmd->add_option("--perplexity", tsne.perplexity, "t-SNE perplexity");
  tsne_cmd->add_option("--iterations", tsne.iterations, "t-SNE iterations");

  CLI11_PARSE(app, argc, argv);
  std::ostream* log = verbose ? &std::cerr : nullptr;

  try {
    PipelineConfig cfg = config_from(manifest);

    if (data_gen->parsed()) {
      const ToyData data = make_toy_data(cfg);
      fs::create_directories(data_out);
      write_skeleton_file(data_out / "train.skl", data.train);
      write_skeleton_file(data_out / "test.skl", data.test);
      std::string names;
      for (const auto& n : data.actions.names()) names += n + "\n";
      write_file_atomic(data_out / "actions.txt", names);
      std::cout << "train " << data.train.size() << " test " << data.test.size() << " split " << data.split_hash
                << "\n";
    } else if (build_knowledge->parsed()) {
      const ActionList actions = actions_path.empty() ? make_toy_data(cfg).actions : ActionList::load(actions_path);
      std::shared_ptr<GeneratorClient> gen;
      if (generator_kind == "http") {
        if (http.endpoint.empty()) throw ConfigError("--generator http needs --endpoint");
        gen = std::make_shared<HttpGenerator>(http);
      } else {
        gen = std::make_shared<FixtureGenerator>(cfg.corpus.empty() ? default_fixture_corpus() : cfg.corpus);
      }
      if (!generator_cache.empty()) gen = std::make_shared<CachingGenerator>(gen, generator_cache);
      const KnowledgeBundle kb = make_knowledge(cfg, actions, gen.get());
      save_knowledge(knowledge_out, kb.knowledge);
      if (!bank_out.empty()) write_embedding_bank(bank_out, kb.bank);
      std::cout << "wrote " << kb.knowledge.records.size() << " records to " << knowledge_out.string() << "\n";
    } else if (pretrain_cmd->parsed()) {
      const ToyData data = make_toy_data(cfg);
      const TrainingSet train = make_training_set(cfg, data);
      const KnowledgeBundle kb = make_knowledge(cfg, data.actions);
      SkeletonEncoder encoder = obtain_encoder(cfg, data, kb, train, log);
      encoder.save(encoder_out);
      std::cout << "wrote " << encoder_out.string() << "\n";
    } else if (finetune_cmd->parsed()) {
      const ToyData data = make_toy_data(cfg);
      const TrainingSet train = make_training_set(cfg, data);
      const KnowledgeBundle kb = make_knowledge(cfg, data.actions);
      SkeletonEncoder encoder =
          ft_encoder.empty() ? obtain_encoder(cfg, data, kb, train, log) : SkeletonEncoder::load(ft_encoder);
      ToyLM base = obtain_base_lm(cfg, kb, log);
      Recognizer recognizer = finetune_recognizer(cfg, std::move(base), encoder, train, kb, log);
      fs::create_directories(ft_out);
      encoder.save(ft_out / "encoder.sgb");
      recognizer.lm().save_base(ft_out / "base_lm.sgb");
      recognizer.save_adapters(ft_out / "adapters.sgb");
      std::cout << "wrote " << ft_out.string() << "\n";
    } else if (predict_cmd->parsed()) {
      SkeletonEncoder encoder = SkeletonEncoder::load(model_dir / "encoder.sgb");
      Recognizer recognizer = Recognizer::load(ToyLM::load_base(model_dir / "base_lm.sgb"), model_dir / "adapters.sgb");
      if (list_text.empty() && list_file.empty()) throw ConfigError("predict needs --list or --actions");
      const ActionList list = list_file.empty() ? ActionList(split_names(list_text)) : ActionList::load(list_file);
      const auto seqs = read_skeleton_file(input);
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto p = recognizer.predict(encoder.encode(seqs[i]), list, top_k, describe);
        nlohmann::json j = {{"index", i}, {"ranked", p.ranked}, {"scores", p.scores}};
        if (describe) j["description"] = p.description;
        if (seqs[i].label) j["label"] = *seqs[i].label;
        std::cout << j.dump() << "\n";
      }
    } else if (run_cmd->parsed()) {
      if (manifest.empty()) throw ConfigError("run needs --manifest");
      write_all(cfg, {run_pipeline(cfg, log)});
    } else if (eval_cmd->parsed()) {
      cfg.protocol = builtin_protocol(protocol_name, make_toy_data(cfg).actions);
      std::vector<RunArtifacts> runs;
      for (auto s : seeds_or(seeds, cfg.seed)) {
        cfg.seed = s;
        runs.push_back(run_pipeline(cfg, log));
      }
      write_all(cfg, runs);
      if (cfg.protocol.kind == ProtocolKind::zero_shot_unseen) {
        int hits = 0;
        int trials = 0;
        for (const auto& r : runs) {
          hits += r.record.extra.at("top1_hits").get<int>();
          trials += static_cast<int>(r.record.metrics.count);
        }
        const double chance = 1.0 / static_cast<double>(cfg.protocol.inference_list().size());
        std::cout << "unseen top1 " << hits << "/" << trials << " chance " << chance
                  << " p " << binomial_p_value(hits, trials, chance) << "\n";
      }
    } else if (ablate_cmd->parsed()) {
      std::vector<RunArtifacts> runs;
      for (auto s : seeds_or(seeds, cfg.seed)) {
        cfg.seed = s;
        std::vector<RunArtifacts> rows;
        if (ab_knowledge->parsed()) rows = run_knowledge_ablation(cfg, log);
        else if (ab_bridge->parsed()) rows = run_bridge_ablation(cfg, log);
        else rows = run_token_length_sweep(cfg, lengths, log);
        runs.insert(runs.end(), rows.begin(), rows.end());
      }
      write_all(cfg, runs);
    } else if (tsne_cmd->parsed()) {
      const ToyData data = make_toy_data(cfg);
      const TrainingSet train = make_training_set(cfg, data);
      const KnowledgeBundle kb = make_knowledge(cfg, data.actions);
      SkeletonEncoder encoder = stage == "init" ? SkeletonEncoder(cfg.encoder, SkeletonGraph::toy(), cfg.seed)
                                                : obtain_encoder(cfg, data, kb, train, log);
      const auto reps = encoder.encode_all(data.test);
      Eigen::MatrixXd points(static_cast<Eigen::Index>(reps.size()), reps.front().pooled.size());
      std::vector<int> labels;
      for (std::size_t i = 0; i < reps.size(); ++i) {
        points.row(static_cast<Eigen::Index>(i)) = reps[i].pooled.transpose();
        labels.push_back(*data.test[i].label);
      }
      tsne.seed = cfg.seed;
      export_embeddings_2d(points, labels, data.actions, tsne_out, tsne);
      std::cout << "wrote " << tsne_out.string() << " silhouette " << silhouette_score(points, labels) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
