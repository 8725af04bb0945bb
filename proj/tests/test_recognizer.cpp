#include <doctest.h>

#include <filesystem>

#include "checks.hpp"
#include "sugar/errors.hpp"
#include "sugar/generator.hpp"
#include "sugar/recognizer.hpp"
#include "sugar/synthetic.hpp"

using namespace sugar;

namespace {

struct Fixture {
  ActionList actions = ActionList::load(std::filesystem::path(SUGAR_DATA_DIR) / "toy_actions.txt");
  KnowledgeBank knowledge;
  LMConfig lm_cfg;
  TQPConfig tqp_cfg;

  Fixture() {
    FixtureGenerator gen(default_fixture_corpus());
    SyntheticFrameSource frames(actions, {5, 5, 4, 5, 4, 5});
    knowledge = generate_knowledge(actions, gen, frames);
    lm_cfg.layers = 1;
    lm_cfg.dim = 16;
    lm_cfg.mlp_dim = 32;
    lm_cfg.heads = 2;
    tqp_cfg.input_dim = 6;
    tqp_cfg.model_dim = 16;
    tqp_cfg.ffn_dim = 32;
    tqp_cfg.heads = 2;
    tqp_cfg.lm_dim = lm_cfg.dim;
    tqp_cfg.query_length = 4;
    tqp_cfg.qformer_layers = 1;
  }

  Recognizer make() {
    return Recognizer(ToyLM(build_vocab(actions, knowledge), lm_cfg, 1), make_bridge(BridgeKind::tqp, tqp_cfg, 2));
  }

  SkeletonRepresentation rep(std::uint64_t seed, int frames = 12) const {
    SkeletonRepresentation r;
    r.values = sugar::testing::gaussian_matrix(frames, tqp_cfg.input_dim, seed);
    r.pooled = Eigen::VectorXd::Unit(4, 0);
    return r;
  }
};

}  // namespace

TEST_CASE("instruction rendering and targets") {
  const auto text = render_instruction({"walk", "dance"});
  CHECK(text.find("[action list]") == std::string::npos);
  CHECK(text.find("from walk dance .") != std::string::npos);
  CHECK(text.find(Vocab::kAct) != std::string::npos);
  CHECK(text.find(Vocab::kAct) == text.rfind(Vocab::kAct));
  CHECK(target_text("walk", "the person  walks") == "walk . the person walks");
}

TEST_CASE("assembled input splices the action tokens and marks only target positions") {
  Fixture f;
  Recognizer rec = f.make();
  const Eigen::MatrixXd tokens = sugar::testing::gaussian_matrix(3, f.lm_cfg.dim, 5);
  const std::string target = target_text("walk", f.knowledge.at("walk").brief);
  const auto in = assemble_input(rec.lm(), {render_instruction(f.actions.names()), ad::constant(tokens), target});
  const auto& vocab = rec.lm().vocab();
  const int target_len = static_cast<int>(vocab.encode(target).size());
  REQUIRE(static_cast<int>(in.ids.size()) == in.embeddings.rows());
  CHECK(in.ids.front() == vocab.bos());
  CHECK(in.act_length == 3);
  for (int i = 0; i < 3; ++i) CHECK(in.ids[static_cast<std::size_t>(in.act_offset + i)] == vocab.act());
  CHECK(static_cast<int>(in.ids.size()) == in.prompt_length + target_len + 1);
  int counted = 0;
  for (std::size_t t = 0; t < in.targets.size(); ++t) {
    if (in.targets[t] < 0) continue;
    ++counted;
    CHECK(static_cast<int>(t) >= in.prompt_length - 1);
    CHECK(in.targets[t] == in.ids[t + 1]);
  }
  CHECK(counted == target_len + 1);  // target words plus <EOS>
  CHECK(in.ids.back() == vocab.eos());

  CHECK_THROWS_AS(assemble_input(rec.lm(), {"Given a sequence", ad::constant(tokens), ""}), VocabError);
  CHECK_THROWS_AS(assemble_input(rec.lm(), {render_instruction({"juggle"}), ad::constant(tokens), ""}), VocabError);
}

TEST_CASE("predictions are ranked list members with descending scores") {
  Fixture f;
  Recognizer rec = f.make();
  const auto rep = f.rep(7);
  const auto scores = rec.score_classes(rec.bridge().project(rep), f.actions);
  const auto p = rec.predict(rep, f.actions, 6, true);
  REQUIRE(p.ranked.size() == 6);
  for (std::size_t i = 0; i < p.ranked.size(); ++i) {
    CHECK(f.actions.contains(p.ranked[i]));
    CHECK(p.scores[i] == scores[static_cast<std::size_t>(f.actions.index_of(p.ranked[i]))]);
    if (i > 0) CHECK(p.scores[i] <= p.scores[i - 1]);
  }
  CHECK_THROWS_AS(rec.predict(rep, f.actions, 0), ConfigError);
  CHECK_THROWS_AS(rec.predict(rep, f.actions, 7), ConfigError);
}

TEST_CASE("finetuning leaves the base LM and encoder bit-identical") {
  CHECK(sugar::testing::finetune_keeps_frozen_weights());
}

TEST_CASE("finetuning lowers the loss and adapters reload to identical scores") {
  Fixture f;
  Recognizer rec = f.make();
  round_to_storage_precision(rec.lm().base_parameters());  // as a pretrained base would be
  std::vector<SkeletonRepresentation> reps;
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) {
    reps.push_back(f.rep(100 + static_cast<std::uint64_t>(i)));
    labels.push_back(i % 6);
  }
  FinetuneConfig fc;
  fc.epochs = 8;
  fc.lr = 1e-2;
  fc.batch_size = 4;
  const auto log = finetune(rec, reps, labels, f.actions, f.knowledge, fc);
  REQUIRE(log.size() == 8);
  CHECK(log.back().loss < log.front().loss);

  const auto dir = std::filesystem::temp_directory_path() / "adapters_io";
  std::filesystem::create_directories(dir);
  rec.lm().save_base(dir / "base.sgb");
  rec.save_adapters(dir / "adapters.sgb");
  Recognizer back = Recognizer::load(ToyLM::load_base(dir / "base.sgb"), dir / "adapters.sgb");
  for (int i = 0; i < 3; ++i) {
    const auto r = f.rep(200 + static_cast<std::uint64_t>(i));
    CHECK(rec.score_classes(rec.bridge().project(r), f.actions) ==
          back.score_classes(back.bridge().project(r), f.actions));
  }
}
