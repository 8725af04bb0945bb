#include <doctest.h>

#include <filesystem>

#include "checks.hpp"
#include "sugar/errors.hpp"
#include "sugar/lm.hpp"

using namespace sugar;

TEST_CASE("LoRA gradients match finite differences") {
  const auto g = sugar::testing::gradcheck_lora();
  CHECK(g.model_parameters <= 5000);
  CHECK(g.result.max_relative_error < 1e-4);
}

TEST_CASE("zero-initialized LoRA is the identity") { CHECK(sugar::testing::lora_zero_init_is_identity()); }

TEST_CASE("lora_forward matches the explicit merged weight") {
  const Eigen::MatrixXd x = sugar::testing::gaussian_matrix(4, 6, 1);
  const Eigen::MatrixXd w = sugar::testing::gaussian_matrix(5, 6, 2);
  const Eigen::MatrixXd a = sugar::testing::gaussian_matrix(2, 6, 3);
  const Eigen::MatrixXd b = sugar::testing::gaussian_matrix(5, 2, 4);
  const Eigen::MatrixXd merged = w + (8.0 / 2.0) * b * a;
  CHECK((lora_forward<double>(x, w, a, b, 8.0) - x * merged.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(lora_forward<double>(x, w, a.topRows(0), b.leftCols(0), 8.0), ConfigError);
  CHECK_THROWS_AS(validate_lora(7, 1.0, 6, 5), ConfigError);
  CHECK_THROWS_AS(validate_lora(2, 0.0, 6, 5), ConfigError);
}

TEST_CASE("vocab encodes, decodes and rejects unknown words") {
  Vocab v({"the", "person", "walks", "the"});
  CHECK(v.size() == 6);
  CHECK(v.token(v.bos()) == Vocab::kBos);
  CHECK(v.decode(v.encode("the person walks")) == "the person walks");
  CHECK_THROWS_AS(v.encode("the dog"), VocabError);
}

TEST_CASE("LM is causal: later tokens do not change earlier logits") {
  LMConfig cfg;
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.mlp_dim = 32;
  cfg.heads = 2;
  cfg.max_positions = 16;
  ToyLM lm(Vocab({"a", "b", "c"}), cfg, 1);
  ad::NoGradGuard guard;
  const auto x = lm.forward(lm.add_positions(lm.embed({0, 3, 4, 5}), 1), 1).value();
  const auto y = lm.forward(lm.add_positions(lm.embed({0, 3, 5, 3}), 1), 1).value();
  CHECK((x.topRows(2) - y.topRows(2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((x.row(2) - y.row(2)).norm() > 1e-6);
}

TEST_CASE("base and adapter archives round-trip") {
  LMConfig cfg;
  cfg.layers = 1;
  cfg.dim = 8;
  cfg.mlp_dim = 16;
  cfg.heads = 2;
  ToyLM lm(Vocab({"a", "b"}), cfg, 3);
  const auto dir = std::filesystem::temp_directory_path() / "lm_ckpt";
  std::filesystem::create_directories(dir);
  lm.save_base(dir / "base.sgb");
  ToyLM back = ToyLM::load_base(dir / "base.sgb");
  CHECK(back.vocab().tokens() == lm.vocab().tokens());
  back.save_base(dir / "base2.sgb");
  ToyLM again = ToyLM::load_base(dir / "base2.sgb");
  CHECK(again.base_checksum() == back.base_checksum());

  LoraConfig lc;
  lc.rank = 2;
  back.attach_lora(lc, 4);
  for (auto* p : back.lora_parameters()) p->value.setConstant(0.25);
  const auto archive = back.adapter_archive();
  again.load_adapters(archive);
  CHECK(again.has_lora());
  for (auto* p : again.lora_parameters()) CHECK(p->value.isConstant(0.25));
}
