#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "sugar/errors.hpp"
#include "sugar/generator.hpp"
#include "sugar/knowledge.hpp"
#include "sugar/text_encoder.hpp"

// After Eigen: <resolv.h> defines a `_res` macro that clashes with Eigen.
#include <httplib.h>

using namespace sugar;

namespace {

ActionList toy_actions() { return ActionList::load(std::filesystem::path(SUGAR_DATA_DIR) / "toy_actions.txt"); }

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("action lists reject duplicates and blanks") {
  CHECK_THROWS_AS(ActionList({"a", "a"}), ConfigError);
  CHECK_THROWS_AS(ActionList({"a", ""}), ConfigError);
  CHECK_THROWS_AS(ActionList(std::vector<std::string>{}), ConfigError);
  const auto list = toy_actions();
  CHECK(list.size() == 6);
  CHECK(list.index_of("walk") == 2);
  CHECK_THROWS_AS(list.index_of("fly"), LookupError);
}

TEST_CASE("motion responses parse into six parts") {
  const std::string ok =
      "head: still\nhand: grips a cup\narm: lifts\nhip: steady\nleg: stands\nfoot: planted\n";
  const auto m = parse_motion_response("drink", ok);
  CHECK(m.part(BodyPart::arm) == "lifts");
  CHECK(m.text().find("grips a cup") != std::string::npos);
  CHECK_THROWS_AS(parse_motion_response("drink", "head: still\nhand: grips\n"), GeneratorError);
  CHECK_THROWS_AS(parse_motion_response("drink", "head: \nhand: a\narm: b\nhip: c\nleg: d\nfoot: e\n"),
                  GeneratorError);
}

TEST_CASE("prompts carry attribution headers") {
  const auto list = toy_actions();
  const auto p = build_motion_prompt("walk", list);
  CHECK(p.find("Task: motion") != std::string::npos);
  CHECK(p.find("Action: walk") != std::string::npos);
  CHECK(build_visual_prompt("walk", "walk/scene1/frame0").find("walk/scene1/frame0") != std::string::npos);
}

TEST_CASE("frame dedup keeps frames dissimilar to every kept frame") {
  Eigen::MatrixXd e(4, 2);
  e << 1, 0, 0.99, std::sqrt(1 - 0.99 * 0.99), 0, 1, std::sqrt(0.5), std::sqrt(0.5);
  // frame 1 is a near copy of 0; frame 3 has cosine 0.707 with both kept frames
  CHECK(dedup_frames(e, 0.9) == std::vector<int>{0, 2, 3});
  CHECK(dedup_frames(e, 0.5) == std::vector<int>{0, 2});
}

TEST_CASE("knowledge generation from the fixture corpus covers every action") {
  const auto list = toy_actions();
  FixtureGenerator gen(default_fixture_corpus());
  SyntheticFrameSource frames(list, {5, 5, 4, 5, 4, 5});
  const auto bank = generate_knowledge(list, gen, frames);
  REQUIRE(bank.records.size() == 6);
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& r = bank.records[i];
    CHECK(r.action == list[i]);
    CHECK_FALSE(r.brief.empty());
    // one description per distinct scene after dedup
    CHECK(r.visual.descriptions.size() == r.visual.source_frame_ids.size());
    CHECK(r.visual.descriptions.size() == static_cast<std::size_t>(std::vector<int>{5, 5, 4, 5, 4, 5}[i]));
  }
  const auto path = fresh_dir("knowledge_io") / "k.json";
  save_knowledge(path, bank);
  const auto back = load_knowledge(path);
  CHECK(back.actions.names() == bank.actions.names());
  CHECK(back.at("dance").motion.text() == bank.at("dance").motion.text());
  CHECK(back.at("dance").visual.descriptions == bank.at("dance").visual.descriptions);
}

TEST_CASE("generation reports the actions it could not cover") {
  FixtureGenerator gen(default_fixture_corpus());
  const ActionList list({"walk", "juggle"});
  SyntheticFrameSource frames(list, {2, 2});
  try {
    generate_knowledge(list, gen, frames);
    FAIL("expected PartialResultError");
  } catch (const PartialResultError& e) {
    CHECK(e.missing_actions() == std::vector<std::string>{"juggle"});
  }
}

TEST_CASE("caching generator answers repeated prompts from disk") {
  auto inner = std::make_shared<FixtureGenerator>(default_fixture_corpus());
  CachingGenerator cache(inner, fresh_dir("generator_cache"));
  const auto prompt = build_motion_prompt("walk", toy_actions());
  const auto first = cache.complete(prompt);
  const auto second = cache.complete(prompt);
  CHECK(first == second);
  CHECK(cache.inner_calls() == 1);
  CHECK(cache.hits() == 1);
}

TEST_CASE("http generator retries transient failures with backoff") {
  httplib::Server server;
  std::atomic<int> requests{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const int n = ++requests;
    if (n <= 2) {
      res.status = n == 1 ? 503 : 429;
      return;
    }
    const auto body = nlohmann::json::parse(req.body);
    const auto prompt = body.at("messages").at(0).at("content").get<std::string>();
    res.set_content(nlohmann::json{{"choices", {{{"message", {{"content", "echo:" + prompt}}}}}}}.dump(),
                    "application/json");
  });
  server.Post("/bad", [](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpGeneratorOptions opt;
  opt.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  opt.initial_backoff = std::chrono::milliseconds(1);
  HttpGenerator gen(opt);
  CHECK(gen.complete("hello") == "echo:hello");
  CHECK(gen.attempts() == 3);
  CHECK(gen.calls() == 1);

  opt.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/bad";
  HttpGenerator bad(opt);
  CHECK_THROWS_AS(bad.complete("x"), GeneratorError);
  CHECK(bad.attempts() == 1);

  server.stop();
  t.join();
}

TEST_CASE("stub text encoder is deterministic, unit norm and token based") {
  StubTextEncoder enc(32, 3);
  const auto a = enc.encode("The person walks.");
  CHECK(a.norm() == doctest::Approx(1.0));
  CHECK((a - enc.encode("the PERSON walks")).norm() < 1e-12);
  CHECK((a - StubTextEncoder(32, 4).encode("the person walks")).norm() > 0.1);
  CHECK_THROWS_AS(enc.encode(" ... "), EncodingError);
}

TEST_CASE("embedding bank text sets and binary round trip") {
  const auto list = toy_actions();
  FixtureGenerator gen(default_fixture_corpus());
  SyntheticFrameSource frames(list, {5, 5, 4, 5, 4, 5});
  const auto bank = encode_bank(generate_knowledge(list, gen, frames), StubTextEncoder(16, 0));
  const auto& e = bank.at("walk");
  CHECK(bank.text_set("walk", KnowledgeChannel::motion).rows() == 1);
  CHECK(bank.text_set("walk", KnowledgeChannel::visual).rows() == e.visual.rows());
  CHECK(bank.text_set("walk", KnowledgeChannel::both).rows() == e.visual.rows() + 1);
  CHECK_THROWS_AS(bank.text_set("walk", KnowledgeChannel::none), ConfigError);
  const auto path = fresh_dir("bank_io") / "bank.sgb";
  write_embedding_bank(path, bank);
  const auto back = read_embedding_bank(path);
  CHECK((back.text_set("walk") - bank.text_set("walk")).cwiseAbs().maxCoeff() < 1e-6);
}
