#include "sugar/generator.hpp"

#include <fstream>
#include <sstream>
#include <thread>

#include "sugar/archive.hpp"
#include "sugar/errors.hpp"
#include "sugar/hash.hpp"
#include "sugar/knowledge.hpp"

// After Eigen: resolv.h defines a `_res` macro that collides with Eigen internals.
#include <httplib.h>

#ifndef SUGAR_DATA_DIR
#define SUGAR_DATA_DIR "data"
#endif

namespace sugar {

namespace {

std::string header_value(const std::string& prompt, const std::string& key) {
  std::istringstream in(prompt);
  std::string line;
  const std::string prefix = key + ": ";
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  return {};
}

}  // namespace

std::filesystem::path default_fixture_corpus() { return std::filesystem::path(SUGAR_DATA_DIR) / "fixture_corpus.json"; }

FixtureGenerator::FixtureGenerator(const std::filesystem::path& corpus_path) {
  std::ifstream in(corpus_path);
  if (!in) throw ConfigError("cannot read fixture corpus " + corpus_path.string());
  try {
    corpus_ = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("fixture corpus is not valid JSON: " + std::string(e.what()));
  }
}

FixtureGenerator::FixtureGenerator(nlohmann::json corpus) : corpus_(std::move(corpus)) {}

std::string FixtureGenerator::id() const {
  return "fixture:" + corpus_.value("id", std::string("corpus")) + "@v" + std::to_string(corpus_.value("version", 0));
}

std::string FixtureGenerator::complete(const std::string& prompt) {
  const std::string task = header_value(prompt, "Task");
  const std::string action = header_value(prompt, "Action");
  const auto& actions = corpus_.at("actions");
  if (!actions.contains(action)) throw GeneratorError("fixture corpus has no entry for '" + action + "'");
  const auto& entry = actions.at(action);
  std::string reply;
  if (task == "motion") {
    std::ostringstream out;
    for (auto part : kBodyParts) {
      const std::string key(to_string(part));
      out << key << ": " << entry.at("motion").at(key).get<std::string>() << "\n";
    }
    reply = out.str();
  } else if (task == "visual") {
    const int scene = scene_of_frame_ref(header_value(prompt, "Image"));
    const auto& scenes = entry.at("scenes");
    if (scene < 0 || scene >= static_cast<int>(scenes.size())) {
      throw GeneratorError("fixture corpus cannot describe frame of '" + action + "'");
    }
    reply = scenes.at(static_cast<std::size_t>(scene)).get<std::string>();
  } else if (task == "brief") {
    reply = entry.at("brief").get<std::string>();
  } else {
    throw GeneratorError("fixture generator does not handle task '" + task + "'");
  }
  ++calls_;
  return reply;
}

HttpGenerator::HttpGenerator(HttpGeneratorOptions options) : options_(std::move(options)) {
  const auto scheme = options_.endpoint.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint must look like http://host[:port]/path");
  const auto slash = options_.endpoint.find('/', scheme + 3);
  base_ = options_.endpoint.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : options_.endpoint.substr(slash);
}

std::string HttpGenerator::id() const { return "http:" + options_.model + "@" + options_.endpoint; }

std::string HttpGenerator::complete(const std::string& prompt) {
  httplib::Client client(base_);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  httplib::Headers headers;
  if (!options_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + options_.auth_token);
  nlohmann::json body = {{"model", options_.model},
                         {"temperature", 0},
                         {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
  const std::string payload = body.dump();
  auto backoff = options_.initial_backoff;
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    ++attempts_;
    auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw GeneratorError("generator endpoint returned HTTP " + std::to_string(res->status));
    try {
      auto doc = nlohmann::json::parse(res->body);
      std::string text = doc.at("choices").at(0).at("message").at("content").get<std::string>();
      ++calls_;
      return text;
    } catch (const nlohmann::json::exception& e) {
      throw GeneratorError(std::string("malformed generator response: ") + e.what());
    }
  }
  throw GeneratorError("generator unavailable after " + std::to_string(options_.max_retries + 1) +
                       " attempts: " + last_error);
}

CachingGenerator::CachingGenerator(std::shared_ptr<GeneratorClient> inner, std::filesystem::path cache_dir)
    : inner_(std::move(inner)), dir_(std::move(cache_dir)) {
  std::filesystem::create_directories(dir_);
}

std::string CachingGenerator::complete(const std::string& prompt) {
  const auto key = dir_ / (hex64(fnv1a64(prompt)) + "-" + hex64(fnv1a64(inner_->id())) + ".txt");
  {
    std::ifstream in(key, std::ios::binary);
    if (in) {
      std::ostringstream buf;
      buf << in.rdbuf();
      ++hits_;
      ++calls_;
      return buf.str();
    }
  }
  std::string reply = inner_->complete(prompt);
  write_file_atomic(key, reply);
  ++calls_;
  return reply;
}

}  // namespace sugar
