#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

namespace sugar {

/// Text generation backend (a chat LLM or a vision-language model).
class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  virtual std::string id() const = 0;
  /// Throws GeneratorError when no response can be produced.
  virtual std::string complete(const std::string& prompt) = 0;
  /// Number of completions actually produced by this client.
  long calls() const { return calls_.load(); }

 protected:
  std::atomic<long> calls_{0};
};

/// Answers prompts from a bundled, versioned JSON corpus:
/// {"version": N, "id": "...", "actions": {name: {"motion": {part: text},
///  "scenes": [text...], "brief": text}}}.
class FixtureGenerator : public GeneratorClient {
 public:
  explicit FixtureGenerator(const std::filesystem::path& corpus_path);
  explicit FixtureGenerator(nlohmann::json corpus);

  std::string id() const override;
  std::string complete(const std::string& prompt) override;

  const nlohmann::json& corpus() const { return corpus_; }

 private:
  nlohmann::json corpus_;
};

/// Default location of the bundled corpus.
std::filesystem::path default_fixture_corpus();

struct HttpGeneratorOptions {
  std::string endpoint;  // e.g. http://host:port/v1/chat/completions
  std::string auth_token;
  std::string model = "gpt-3.5-turbo";
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
  std::chrono::seconds timeout{30};
};

/// Chat-completions style HTTP client with exponential backoff. Retries on
/// transport errors, 429 and 5xx; other statuses fail immediately.
class HttpGenerator : public GeneratorClient {
 public:
  explicit HttpGenerator(HttpGeneratorOptions options);

  std::string id() const override;
  std::string complete(const std::string& prompt) override;

  long attempts() const { return attempts_.load(); }

 private:
  HttpGeneratorOptions options_;
  std::string base_;
  std::string path_;
  std::atomic<long> attempts_{0};
};

/// Disk cache keyed by (prompt hash, generator id). Entries are written
/// atomically, so concurrent writers of the same key are harmless.
class CachingGenerator : public GeneratorClient {
 public:
  CachingGenerator(std::shared_ptr<GeneratorClient> inner, std::filesystem::path cache_dir);

  std::string id() const override { return inner_->id(); }
  std::string complete(const std::string& prompt) override;

  long inner_calls() const { return inner_->calls(); }
  long hits() const { return hits_.load(); }

 private:
  std::shared_ptr<GeneratorClient> inner_;
  std::filesystem::path dir_;
  std::atomic<long> hits_{0};
};

}  // namespace sugar
