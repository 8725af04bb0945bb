// Prints one PASS/FAIL line per acceptance criterion; exits non-zero if any
// criterion fails. Usage: acceptance [--work DIR] [--only 1,4,9]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "checks.hpp"
#include "sugar/eval.hpp"

namespace fs = std::filesystem;
using namespace sugar;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.precision(digits);
  out << v;
  return out.str();
}

// Confusable-pair hits pooled over seeds. Every seed has the same test
// split, so the pooled rate equals the mean of per-seed rates, and integer
// cross-multiplication compares rates without rounding.
struct Pooled {
  long hits = 0;
  long count = 0;
  void add(const RunArtifacts& r) {
    hits += r.record.extra.at("confusable_hits").get<long>();
    count += r.record.extra.at("confusable_count").get<long>();
  }
  double rate() const { return count > 0 ? static_cast<double>(hits) / static_cast<double>(count) : 0.0; }
  bool operator>=(const Pooled& o) const { return hits * o.count >= o.hits * count; }
  bool operator<=(const Pooled& o) const { return o >= *this; }
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Acceptance {
 public:
  explicit Acceptance(fs::path work) : work_(std::move(work)) {}

  Outcome gradcheck() {
    const auto t0 = Clock::now();
    struct Item {
      std::string name;
      testing::SizedGradcheck g;
    };
    std::vector<Item> items{{"encoder", testing::gradcheck_encoder()},
                            {"mil-nce", testing::gradcheck_mil_nce()},
                            {"qformer", testing::gradcheck_qformer()},
                            {"tqp", testing::gradcheck_tqp()},
                            {"lora", testing::gradcheck_lora()}};
    const double secs = seconds_since(t0);
    bool ok = secs < 120.0;
    std::string detail;
    for (const auto& it : items) {
      ok = ok && it.g.result.max_relative_error < 1e-4 && it.g.model_parameters <= 5000;
      detail += it.name + " " + fmt(it.g.result.max_relative_error, 2) + " (" +
                std::to_string(it.g.model_parameters) + " params); ";
    }
    return {ok, detail + fmt(secs, 3) + " s"};
  }

  Outcome mil_nce_oracle() {
    const double err = testing::mil_nce_oracle_error(100);
    const double hand = std::abs(testing::mil_nce_two_sample_case() - std::log(1.0 + std::exp(-1.0)));
    return {err <= 1e-10 && hand <= 1e-9, "max |lib - brute| over 100 batches " + fmt(err, 3) +
                                               ", |B=2 - log(1+e^-1)| " + fmt(hand, 3)};
  }

  Outcome structure() {
    bool lengths = true;
    for (int frames : {10, 64, 1000}) lengths = lengths && testing::tqp_output_length(frames) == 16;
    const bool single = testing::single_segment_tqp_matches_qformer();
    const bool lora = testing::lora_zero_init_is_identity();
    const bool frozen = testing::finetune_keeps_frozen_weights() && pipeline_kept_frozen_weights();
    auto yn = [](bool b) { return b ? "yes" : "no"; };
    return {lengths && single && lora && frozen,
            std::string("lengths {10,64,1000}->16: ") + yn(lengths) + ", single segment == qformer: " + yn(single) +
                ", lora zero-init identity: " + yn(lora) + ", base/encoder unchanged: " + yn(frozen)};
  }

  Outcome end_to_end() {
    PipelineConfig cfg = base_config();
    const auto t0 = Clock::now();
    const RunArtifacts r = run(cfg);
    const double secs = seconds_since(t0);
    const ToyData data = make_toy_data(cfg);
    const bool sizes = data.train.size() == 300 && data.test.size() == 60 && r.record.metrics.count == 60;
    const double top1 = r.record.metrics.top1;
    return {sizes && top1 >= 0.9 && secs < 900.0,
            "top1 " + fmt(top1) + " on " + std::to_string(r.record.metrics.count) + " test / " +
                std::to_string(data.train.size()) + " train, " + fmt(secs, 3) + " s (cold caches), seed " +
                std::to_string(cfg.seed)};
  }

  Outcome knowledge_trend() {
    std::map<std::string, Pooled> pooled;
    for (std::uint64_t seed : {1, 2, 3}) {
      PipelineConfig cfg = base_config();
      cfg.seed = seed;
      for (const auto& r : remember(run_knowledge_ablation(cfg))) pooled[r.record.variant].add(r);
    }
    const Pooled& none = pooled["knowledge=none"];
    const Pooled& motion = pooled["knowledge=motion"];
    const Pooled& both = pooled["knowledge=both"];
    std::string detail = "confusable top1 (mean of 3 seeds):";
    for (const char* v : {"none", "visual", "motion", "both"}) {
      const Pooled& p = pooled[std::string("knowledge=") + v];
      detail += std::string(" ") + v + " " + fmt(p.rate()) + " (" + std::to_string(p.hits) + "/" +
                std::to_string(p.count) + ");";
    }
    return {both >= motion && motion >= none, detail};
  }

  Outcome token_trend() {
    const std::vector<int> lengths{64, 16, 4, 1};
    std::map<std::string, Pooled> pooled;
    for (std::uint64_t seed : {1, 2, 3}) {
      PipelineConfig cfg = base_config();
      cfg.seed = seed;
      for (const auto& r : remember(run_token_length_sweep(cfg, lengths))) pooled[r.record.variant].add(r);
    }
    const Pooled& one = pooled["tokens=1"];
    bool ok = true;
    std::string detail = "confusable top1 (mean of 3 seeds):";
    for (int l : lengths) {
      const Pooled& p = pooled["tokens=" + std::to_string(l)];
      ok = ok && one <= p;
      detail += " L=" + std::to_string(l) + " " + fmt(p.rate()) + " (" + std::to_string(p.hits) + "/" +
                std::to_string(p.count) + ");";
    }
    return {ok, detail};
  }

  Outcome zero_shot() {
    int hits = 0;
    int trials = 0;
    double members = 1.0;
    std::string per_seed;
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
      PipelineConfig cfg = base_config();
      cfg.seed = seed;
      cfg.protocol = builtin_protocol("zero_shot_unseen", make_toy_data(cfg).actions);
      const RunArtifacts r = remember(run(cfg));
      hits += r.record.extra.at("top1_hits").get<int>();
      trials += static_cast<int>(r.record.metrics.count);
      members = std::min(members, r.record.extra.at("list_member_rate").get<double>());
      per_seed += " " + fmt(r.record.metrics.top1, 3);
    }
    const double chance = 1.0 / 6.0;
    const double top1 = static_cast<double>(hits) / trials;
    const double p = binomial_p_value(hits, trials, chance);
    return {top1 > chance && p < 0.05 && members == 1.0,
            "unseen top1 " + std::to_string(hits) + "/" + std::to_string(trials) + " = " + fmt(top1) +
                " (per seed" + per_seed + "), one-sided binomial p vs 1/6 = " + fmt(p, 3) +
                ", list-member rate " + fmt(members)};
  }

  Outcome silhouette() {
    if (runs_.empty()) remember(run(base_config()));
    bool ok = true;
    double worst = std::numeric_limits<double>::infinity();
    std::set<std::string> seen;
    for (const auto& r : runs_) {
      const double delta = r.silhouette_trained - r.silhouette_init;
      ok = ok && delta > 0.0;
      worst = std::min(worst, delta);
      seen.insert(std::to_string(r.record.seed));
    }
    return {ok, std::to_string(runs_.size()) + " runs over seeds " + std::to_string(seen.size()) +
                    ", smallest increase " + fmt(worst)};
  }

  Outcome determinism() {
    PipelineConfig cfg = base_config();
    std::vector<fs::path> dirs;
    std::vector<fs::path> runs;
    for (const char* name : {"det_a", "det_b"}) {
      PipelineConfig c = cfg;
      c.output_dir = work_ / name;
      c.cache_dir = work_ / name / "cache";
      fs::remove_all(c.output_dir);
      const RunArtifacts r = run_pipeline(c);
      write_results(c.output_dir, {r.record});
      dirs.push_back(c.output_dir);
      runs.push_back(r.run_dir);
    }
    std::vector<std::string> differing;
    for (const char* f : {"record.json", "encoder.sgb", "base_lm.sgb", "adapters.sgb", "knowledge.json",
                          "finetune.log", "config.json"}) {
      if (bytes_of(runs[0] / f) != bytes_of(runs[1] / f)) differing.push_back(f);
    }
    if (bytes_of(dirs[0] / "summary.csv") != bytes_of(dirs[1] / "summary.csv")) differing.push_back("summary.csv");
    std::string detail = "two cold runs, same manifest and seed: ";
    if (differing.empty()) {
      detail += "record, checkpoints, logs and summary.csv byte-identical";
    } else {
      for (const auto& d : differing) detail += d + " ";
      detail += "differ";
    }
    return {differing.empty(), detail};
  }

 private:
  PipelineConfig base_config() const {
    PipelineConfig cfg = default_pipeline_config();
    cfg.output_dir = work_ / "runs";
    cfg.seed = 1;
    return cfg;
  }

  RunArtifacts run(const PipelineConfig& cfg) { return run_pipeline(cfg); }

  RunArtifacts remember(RunArtifacts r) {
    runs_.push_back(r);
    return r;
  }
  std::vector<RunArtifacts> remember(std::vector<RunArtifacts> rs) {
    for (const auto& r : rs) runs_.push_back(r);
    return rs;
  }

  // The checkpoints written by a full run must carry the cached base LM and
  // encoder untouched by finetuning.
  bool pipeline_kept_frozen_weights() {
    PipelineConfig cfg = base_config();
    const RunArtifacts r = run(cfg);
    const fs::path cache = cfg.output_dir / "cache";
    bool base_ok = false;
    bool enc_ok = false;
    for (const auto& e : fs::directory_iterator(cache)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("base_lm-", 0) == 0) base_ok = base_ok || bytes_of(e.path()) == bytes_of(r.run_dir / "base_lm.sgb");
      if (name.rfind("encoder-", 0) == 0) enc_ok = enc_ok || bytes_of(e.path()) == bytes_of(r.run_dir / "encoder.sgb");
    }
    return base_ok && enc_ok;
  }

  fs::path work_;
  std::vector<RunArtifacts> runs_;
};

std::set<int> parse_only(const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) work = argv[++i];
    else if (a == "--only" && i + 1 < argc) only = parse_only(argv[++i]);
    else {
      std::cerr << "usage: acceptance [--work DIR] [--only 1,4,9]\n";
      return 2;
    }
  }
  // Cold start: criterion 4 is timed including base LM and encoder training.
  fs::remove_all(work);
  fs::create_directories(work);

  Acceptance acc(work);
  // Criterion 8 reads the runs of 5-7, so it goes after them.
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, [&] { return acc.gradcheck(); }},       {2, [&] { return acc.mil_nce_oracle(); }},
      {4, [&] { return acc.end_to_end(); }},      {3, [&] { return acc.structure(); }},
      {5, [&] { return acc.knowledge_trend(); }}, {6, [&] { return acc.token_trend(); }},
      {7, [&] { return acc.zero_shot(); }},       {8, [&] { return acc.silhouette(); }},
      {9, [&] { return acc.determinism(); }}};
  std::map<int, Outcome> results;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    try {
      results[id] = fn();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("error: ") + e.what()};
    }
    std::cerr << "[criterion " << id << " took " << fmt(seconds_since(t0), 3) << " s]\n";
  }
  bool all = true;
  for (const auto& [id, o] : results) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << "\n";
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
