#include "sugar/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sugar/archive.hpp"
#include "sugar/errors.hpp"
#include "sugar/generator.hpp"
#include "sugar/hash.hpp"

namespace sugar {

ActionList::ActionList(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw ConfigError("action list is empty");
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty() || n.find_first_of(" \t\r\n") != std::string::npos) {
      throw ConfigError("action names must be non-empty single tokens: '" + n + "'");
    }
    if (!seen.insert(n).second) throw ConfigError("duplicate action name '" + n + "'");
  }
}

ActionList ActionList::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read action list " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(b, e - b + 1));
  }
  return ActionList(std::move(names));
}

bool ActionList::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

int ActionList::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw LookupError("unknown action '" + name + "'");
  return static_cast<int>(it - names_.begin());
}

std::string MotionDescription::text() const {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += " . ";
    out += p;
  }
  return out;
}

const KnowledgeRecord& KnowledgeBank::at(const std::string& action) const {
  return records.at(static_cast<std::size_t>(actions.index_of(action)));
}

std::string build_motion_prompt(const std::string& action, const ActionList& actions) {
  if (!actions.contains(action)) throw LookupError("unknown action '" + action + "'");
  std::ostringstream p;
  p << "Task: motion\n"
    << "Action: " << action << "\n"
    << "You describe human actions for a motion dictionary. Break the action \"" << action
    << "\" into the movement of six body parts: head, hand, arm, hip, leg and foot.\n"
    << "Reply with exactly six lines, one per part, formatted as \"<part>: <one short sentence>\".\n"
    << "Example for the action \"clap\":\n"
    << "head: the head faces forward and stays still\n"
    << "hand: the palms meet in front of the chest again and again\n"
    << "arm: the forearms swing inward and outward\n"
    << "hip: the hips stay steady\n"
    << "leg: the legs stand still\n"
    << "foot: the feet stay flat on the floor\n";
  return p.str();
}

std::string build_visual_prompt(const std::string& action, const std::string& frame_ref) {
  if (action.empty()) throw LookupError("visual prompt needs an action");
  std::ostringstream p;
  p << "Task: visual\n"
    << "Action: " << action << "\n"
    << "Image: " << frame_ref << "\n"
    << "Describe this frame of a person performing \"" << action << "\". Rules:\n"
    << "- the description must match the action shown in the image\n"
    << "- mention only the parts of the scene that relate to the action\n"
    << "- add no text or explanation that is unrelated to the action\n";
  return p.str();
}

std::string build_brief_prompt(const std::string& action, const MotionDescription& motion) {
  if (action.empty()) throw LookupError("brief prompt needs an action");
  std::ostringstream p;
  p << "Task: brief\n"
    << "Action: " << action << "\n"
    << "Motion: " << motion.text() << "\n"
    << "Summarize what the person does in one short sentence.\n";
  return p.str();
}

MotionDescription parse_motion_response(const std::string& action, const std::string& response) {
  MotionDescription m;
  m.action = action;
  std::istringstream in(response);
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string key = line.substr(0, colon);
    key.erase(std::remove_if(key.begin(), key.end(), [](unsigned char c) { return std::isspace(c); }), key.end());
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    std::string value = line.substr(colon + 1);
    const auto b = value.find_first_not_of(" \t\r");
    const auto e = value.find_last_not_of(" \t\r");
    value = b == std::string::npos ? "" : value.substr(b, e - b + 1);
    for (auto part : kBodyParts)
      if (key == to_string(part)) m.parts[index_of(part)] = value;
  }
  for (auto part : kBodyParts) {
    if (m.part(part).empty()) {
      throw GeneratorError("motion response for '" + action + "' lacks the " + std::string(to_string(part)) + " line");
    }
  }
  return m;
}

std::vector<int> dedup_frames(const Eigen::MatrixXd& embeddings, double threshold) {
  if (embeddings.rows() < 1) throw PreconditionError("dedup_frames needs at least one embedding");
  if (!(threshold > 0.0 && threshold < 1.0)) throw PreconditionError("dedup threshold must lie in (0, 1)");
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    if (std::abs(embeddings.row(i).norm() - 1.0) > 1e-6) {
      throw PreconditionError("frame embedding " + std::to_string(i) + " is not unit-norm");
    }
  }
  std::vector<int> kept{0};
  Eigen::MatrixXd kept_rows(embeddings.rows(), embeddings.cols());
  kept_rows.row(0) = embeddings.row(0);
  for (Eigen::Index i = 1; i < embeddings.rows(); ++i) {
    const Eigen::Index n = static_cast<Eigen::Index>(kept.size());
    const double best = (kept_rows.topRows(n) * embeddings.row(i).transpose()).maxCoeff();
    if (best < threshold) {
      kept_rows.row(n) = embeddings.row(i);
      kept.push_back(static_cast<int>(i));
    }
  }
  return kept;
}

SyntheticFrameSource::SyntheticFrameSource(ActionList actions, std::vector<int> scene_counts, int dim,
                                           std::uint64_t seed)
    : actions_(std::move(actions)), scene_counts_(std::move(scene_counts)), dim_(dim), seed_(seed) {
  if (scene_counts_.size() != actions_.size()) throw ConfigError("one scene count per action is required");
  for (int k : scene_counts_)
    if (k < 1) throw ConfigError("every action needs at least one scene");
}

namespace {

Eigen::VectorXd seeded_unit(std::uint64_t key, int dim) {
  std::mt19937_64 rng(key);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = n(rng);
  return v.normalized();
}

}  // namespace

FrameBatch SyntheticFrameSource::frames(const std::string& action) const {
  const int idx = actions_.index_of(action);
  const int scenes = scene_counts_[static_cast<std::size_t>(idx)];
  const std::uint64_t base = fnv1a64(action) ^ (seed_ * 0x9e3779b97f4a7c15ULL);
  const Eigen::VectorXd action_dir = seeded_unit(base, dim_);
  std::vector<Eigen::VectorXd> scene_dirs;
  for (int k = 0; k < scenes; ++k) {
    scene_dirs.push_back((0.6 * action_dir + 0.8 * seeded_unit(base + 1 + static_cast<std::uint64_t>(k), dim_)).normalized());
  }
  std::mt19937_64 rng(base ^ 0x5bd1e995ULL);
  std::uniform_int_distribution<int> run_length(2, 4);
  std::normal_distribution<double> noise(0.0, 0.02);
  FrameBatch batch;
  std::vector<Eigen::VectorXd> rows;
  // The camera dwells on each scene for a few frames and the footage
  // revisits every scene once.
  for (int pass = 0; pass < 2; ++pass) {
    for (int k = 0; k < scenes; ++k) {
      const int run = run_length(rng);
      for (int r = 0; r < run; ++r) {
        Eigen::VectorXd e = scene_dirs[static_cast<std::size_t>(k)];
        for (int i = 0; i < dim_; ++i) e(i) += noise(rng);
        rows.push_back(e.normalized());
        batch.frame_refs.push_back(action + "/scene" + std::to_string(k) + "/frame" + std::to_string(rows.size() - 1));
      }
    }
  }
  batch.embeddings.resize(static_cast<Eigen::Index>(rows.size()), dim_);
  for (std::size_t i = 0; i < rows.size(); ++i) batch.embeddings.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return batch;
}

int scene_of_frame_ref(const std::string& frame_ref) {
  const auto at = frame_ref.find("/scene");
  if (at == std::string::npos) return -1;
  std::size_t pos = at + 6;
  int v = 0;
  bool any = false;
  while (pos < frame_ref.size() && std::isdigit(static_cast<unsigned char>(frame_ref[pos]))) {
    v = v * 10 + (frame_ref[pos] - '0');
    ++pos;
    any = true;
  }
  return any ? v : -1;
}

KnowledgeBank generate_knowledge(const ActionList& actions, GeneratorClient& generator, const FrameSource& frames,
                                 const KnowledgeOptions& options) {
  KnowledgeBank bank;
  bank.actions = actions;
  std::vector<std::string> missing;
  for (const auto& action : actions.names()) {
    try {
      KnowledgeRecord rec;
      rec.action = action;
      rec.motion = parse_motion_response(action, generator.complete(build_motion_prompt(action, actions)));
      const FrameBatch batch = frames.frames(action);
      const auto kept = dedup_frames(batch.embeddings, options.dedup_threshold);
      rec.visual.action = action;
      for (int k : kept) {
        const auto& ref = batch.frame_refs[static_cast<std::size_t>(k)];
        std::string text = generator.complete(build_visual_prompt(action, ref));
        if (text.empty()) throw GeneratorError("empty visual description for " + ref);
        rec.visual.descriptions.push_back(std::move(text));
        rec.visual.source_frame_ids.push_back(ref);
      }
      rec.brief = generator.complete(build_brief_prompt(action, rec.motion));
      if (rec.brief.empty()) throw GeneratorError("empty brief description for " + action);
      rec.provenance = "generator=" + generator.id() + "; frames kept " + std::to_string(kept.size()) + "/" +
                       std::to_string(batch.frame_refs.size()) + " at threshold " +
                       std::to_string(options.dedup_threshold);
      bank.records.push_back(std::move(rec));
    } catch (const GeneratorError&) {
      missing.push_back(action);
    }
  }
  if (!missing.empty()) throw PartialResultError(std::move(missing));
  return bank;
}

void save_knowledge(const std::filesystem::path& path, const KnowledgeBank& bank) {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["actions"] = nlohmann::json::array();
  for (const auto& r : bank.records) {
    nlohmann::json rec;
    rec["name"] = r.action;
    for (auto part : kBodyParts) rec["motion"][std::string(to_string(part))] = r.motion.part(part);
    rec["visual"] = r.visual.descriptions;
    rec["frames"] = r.visual.source_frame_ids;
    rec["brief"] = r.brief;
    rec["provenance"] = r.provenance;
    doc["actions"].push_back(std::move(rec));
  }
  write_file_atomic(path, doc.dump(2) + "\n");
}

KnowledgeBank load_knowledge(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read knowledge bank " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("knowledge bank is not valid JSON: " + std::string(e.what()));
  }
  KnowledgeBank bank;
  std::vector<std::string> names;
  for (const auto& rec : doc.at("actions")) {
    KnowledgeRecord r;
    r.action = rec.at("name").get<std::string>();
    r.motion.action = r.action;
    for (auto part : kBodyParts) r.motion.parts[index_of(part)] = rec.at("motion").at(std::string(to_string(part)));
    r.visual.action = r.action;
    r.visual.descriptions = rec.at("visual").get<std::vector<std::string>>();
    r.visual.source_frame_ids = rec.value("frames", std::vector<std::string>{});
    r.brief = rec.at("brief").get<std::string>();
    r.provenance = rec.value("provenance", "");
    names.push_back(r.action);
    bank.records.push_back(std::move(r));
  }
  bank.actions = ActionList(std::move(names));
  return bank;
}

}  // namespace sugar
