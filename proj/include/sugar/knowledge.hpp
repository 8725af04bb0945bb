#pragma once

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "sugar/body_parts.hpp"

namespace sugar {

class GeneratorClient;

/// Ordered, duplicate-free list of action names; index = class id.
class ActionList {
 public:
  ActionList() = default;
  /// Throws ConfigError when empty or when a name repeats or is blank.
  explicit ActionList(std::vector<std::string> names);

  /// One name per line; blank lines and '#' comments are skipped.
  static ActionList load(const std::filesystem::path& path);

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  const std::string& operator[](std::size_t i) const { return names_[i]; }
  bool contains(const std::string& name) const;
  /// Throws LookupError for unknown names.
  int index_of(const std::string& name) const;

 private:
  std::vector<std::string> names_;
};

struct MotionDescription {
  std::string action;
  std::array<std::string, 6> parts;  // indexed by BodyPart

  const std::string& part(BodyPart p) const { return parts[index_of(p)]; }
  /// All six sentences joined into one text.
  std::string text() const;
};

struct VisualDescriptionSet {
  std::string action;
  std::vector<std::string> descriptions;
  std::vector<std::string> source_frame_ids;
};

struct KnowledgeRecord {
  std::string action;
  MotionDescription motion;
  VisualDescriptionSet visual;
  std::string brief;  // one-sentence summary used as the recognizer's description target
  std::string provenance;
};

struct KnowledgeBank {
  ActionList actions;
  std::vector<KnowledgeRecord> records;  // parallel to actions

  const KnowledgeRecord& at(const std::string& action) const;
};

// Prompt construction. Every prompt carries "Task:" and "Action:" header
// lines so responses can be attributed.
std::string build_motion_prompt(const std::string& action, const ActionList& actions);
std::string build_visual_prompt(const std::string& action, const std::string& frame_ref);
std::string build_brief_prompt(const std::string& action, const MotionDescription& motion);

/// Parses "<part>: <sentence>" lines. Throws GeneratorError when a part is
/// missing or empty.
MotionDescription parse_motion_response(const std::string& action, const std::string& response);

/// Greedy dissimilarity filter over unit-norm frame embeddings (rows). A
/// frame is kept iff its cosine similarity to every previously kept frame is
/// below `threshold`; frame 0 is always kept.
std::vector<int> dedup_frames(const Eigen::MatrixXd& embeddings, double threshold);

/// Embeddings of the frames sampled from one action's footage.
struct FrameBatch {
  std::vector<std::string> frame_refs;
  Eigen::MatrixXd embeddings;  // one unit row per frame
};

/// Supplies frame embeddings per action (produced upstream by an image
/// encoder, or synthetically).
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual FrameBatch frames(const std::string& action) const = 0;
};

/// Synthetic footage: each action shows a handful of scenes, each held for
/// several near-identical frames. Scene k of action a is referenced as
/// "a/scene<k>/frame<i>".
class SyntheticFrameSource : public FrameSource {
 public:
  /// `scene_counts[i]` is the number of distinct scenes of action i.
  SyntheticFrameSource(ActionList actions, std::vector<int> scene_counts, int dim = 64, std::uint64_t seed = 11);
  FrameBatch frames(const std::string& action) const override;

 private:
  ActionList actions_;
  std::vector<int> scene_counts_;
  int dim_;
  std::uint64_t seed_;
};

/// Scene index encoded in a synthetic frame reference, or -1.
int scene_of_frame_ref(const std::string& frame_ref);

struct KnowledgeOptions {
  double dedup_threshold = 0.85;
};

/// Runs the motion, visual and brief prompts for every action.
/// Throws PartialResultError naming the actions whose generation failed.
KnowledgeBank generate_knowledge(const ActionList& actions, GeneratorClient& generator, const FrameSource& frames,
                                 const KnowledgeOptions& options = {});

void save_knowledge(const std::filesystem::path& path, const KnowledgeBank& bank);
KnowledgeBank load_knowledge(const std::filesystem::path& path);

}  // namespace sugar
