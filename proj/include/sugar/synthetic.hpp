#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sugar/body_parts.hpp"
#include "sugar/skeleton.hpp"

namespace sugar {

/// amplitude * sin(2 pi frequency t / T + phase) along one spatial axis.
struct Oscillation {
  int axis = 0;
  double amplitude = 0.0;
  double frequency = 1.0;  // cycles per sequence
  double phase = 0.0;
};

struct SyntheticActionSpec {
  std::string class_name;
  /// One list of oscillations per joint; a joint's offset from rest is the
  /// sum of its oscillations.
  std::vector<std::vector<Oscillation>> joints;
  std::optional<std::string> confusable_with;
};

struct SyntheticConfig {
  int samples_per_class = 50;
  int frames = 64;
  double jitter_std = 0.02;       // per-coordinate Gaussian noise
  double jitter_clip = 3.0;       // noise clipped to +-clip * std
  double phase_jitter = 0.3;      // per-sample phase offset, uniform in +-value (radians)
  double amplitude_jitter = 0.03; // per-sample amplitude scale, uniform in 1 +- value
  int subjects = 12;              // sample k gets subject k % subjects
  std::uint64_t seed = 7;
};

/// Two-valued movement choice per body part; the toy actions are built from
/// these. Value 0 is a small idle motion, value 1 the pronounced movement.
using PartValues = std::array<int, 6>;

std::vector<std::vector<Oscillation>> part_oscillations(const PartValues& values, int num_joints = 8);

/// The six toy actions: two confusable pairs (drink_bottle/drink_can and
/// read_book/use_phone) that differ only by `confusable_delta` in the
/// right-hand lift amplitude, plus walk and dance.
std::vector<SyntheticActionSpec> toy_action_specs(double confusable_delta = 0.05);

/// Part values of a toy action, used to render matching motion text.
PartValues toy_part_values(const std::string& class_name);

/// Largest absolute difference between corresponding oscillation parameters.
/// Specs must have the same oscillation structure.
double parameter_linf_distance(const SyntheticActionSpec& a, const SyntheticActionSpec& b);

/// Confusable links must be mutual and within `epsilon`. Throws ConfigError.
void validate_confusable_pairs(const std::vector<SyntheticActionSpec>& specs, double epsilon);

/// Noise-free trajectory of a spec, T x (V*3).
FrameArray prototype_trajectory(const SyntheticActionSpec& spec, const Eigen::MatrixXd& rest_pose, int frames);

/// Generates samples_per_class sequences per spec in spec order; the label
/// is the spec index. Deterministic in cfg.seed. Throws ConfigError for T < 2.
std::vector<SkeletonSequence> generate_synthetic_dataset(const std::vector<SyntheticActionSpec>& specs,
                                                         const SyntheticConfig& cfg, const SkeletonGraph& graph,
                                                         const Eigen::MatrixXd& rest_pose);

}  // namespace sugar
