#include "sugar/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "sugar/errors.hpp"

namespace sugar {

namespace {

constexpr double kPi = std::numbers::pi;

enum Joint { kPelvis = 0, kSpine, kNeck, kHead, kLeftWrist, kRightWrist, kLeftAnkle, kRightAnkle };
enum Axis { kX = 0, kY = 1, kZ = 2 };

struct NamedAction {
  const char* name;
  PartValues values;
  const char* partner;  // confusable partner whose hand lift is `delta` larger
  bool shifted;
};

constexpr NamedAction kToyActions[] = {
    {"drink_bottle", {1, 1, 1, 0, 0, 0}, "drink_can", false},
    {"drink_can", {1, 1, 1, 0, 0, 0}, "drink_bottle", true},
    {"walk", {0, 0, 0, 1, 1, 1}, nullptr, false},
    {"dance", {1, 1, 1, 1, 1, 1}, nullptr, false},
    {"read_book", {0, 0, 0, 0, 0, 0}, "use_phone", false},
    {"use_phone", {0, 0, 0, 0, 0, 0}, "read_book", true},
};

}  // namespace

std::vector<std::vector<Oscillation>> part_oscillations(const PartValues& v, int num_joints) {
  if (num_joints != 8) throw ConfigError("part oscillations are defined for the 8-joint toy graph");
  std::vector<std::vector<Oscillation>> j(8);
  const auto part = [&](BodyPart p) { return v[index_of(p)]; };

  if (part(BodyPart::head) == 0) {
    j[kHead].push_back({kX, 0.04, 1.0, 0.0});
  } else {
    j[kHead].push_back({kZ, 0.25, 1.0, 0.0});
  }
  // The hand lift is the first right-wrist oscillation; confusable partners
  // differ only in its amplitude.
  if (part(BodyPart::hand) == 0) {
    j[kRightWrist].push_back({kY, 0.15, 1.0, kPi / 2});
  } else {
    j[kRightWrist].push_back({kY, 0.45, 1.0, 0.0});
  }
  if (part(BodyPart::arm) == 0) {
    j[kLeftWrist].push_back({kX, 0.05, 1.0, kPi});
    j[kRightWrist].push_back({kX, 0.05, 1.0, 0.0});
  } else {
    j[kLeftWrist].push_back({kX, 0.30, 2.0, kPi});
    j[kRightWrist].push_back({kX, 0.30, 2.0, 0.0});
  }
  if (part(BodyPart::hip) == 0) {
    j[kPelvis].push_back({kY, 0.03, 1.0, 0.0});
    j[kSpine].push_back({kY, 0.03, 1.0, 0.0});
  } else {
    j[kPelvis].push_back({kY, 0.10, 2.0, 0.0});
    j[kSpine].push_back({kZ, 0.20, 1.0, 0.0});
  }
  if (part(BodyPart::leg) == 0) {
    j[kLeftAnkle].push_back({kZ, 0.03, 1.0, 0.0});
    j[kRightAnkle].push_back({kZ, 0.03, 1.0, kPi});
  } else {
    j[kLeftAnkle].push_back({kZ, 0.35, 2.0, 0.0});
    j[kRightAnkle].push_back({kZ, 0.35, 2.0, kPi});
  }
  if (part(BodyPart::foot) == 0) {
    j[kLeftAnkle].push_back({kY, 0.02, 1.0, 0.0});
    j[kRightAnkle].push_back({kY, 0.02, 1.0, kPi});
  } else {
    j[kLeftAnkle].push_back({kY, 0.15, 2.0, kPi / 2});
    j[kRightAnkle].push_back({kY, 0.15, 2.0, 3 * kPi / 2});
  }
  return j;
}

std::vector<SyntheticActionSpec> toy_action_specs(double confusable_delta) {
  std::vector<SyntheticActionSpec> specs;
  for (const auto& a : kToyActions) {
    SyntheticActionSpec spec;
    spec.class_name = a.name;
    spec.joints = part_oscillations(a.values);
    if (a.partner != nullptr) spec.confusable_with = a.partner;
    if (a.shifted) spec.joints[kRightWrist][0].amplitude += confusable_delta;
    specs.push_back(std::move(spec));
  }
  return specs;
}

PartValues toy_part_values(const std::string& class_name) {
  for (const auto& a : kToyActions)
    if (class_name == a.name) return a.values;
  throw LookupError("no toy action named '" + class_name + "'");
}

double parameter_linf_distance(const SyntheticActionSpec& a, const SyntheticActionSpec& b) {
  if (a.joints.size() != b.joints.size()) throw ConfigError("specs differ in joint count");
  double d = 0.0;
  for (std::size_t j = 0; j < a.joints.size(); ++j) {
    if (a.joints[j].size() != b.joints[j].size()) throw ConfigError("specs differ in oscillation structure");
    for (std::size_t k = 0; k < a.joints[j].size(); ++k) {
      const auto& x = a.joints[j][k];
      const auto& y = b.joints[j][k];
      if (x.axis != y.axis) throw ConfigError("specs differ in oscillation axes");
      d = std::max({d, std::abs(x.amplitude - y.amplitude), std::abs(x.frequency - y.frequency),
                    std::abs(x.phase - y.phase)});
    }
  }
  return d;
}

void validate_confusable_pairs(const std::vector<SyntheticActionSpec>& specs, double epsilon) {
  auto find = [&](const std::string& name) -> const SyntheticActionSpec* {
    for (const auto& s : specs)
      if (s.class_name == name) return &s;
    return nullptr;
  };
  for (const auto& s : specs) {
    if (!s.confusable_with) continue;
    const auto* other = find(*s.confusable_with);
    if (other == nullptr) throw ConfigError(s.class_name + " is confusable with unknown " + *s.confusable_with);
    if (!other->confusable_with || *other->confusable_with != s.class_name) {
      throw ConfigError("confusable link " + s.class_name + " -> " + other->class_name + " is not mutual");
    }
    if (parameter_linf_distance(s, *other) >= epsilon) {
      throw ConfigError("confusable pair " + s.class_name + "/" + other->class_name + " exceeds epsilon");
    }
  }
}

namespace {

void render(const SyntheticActionSpec& spec, const Eigen::MatrixXd& rest, int frames, double phase_offset,
            double amplitude_scale, FrameArray& out) {
  const int joints = static_cast<int>(spec.joints.size());
  out.resize(frames, joints * 3);
  for (int t = 0; t < frames; ++t) {
    const double u = static_cast<double>(t) / frames;
    for (int v = 0; v < joints; ++v) {
      double pos[3] = {rest(v, 0), rest(v, 1), rest(v, 2)};
      for (const auto& o : spec.joints[static_cast<std::size_t>(v)]) {
        pos[o.axis] += amplitude_scale * o.amplitude * std::sin(2.0 * kPi * o.frequency * u + o.phase + phase_offset);
      }
      for (int c = 0; c < 3; ++c) out(t, v * 3 + c) = static_cast<float>(pos[c]);
    }
  }
}

}  // namespace

FrameArray prototype_trajectory(const SyntheticActionSpec& spec, const Eigen::MatrixXd& rest_pose, int frames) {
  if (rest_pose.rows() != static_cast<Eigen::Index>(spec.joints.size()) || rest_pose.cols() != 3) {
    throw ConfigError("rest pose does not match the spec's joints");
  }
  FrameArray out;
  render(spec, rest_pose, frames, 0.0, 1.0, out);
  return out;
}

std::vector<SkeletonSequence> generate_synthetic_dataset(const std::vector<SyntheticActionSpec>& specs,
                                                         const SyntheticConfig& cfg, const SkeletonGraph& graph,
                                                         const Eigen::MatrixXd& rest_pose) {
  if (cfg.frames < 2) throw ConfigError("synthetic sequences need T >= 2");
  if (cfg.samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
  if (cfg.subjects < 1) throw ConfigError("subjects must be >= 1");
  if (rest_pose.rows() != graph.num_joints() || rest_pose.cols() != 3) throw ConfigError("rest pose shape");
  for (const auto& s : specs) {
    if (static_cast<int>(s.joints.size()) != graph.num_joints()) {
      throw ConfigError("spec " + s.class_name + " does not match the graph's joint count");
    }
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<SkeletonSequence> out;
  out.reserve(specs.size() * static_cast<std::size_t>(cfg.samples_per_class));
  for (std::size_t c = 0; c < specs.size(); ++c) {
    for (int k = 0; k < cfg.samples_per_class; ++k) {
      SkeletonSequence seq;
      seq.joints = graph.num_joints();
      seq.channels = 3;
      seq.label = static_cast<int>(c);
      seq.subject = k % cfg.subjects;
      const double phase = cfg.phase_jitter * unit(rng);
      const double scale = 1.0 + cfg.amplitude_jitter * unit(rng);
      render(specs[c], rest_pose, cfg.frames, phase, scale, seq.frames);
      if (cfg.jitter_std > 0.0) {
        const double bound = cfg.jitter_clip * cfg.jitter_std;
        for (Eigen::Index i = 0; i < seq.frames.size(); ++i) {
          const double e = std::clamp(cfg.jitter_std * noise(rng), -bound, bound);
          seq.frames.data()[i] += static_cast<float>(e);
        }
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

}  // namespace sugar
