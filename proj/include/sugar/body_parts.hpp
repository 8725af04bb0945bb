#pragma once

#include <array>
#include <string>
#include <string_view>

namespace sugar {

/// The six body parts every motion description is decomposed into.
enum class BodyPart { head, hand, arm, hip, leg, foot };

inline constexpr std::array<BodyPart, 6> kBodyParts = {BodyPart::head, BodyPart::hand, BodyPart::arm,
                                                       BodyPart::hip,  BodyPart::leg,  BodyPart::foot};

constexpr std::string_view to_string(BodyPart p) {
  switch (p) {
    case BodyPart::head: return "head";
    case BodyPart::hand: return "hand";
    case BodyPart::arm: return "arm";
    case BodyPart::hip: return "hip";
    case BodyPart::leg: return "leg";
    case BodyPart::foot: return "foot";
  }
  return "?";
}

constexpr std::size_t index_of(BodyPart p) { return static_cast<std::size_t>(p); }

}  // namespace sugar
