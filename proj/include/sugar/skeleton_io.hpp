#pragma once

#include <filesystem>
#include <vector>

#include "sugar/skeleton.hpp"

namespace sugar {

// Skeleton file: "SUGR", u32 version (1), u32 count, then per sequence
// u32 T, u32 V, u32 C, i32 label (-1 none), i32 subject (-1 none) and
// T*V*C float32 values in (frame, joint, channel) order. Little-endian.

void write_skeleton_file(const std::filesystem::path& path, const std::vector<SkeletonSequence>& seqs);
std::vector<SkeletonSequence> read_skeleton_file(const std::filesystem::path& path);

}  // namespace sugar
