#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "sugar/autograd.hpp"

namespace sugar {

/// Named-parameter flat archive.
///
/// Layout: "SUGP", u32 version (1), u32 header length + UTF-8 JSON header,
/// u32 tensor count, then per tensor: u32 name length + name, u32 rows,
/// u32 cols, rows*cols float32 values row-major. All integers little-endian.
/// Values are stored as float32, so save -> load -> save is byte-identical.
struct ParameterArchive {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::MatrixXf>> tensors;

  const Eigen::MatrixXf* find(const std::string& name) const;
};

ParameterArchive make_archive(nlohmann::json header, const ad::ParameterRefs& params);
void write_archive(const std::filesystem::path& path, const ParameterArchive& archive);
ParameterArchive read_archive(const std::filesystem::path& path);

/// Copies archived tensors into matching parameters by name. Every parameter
/// must be present with the same shape.
void load_parameters(const ParameterArchive& archive, const ad::ParameterRefs& params);

/// Rounds parameter values to float32 precision, so the in-memory model
/// equals what a save/load round trip would produce.
void round_to_storage_precision(const ad::ParameterRefs& params);

/// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace sugar
