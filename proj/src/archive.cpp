#include "sugar/archive.hpp"

#include <atomic>
#include <fstream>
#include <functional>
#include <thread>
#include <sstream>

#include "sugar/binary_io.hpp"
#include "sugar/errors.hpp"

namespace sugar {

namespace {
constexpr std::uint32_t kArchiveVersion = 1;
}

const Eigen::MatrixXf* ParameterArchive::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

void round_to_storage_precision(const ad::ParameterRefs& params) {
  for (auto* p : params) p->value = p->value.cast<float>().cast<double>();
}

ParameterArchive make_archive(nlohmann::json header, const ad::ParameterRefs& params) {
  ParameterArchive archive;
  archive.header = std::move(header);
  for (const auto* p : params) archive.tensors.emplace_back(p->name, p->value.cast<float>());
  return archive;
}

void write_archive(const std::filesystem::path& path, const ParameterArchive& archive) {
  std::ostringstream out(std::ios::binary);
  io::Writer w(out);
  w.magic("SUGP");
  w.u32(kArchiveVersion);
  w.string(archive.header.dump());
  w.u32(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, m] : archive.tensors) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    w.bytes(rm.data(), static_cast<std::size_t>(rm.size()) * sizeof(float));
  }
  write_file_atomic(path, out.str());
}

ParameterArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open archive " + path.string(), 0);
  io::Reader r(in);
  r.expect_magic("SUGP");
  const auto version_at = r.offset();
  if (r.u32("version") != kArchiveVersion) throw FormatError("unsupported archive version", version_at);
  ParameterArchive archive;
  const auto header_at = r.offset();
  try {
    archive.header = nlohmann::json::parse(r.string("header"));
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("archive header is not valid JSON", header_at);
  }
  const auto count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string("tensor name");
    const auto rows = r.u32("rows");
    const auto cols = r.u32("cols");
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28)) throw FormatError("implausible tensor size", r.offset());
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    r.floats(rm.data(), static_cast<std::size_t>(rm.size()), "tensor payload");
    archive.tensors.emplace_back(std::move(name), Eigen::MatrixXf(rm));
  }
  return archive;
}

void load_parameters(const ParameterArchive& archive, const ad::ParameterRefs& params) {
  for (auto* p : params) {
    const auto* m = archive.find(p->name);
    if (m == nullptr) throw FormatError("archive lacks parameter " + p->name, 0);
    if (m->rows() != p->value.rows() || m->cols() != p->value.cols()) {
      throw DimensionError("archive tensor " + p->name + " has the wrong shape");
    }
    p->value = m->cast<double>();
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  static std::atomic<unsigned> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()) % 100000) + "." +
         std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace sugar
