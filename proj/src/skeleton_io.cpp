#include "sugar/skeleton_io.hpp"

#include <fstream>
#include <sstream>

#include "sugar/archive.hpp"
#include "sugar/binary_io.hpp"
#include "sugar/errors.hpp"

namespace sugar {

namespace {
constexpr std::uint32_t kSkeletonVersion = 1;
}

void write_skeleton_file(const std::filesystem::path& path, const std::vector<SkeletonSequence>& seqs) {
  std::ostringstream buf(std::ios::binary);
  io::Writer w(buf);
  w.magic("SUGR");
  w.u32(kSkeletonVersion);
  w.u32(static_cast<std::uint32_t>(seqs.size()));
  for (const auto& s : seqs) {
    s.validate();
    w.u32(static_cast<std::uint32_t>(s.num_frames()));
    w.u32(static_cast<std::uint32_t>(s.joints));
    w.u32(static_cast<std::uint32_t>(s.channels));
    w.i32(s.label.value_or(-1));
    w.i32(s.subject.value_or(-1));
    w.bytes(s.frames.data(), static_cast<std::size_t>(s.frames.size()) * sizeof(float));
  }
  write_file_atomic(path, buf.str());
}

std::vector<SkeletonSequence> read_skeleton_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open skeleton file " + path.string(), 0);
  io::Reader r(in);
  r.expect_magic("SUGR");
  const auto version_at = r.offset();
  if (r.u32("version") != kSkeletonVersion) throw FormatError("unsupported skeleton file version", version_at);
  const auto count = r.u32("sequence count");
  std::vector<SkeletonSequence> seqs;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto header_at = r.offset();
    const auto t = r.u32("frame count");
    const auto v = r.u32("joint count");
    const auto c = r.u32("channel count");
    if (t == 0 || v == 0 || c == 0 || static_cast<std::uint64_t>(t) * v * c > (1ull << 30)) {
      throw FormatError("invalid sequence dimensions", header_at);
    }
    SkeletonSequence s;
    s.joints = static_cast<int>(v);
    s.channels = static_cast<int>(c);
    const auto label = r.i32("label");
    const auto subject = r.i32("subject");
    if (label >= 0) s.label = label;
    if (subject >= 0) s.subject = subject;
    s.frames.resize(t, static_cast<Eigen::Index>(v) * c);
    r.floats(s.frames.data(), static_cast<std::size_t>(s.frames.size()), "coordinates");
    seqs.push_back(std::move(s));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last sequence", r.offset());
  return seqs;
}

}  // namespace sugar
