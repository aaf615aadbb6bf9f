#include "morpheus/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "morpheus/errors.hpp"

namespace morpheus::trainer {

namespace {
constexpr std::string_view kMagic{"MORPHCKP", 8};
constexpr std::size_t kHeaderSize = 8 + 4 + 8 + 8;
}  // namespace

const nn::Matrix* CheckpointFile::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

std::string encode_checkpoint(const CheckpointFile& file) {
  detail::ByteWriter payload;
  payload.str(file.metadata);
  payload.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    payload.str(t.name);
    payload.u32(static_cast<std::uint32_t>(t.value.rows));
    payload.u32(static_cast<std::uint32_t>(t.value.cols));
    for (double x : t.value.data) payload.f32(static_cast<float>(x));
  }
  detail::ByteWriter out;
  out.bytes(kMagic);
  out.u32(kCheckpointVersion);
  out.u64(payload.data().size());
  out.u64(detail::fnv1a(payload.data()));
  out.bytes(payload.data());
  return out.take();
}

CheckpointFile decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kHeaderSize || std::string_view(bytes).substr(0, 8) != kMagic) {
    throw DataError("checkpoint: not a checkpoint file (bad magic)");
  }
  detail::ByteReader header(std::string_view(bytes).substr(8, kHeaderSize - 8));
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: version mismatch (file " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t size = header.u64();
  const std::uint64_t checksum = header.u64();
  const std::string_view payload = std::string_view(bytes).substr(kHeaderSize);
  if (payload.size() != size || detail::fnv1a(payload) != checksum) {
    throw DataError("checkpoint: checksum mismatch (file truncated or corrupt)");
  }

  detail::ByteReader r(payload);
  CheckpointFile file;
  file.metadata = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = r.str();
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    t.value = nn::Matrix(rows, cols);
    for (double& x : t.value.data) x = r.f32();
    file.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes after tensor table");
  return file;
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  const std::string bytes = encode_checkpoint(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace morpheus::trainer
