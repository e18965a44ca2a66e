#include "qvpr/tensor_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace qvpr {

namespace {

constexpr char kMagic[4] = {'Q', 'T', 'N', 'S'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(std::span<const uint8_t> in, size_t at) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(in[at + i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::span<const uint8_t> in, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(in[at + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<uint8_t> serialize_tensor(const Tensor& t) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  out.push_back(static_cast<uint8_t>(t.dtype()));
  out.push_back(static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
  out.insert(out.end(), t.raw().begin(), t.raw().end());
  return out;
}

Tensor deserialize_tensor(std::span<const uint8_t> bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("tensor file: bad magic (expected QTNS)");
  }
  const uint32_t version = get_u32(bytes, 4);
  if (version != kVersion) {
    throw std::runtime_error("tensor file: unsupported version " + std::to_string(version));
  }
  const DType dtype = dtype_from_code(bytes[8]);
  const size_t rank = bytes[9];
  size_t at = 10;
  if (bytes.size() < at + rank * 8) throw std::runtime_error("tensor file: truncated header");
  std::vector<int64_t> shape(rank);
  for (size_t i = 0; i < rank; ++i, at += 8) {
    shape[i] = static_cast<int64_t>(get_u64(bytes, at));
  }
  Tensor t(std::move(shape), dtype);
  if (bytes.size() - at != t.byte_size()) {
    throw std::runtime_error("tensor file: truncated payload (" +
                             std::to_string(bytes.size() - at) + " bytes for " +
                             std::to_string(t.byte_size()) + ")");
  }
  std::memcpy(t.raw().data(), bytes.data() + at, t.byte_size());
  return t;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file(path, serialize_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path) {
  return deserialize_tensor(read_file(path));
}

}  // namespace qvpr
