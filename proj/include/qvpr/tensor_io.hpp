#pragma once

#include <filesystem>
#include <vector>

#include "qvpr/tensor.hpp"

namespace qvpr {

// "QTNS" raw tensor container: magic, u32 version, u8 dtype code, u8 rank,
// u64 extents, little-endian payload.
std::vector<uint8_t> serialize_tensor(const Tensor& t);
Tensor deserialize_tensor(std::span<const uint8_t> bytes);

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);

}  // namespace qvpr
