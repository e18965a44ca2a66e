#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "qvpr/model.hpp"

namespace qvpr {

// "VPRQ" model container: magic, u32 version, u64 manifest length, UTF-8
// manifest (one line per layer with attributes and blob references), then
// 64-byte-aligned little-endian weight blobs. Serialization is canonical:
// load followed by save reproduces the bytes exactly.
std::vector<uint8_t> serialize_model(const ModelGraph& m);
ModelGraph deserialize_model(std::span<const uint8_t> bytes);

void save_model(const ModelGraph& m, const std::filesystem::path& path);
ModelGraph load_model(const std::filesystem::path& path);

// Backbone config as structured text: `key = value` lines, optional
// [section] headers, # comments.
BackboneConfig parse_backbone_config(const std::string& text);
BackboneConfig load_backbone_config(const std::filesystem::path& path);

}  // namespace qvpr
