#include "qvpr/model_io.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>
#include <stdexcept>

#include "qvpr/tensor_io.hpp"

namespace qvpr {

namespace {

constexpr char kMagic[4] = {'V', 'P', 'R', 'Q'};
constexpr uint32_t kVersion = 1;
constexpr size_t kAlign = 64;

size_t align_up(size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

std::string fmt_f32(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

std::string fmt_extents(std::span<const int64_t> shape) {
  std::string out;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

std::vector<int64_t> parse_extents(const std::string& text) {
  std::vector<int64_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) out.push_back(std::stoll(part));
  return out;
}

// Ordered list of weight roles a layer serializes.
std::vector<std::string> layer_roles(const ModelGraph& m, int idx) {
  const LayerSpec& layer = m.layers[idx];
  switch (layer.kind) {
    case LayerKind::Conv:
    case LayerKind::DepthwiseConv:
    case LayerKind::Linear:
      return {"weight", "bias"};
    case LayerKind::BatchNorm:
      return {"mean", "var", "scale", "shift"};
    case LayerKind::PoolingHead: {
      std::vector<std::string> roles;
      if (m.has_weight(idx, "p")) roles.push_back("p");
      if (m.has_weight(idx, "codes")) roles.push_back("codes");
      return roles;
    }
    default:
      return {};
  }
}

struct TokenMap {
  std::map<std::string, std::string> kv;

  const std::string& get(const std::string& key) const {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("model manifest: missing field '" + key + "'");
    return it->second;
  }
  bool has(const std::string& key) const { return kv.count(key) != 0; }
  int geti(const std::string& key) const { return std::stoi(get(key)); }
  float getf(const std::string& key) const { return std::strtof(get(key).c_str(), nullptr); }
};

TokenMap tokenize(const std::string& line, size_t skip_words) {
  TokenMap map;
  std::stringstream ss(line);
  std::string word;
  for (size_t i = 0; i < skip_words; ++i) ss >> word;
  while (ss >> word) {
    const size_t eq = word.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("model manifest: malformed token '" + word + "'");
    }
    map.kv[word.substr(0, eq)] = word.substr(eq + 1);
  }
  return map;
}

struct BlobRef {
  size_t offset;
  DType dtype;
  std::vector<int64_t> shape;
};

std::string fmt_blob(const BlobRef& ref) {
  return std::to_string(ref.offset) + ":" + std::to_string(static_cast<int>(ref.dtype)) + ":" +
         fmt_extents(ref.shape);
}

BlobRef parse_blob(const std::string& text) {
  const size_t c1 = text.find(':');
  const size_t c2 = text.find(':', c1 + 1);
  if (c1 == std::string::npos || c2 == std::string::npos) {
    throw std::runtime_error("model manifest: malformed blob reference '" + text + "'");
  }
  BlobRef ref;
  ref.offset = std::stoull(text.substr(0, c1));
  ref.dtype = dtype_from_code(static_cast<uint8_t>(std::stoi(text.substr(c1 + 1, c2 - c1 - 1))));
  ref.shape = parse_extents(text.substr(c2 + 1));
  return ref;
}

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

std::vector<uint8_t> serialize_model(const ModelGraph& m) {
  // lay out blobs first so the manifest can reference them
  std::vector<const Tensor*> blob_order;
  std::vector<Tensor> scale_tensors;  // keep alive, one per integer layer
  scale_tensors.reserve(m.layers.size());

  std::map<std::string, BlobRef> refs;  // "<idx>.<role>" -> ref
  size_t cursor = 0;
  const auto add_blob = [&](int idx, const std::string& role, const Tensor& t) {
    const size_t offset = align_up(cursor);
    cursor = offset + t.byte_size();
    refs[std::to_string(idx) + "." + role] = BlobRef{offset, t.dtype(), t.shape()};
    blob_order.push_back(&t);
  };

  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    for (const std::string& role : layer_roles(m, i)) {
      add_blob(i, role, m.weight(i, role));
    }
    const LayerQuant& quant = m.layers[i].quant;
    if (quant.bits == 8 || quant.bits == 4) {
      Tensor scales({static_cast<int64_t>(quant.weight_scales.size())}, DType::F32);
      std::copy(quant.weight_scales.begin(), quant.weight_scales.end(), scales.f32().begin());
      scale_tensors.push_back(std::move(scales));
      add_blob(i, "wscales", scale_tensors.back());
    }
  }

  std::string manifest;
  manifest += "model name=" + (m.name.empty() ? std::string("model") : m.name) +
              " input=" + fmt_extents(m.input_shape) +
              " dim=" + std::to_string(m.descriptor_dim) +
              " layers=" + std::to_string(m.layers.size()) + "\n";
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerSpec& layer = m.layers[i];
    std::string line = "layer idx=" + std::to_string(i) +
                       " kind=" + layer_kind_name(layer.kind);
    switch (layer.kind) {
      case LayerKind::Conv:
      case LayerKind::DepthwiseConv: {
        const ConvAttrs& a = layer.conv();
        line += " in=" + std::to_string(a.in_channels) + " out=" + std::to_string(a.out_channels) +
                " kh=" + std::to_string(a.kh) + " kw=" + std::to_string(a.kw) +
                " stride=" + std::to_string(a.stride) + " pad=" + std::to_string(a.pad) +
                " groups=" + std::to_string(a.groups);
        break;
      }
      case LayerKind::BatchNorm:
        line += " channels=" + std::to_string(layer.batchnorm().channels) +
                " eps=" + fmt_f32(layer.batchnorm().eps);
        break;
      case LayerKind::ResidualAdd:
        line += " src=" + std::to_string(layer.residual().source);
        break;
      case LayerKind::Linear:
        line += " in=" + std::to_string(layer.linear().in_dim) +
                " out=" + std::to_string(layer.linear().out_dim);
        break;
      case LayerKind::PoolingHead: {
        const PoolingHeadAttrs& a = layer.pooling();
        line += " pool=" + std::string(pool_kind_name(a.kind));
        if (a.kind == PoolKind::NetVLAD) line += " codes=" + std::to_string(a.codes);
        line += " inbits=" + std::to_string(a.input_bits);
        if (a.input_bits == 8) line += " inscale=" + fmt_f32(a.input_scale);
        break;
      }
      default:
        break;
    }
    const LayerQuant& quant = layer.quant;
    if (quant.bits != 32 &&
        (layer.kind == LayerKind::Conv || layer.kind == LayerKind::DepthwiseConv ||
         layer.kind == LayerKind::Linear)) {
      line += " bits=" + std::to_string(quant.bits);
      if (quant.bits == 8 || quant.bits == 4) {
        line += " ascale=" + fmt_f32(quant.act_scale);
        line += " wscales=" + fmt_blob(refs.at(std::to_string(i) + ".wscales"));
      }
    }
    for (const std::string& role : layer_roles(m, i)) {
      line += " " + role + "=" + fmt_blob(refs.at(std::to_string(i) + "." + role));
    }
    manifest += line + "\n";
  }

  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u64(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  const size_t base = align_up(out.size());
  out.resize(base, 0);

  size_t replay = 0;
  for (const Tensor* t : blob_order) {
    const size_t offset = align_up(replay);
    out.resize(base + offset, 0);
    out.insert(out.end(), t->raw().begin(), t->raw().end());
    replay = offset + t->byte_size();
  }
  return out;
}

ModelGraph deserialize_model(std::span<const uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("model file: bad magic (expected VPRQ)");
  }
  const uint32_t version = get_u32(bytes, 4);
  if (version != kVersion) {
    throw std::runtime_error("model file: unsupported version " + std::to_string(version));
  }
  const uint64_t manifest_len = get_u64(bytes, 8);
  if (bytes.size() < 16 + manifest_len) {
    throw std::runtime_error("model file: truncated manifest");
  }
  const std::string manifest(reinterpret_cast<const char*>(bytes.data()) + 16,
                             static_cast<size_t>(manifest_len));
  const size_t base = align_up(16 + static_cast<size_t>(manifest_len));

  const auto read_blob = [&](const BlobRef& ref) {
    Tensor t(ref.shape, ref.dtype);
    if (base + ref.offset + t.byte_size() > bytes.size()) {
      throw std::runtime_error("model file: truncated blob at offset " +
                               std::to_string(ref.offset));
    }
    std::memcpy(t.raw().data(), bytes.data() + base + ref.offset, t.byte_size());
    return t;
  };

  ModelGraph m;
  std::stringstream ss(manifest);
  std::string line;
  bool saw_header = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line.rfind("model ", 0) == 0) {
      const TokenMap t = tokenize(line, 1);
      m.name = t.get("name");
      m.input_shape = parse_extents(t.get("input"));
      m.descriptor_dim = t.geti("dim");
      saw_header = true;
      continue;
    }
    if (line.rfind("layer ", 0) != 0) {
      throw std::runtime_error("model manifest: unexpected line '" + line + "'");
    }
    if (!saw_header) throw std::runtime_error("model manifest: missing model header");
    const TokenMap t = tokenize(line, 1);
    LayerSpec layer;
    layer.kind = layer_kind_from_name(t.get("kind"));
    const int idx = static_cast<int>(m.layers.size());
    if (t.geti("idx") != idx) {
      throw std::runtime_error("model manifest: layer index mismatch at line '" + line + "'");
    }
    switch (layer.kind) {
      case LayerKind::Conv:
      case LayerKind::DepthwiseConv:
        layer.attrs = ConvAttrs{t.geti("in"),     t.geti("out"), t.geti("kh"),
                                t.geti("kw"),     t.geti("stride"), t.geti("pad"),
                                t.geti("groups")};
        break;
      case LayerKind::BatchNorm:
        layer.attrs = BatchNormAttrs{t.geti("channels"), t.getf("eps")};
        break;
      case LayerKind::ResidualAdd:
        layer.attrs = ResidualAddAttrs{t.geti("src")};
        break;
      case LayerKind::Linear:
        layer.attrs = LinearAttrs{t.geti("in"), t.geti("out")};
        break;
      case LayerKind::PoolingHead: {
        PoolingHeadAttrs a;
        a.kind = pool_kind_from_name(t.get("pool"));
        if (t.has("codes")) a.codes = t.geti("codes");
        a.input_bits = t.geti("inbits");
        if (t.has("inscale")) a.input_scale = t.getf("inscale");
        layer.attrs = a;
        break;
      }
      default:
        break;
    }
    if (t.has("bits")) {
      layer.quant.bits = t.geti("bits");
      if (layer.quant.bits == 8 || layer.quant.bits == 4) {
        layer.quant.act_scale = t.getf("ascale");
        const Tensor scales = read_blob(parse_blob(t.get("wscales")));
        layer.quant.weight_scales.assign(scales.f32().begin(), scales.f32().end());
      }
    }
    m.layers.push_back(std::move(layer));
    for (const std::string& role : layer_roles(m, idx)) {
      m.set_weight(idx, role, read_blob(parse_blob(t.get(role))));
    }
  }
  if (!saw_header) throw std::runtime_error("model manifest: missing model header");
  return m;
}

void save_model(const ModelGraph& m, const std::filesystem::path& path) {
  const auto bytes = serialize_model(m);
  write_file(path, bytes);
}

ModelGraph load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

BackboneConfig parse_backbone_config(const std::string& text) {
  BackboneConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';' || t[0] == '[') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected 'key = value', got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key == "family") {
      cfg.family = family_from_name(value);
    } else if (key == "width") {
      cfg.width = std::strtof(value.c_str(), nullptr);
    } else if (key == "depth") {
      cfg.depth = std::stoi(value);
    } else if (key == "input") {
      cfg.input_shape = parse_extents(value);
    } else if (key == "descriptor_dim" || key == "dim") {
      cfg.descriptor_dim = std::stoi(value);
    } else if (key == "pooling") {
      cfg.pooling = pool_kind_from_name(value);
    } else if (key == "gem_p") {
      cfg.gem_p = std::strtof(value.c_str(), nullptr);
    } else if (key == "netvlad_codes") {
      cfg.netvlad_codes = std::stoi(value);
    } else if (key == "projection") {
      if (value == "auto") {
        cfg.auto_projection = true;
      } else if (value == "none") {
        cfg.auto_projection = false;
      } else {
        throw std::runtime_error("config: projection must be auto or none, got '" + value + "'");
      }
    } else if (key == "seed") {
      cfg.seed = std::stoull(value);
    } else {
      throw std::runtime_error("config: unknown key '" + key + "'");
    }
  }
  return cfg;
}

BackboneConfig load_backbone_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_backbone_config(std::string(bytes.begin(), bytes.end()));
}

}  // namespace qvpr
