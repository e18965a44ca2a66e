#include "qvpr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "qvpr/kernels.hpp"
#include "qvpr/parallel.hpp"
#include "qvpr/rng.hpp"
#include "qvpr/tensor_io.hpp"

namespace qvpr {

namespace {

// Two passes of a 3x3 box blur with wrap-around borders.
void smooth(std::span<float> plane, int64_t h, int64_t w) {
  std::vector<float> tmp(plane.begin(), plane.end());
  for (int pass = 0; pass < 2; ++pass) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int64_t yy = (y + dy + h) % h;
            const int64_t xx = (x + dx + w) % w;
            acc += tmp[yy * w + xx];
          }
        }
        plane[y * w + x] = static_cast<float>(acc / 9.0);
      }
    }
    std::copy(plane.begin(), plane.end(), tmp.begin());
  }
}

Tensor shift_2d(const Tensor& t, int dy, int dx) {
  const int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out(t.shape(), DType::F32);
  auto src = t.f32();
  auto dst = out.f32();
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sy = ((y - dy) % h + h) % h;
        const int64_t sx = ((x - dx) % w + w) % w;
        dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
      }
    }
  }
  return out;
}

}  // namespace

PlaceDataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.places < 2) throw std::invalid_argument("synthetic: need at least 2 places");
  if (cfg.input_shape.size() != 3) {
    throw std::invalid_argument("synthetic: input shape must be [C,H,W]");
  }
  const int64_t c = cfg.input_shape[0], h = cfg.input_shape[1], w = cfg.input_shape[2];

  PlaceDataset ds;
  ds.config = cfg;
  Rng rng(cfg.seed);
  for (int place = 0; place < cfg.places; ++place) {
    Tensor ref(cfg.input_shape, DType::F32);
    auto data = ref.f32();
    for (float& v : data) v = static_cast<float>(rng.normal());
    for (int64_t ch = 0; ch < c; ++ch) {
      smooth(data.subspan(ch * h * w, h * w), h, w);
    }
    ds.references.push_back(std::move(ref));
  }
  for (int place = 0; place < cfg.places; ++place) {
    for (int q = 0; q < cfg.queries_per_place; ++q) {
      Tensor query = ds.references[static_cast<size_t>(place)];
      if (cfg.translation != 0) {
        const int dy = static_cast<int>(rng.uniform_int(2 * cfg.translation + 1)) -
                       cfg.translation;
        const int dx = static_cast<int>(rng.uniform_int(2 * cfg.translation + 1)) -
                       cfg.translation;
        query = shift_2d(query, dy, dx);
      }
      const float shift = cfg.brightness == 0.0f
                              ? 0.0f
                              : rng.uniform_f(-cfg.brightness, cfg.brightness);
      auto data = query.f32();
      for (float& v : data) {
        v += shift + cfg.noise_sigma * static_cast<float>(rng.normal());
      }
      ds.queries.push_back(std::move(query));
      ds.query_place.push_back(place);
    }
  }
  return ds;
}

void save_dataset(const PlaceDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "refs");
  fs::create_directories(dir / "queries");
  std::vector<std::string> ref_paths;
  for (size_t i = 0; i < ds.references.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "refs/r_%05zu.qtns", i);
    save_tensor(ds.references[i], dir / name);
    ref_paths.emplace_back(name);
  }
  std::ofstream index(dir / "index.txt");
  if (!index) throw std::runtime_error("cannot write dataset index in " + dir.string());
  for (size_t i = 0; i < ds.queries.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "queries/q_%05zu.qtns", i);
    save_tensor(ds.queries[i], dir / name);
    index << name << ' ' << ref_paths.at(static_cast<size_t>(ds.query_place[i])) << ' '
          << ds.query_place[i] << '\n';
  }
}

PlaceDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.txt");
  if (!index) throw std::runtime_error("cannot open dataset index in " + dir.string());
  PlaceDataset ds;
  std::map<std::string, int> ref_slot;
  std::string qpath, rpath;
  int place;
  while (index >> qpath >> rpath >> place) {
    ds.queries.push_back(load_tensor(dir / qpath));
    ds.query_place.push_back(place);
    if (!ref_slot.count(rpath)) {
      ref_slot[rpath] = place;
      if (static_cast<int>(ds.references.size()) <= place) {
        ds.references.resize(static_cast<size_t>(place) + 1);
      }
      ds.references[static_cast<size_t>(place)] = load_tensor(dir / rpath);
    }
  }
  if (ds.queries.empty()) throw std::runtime_error("dataset index is empty: " + dir.string());
  for (size_t i = 0; i < ds.references.size(); ++i) {
    if (ds.references[i].empty()) {
      throw std::runtime_error("dataset is missing the reference for place " +
                               std::to_string(i));
    }
  }
  return ds;
}

DescriptorDB encode_db(const ModelGraph& m, std::span<const Tensor> inputs,
                       std::span<const int> place_ids, int threads) {
  if (inputs.empty()) throw std::invalid_argument("encode: no inputs");
  if (place_ids.size() != inputs.size()) {
    throw std::invalid_argument("encode: place id count (" + std::to_string(place_ids.size()) +
                                ") does not match input count (" + std::to_string(inputs.size()) +
                                ")");
  }
  const int64_t n = static_cast<int64_t>(inputs.size());
  DescriptorDB db;
  db.descriptors = Tensor({n, m.descriptor_dim}, DType::F32);
  db.place_ids.assign(place_ids.begin(), place_ids.end());
  auto rows = db.descriptors.f32();
  const int64_t d = m.descriptor_dim;

  parallel_for(n, resolve_threads(threads), [&](int64_t begin, int64_t end) {
    for (int64_t i = begin; i < end; ++i) {
      const Tensor& sample = inputs[static_cast<size_t>(i)];
      Tensor batch({1, sample.dim(0), sample.dim(1), sample.dim(2)}, DType::F32);
      std::copy(sample.raw().begin(), sample.raw().end(), batch.raw().begin());
      const Tensor out = forward(m, batch);
      auto row = out.f32();
      std::copy(row.begin(), row.end(), rows.begin() + i * d);
    }
  });
  return db;
}

std::vector<int> search_topk_indices(const DescriptorDB& db, std::span<const float> query,
                                     int k) {
  const int64_t n = db.size(), d = db.dim();
  if (static_cast<int64_t>(query.size()) != d) {
    throw std::invalid_argument("search: query dim (" + std::to_string(query.size()) +
                                ") does not match database dim (" + std::to_string(d) + ")");
  }
  if (k < 1 || k > n) {
    throw std::invalid_argument("search: k (" + std::to_string(k) +
                                ") outside [1, N=" + std::to_string(n) + "]");
  }
  auto rows = db.descriptors.f32();
  std::vector<double> scores(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      dot += static_cast<double>(rows[i * d + j]) * static_cast<double>(query[j]);
    }
    scores[static_cast<size_t>(i)] = dot;
  }
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(static_cast<size_t>(k));
  return order;
}

std::vector<int> search_topk(const DescriptorDB& db, std::span<const float> query, int k) {
  std::vector<int> ids;
  for (int idx : search_topk_indices(db, query, k)) {
    ids.push_back(db.place_ids.at(static_cast<size_t>(idx)));
  }
  return ids;
}

double recall_at_k(const DescriptorDB& queries, const DescriptorDB& refs,
                   std::span<const int> ground_truth, int k) {
  const int64_t n = queries.size();
  if (n == 0) throw std::invalid_argument("recall: empty query set");
  if (static_cast<int64_t>(ground_truth.size()) != n) {
    throw std::invalid_argument("recall: ground truth length mismatch");
  }
  auto rows = queries.descriptors.f32();
  const int64_t d = queries.dim();
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    const auto top = search_topk(refs, rows.subspan(i * d, d), k);
    if (std::find(top.begin(), top.end(), ground_truth[static_cast<size_t>(i)]) != top.end()) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return dot;
}

}  // namespace

float triplet_loss(const TripletSample& t, TripletConvention convention) {
  if (t.margin < 0.0f) throw std::invalid_argument("triplet: margin must be >= 0");
  if (t.anchor.size() != t.positive.size() || t.anchor.size() != t.negative.size()) {
    throw std::invalid_argument("triplet: descriptor dims differ");
  }
  const double sim_p = cosine(t.anchor, t.positive);
  const double sim_n = cosine(t.anchor, t.negative);
  double value;
  if (convention == TripletConvention::CosineDistance) {
    value = (1.0 - sim_p) - (1.0 - sim_n) + t.margin;
  } else {
    value = sim_p - sim_n + t.margin;
  }
  return static_cast<float>(std::max(0.0, value));
}

namespace {

constexpr char kDbMagic[4] = {'Q', 'V', 'D', 'B'};
constexpr uint32_t kDbVersion = 1;

}  // namespace

void save_db(const DescriptorDB& db, const std::filesystem::path& path) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kDbMagic, kDbMagic + 4);
  const uint32_t version = kDbVersion;
  const uint64_t n = static_cast<uint64_t>(db.size());
  const uint64_t d = static_cast<uint64_t>(db.dim());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(version >> (8 * i)));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(n >> (8 * i)));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(d >> (8 * i)));
  out.insert(out.end(), db.descriptors.raw().begin(), db.descriptors.raw().end());
  for (int id : db.place_ids) {
    const auto u = static_cast<uint32_t>(id);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(u >> (8 * i)));
  }
  write_file(path, out);
}

DescriptorDB load_db(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kDbMagic, 4) != 0) {
    throw std::runtime_error("descriptor db: bad magic (expected QVDB)");
  }
  uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<uint32_t>(bytes[4 + i]) << (8 * i);
  if (version != kDbVersion) {
    throw std::runtime_error("descriptor db: unsupported version " + std::to_string(version));
  }
  uint64_t n = 0, d = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<uint64_t>(bytes[8 + i]) << (8 * i);
  for (int i = 0; i < 8; ++i) d |= static_cast<uint64_t>(bytes[16 + i]) << (8 * i);
  const size_t expect = 24 + n * d * 4 + n * 4;
  if (bytes.size() != expect) {
    throw std::runtime_error("descriptor db: truncated payload (" +
                             std::to_string(bytes.size()) + " bytes, expected " +
                             std::to_string(expect) + ")");
  }
  DescriptorDB db;
  db.descriptors = Tensor({static_cast<int64_t>(n), static_cast<int64_t>(d)}, DType::F32);
  std::memcpy(db.descriptors.raw().data(), bytes.data() + 24, n * d * 4);
  db.place_ids.resize(n);
  const size_t ids_at = 24 + n * d * 4;
  for (uint64_t i = 0; i < n; ++i) {
    uint32_t u = 0;
    for (int j = 0; j < 4; ++j) {
      u |= static_cast<uint32_t>(bytes[ids_at + i * 4 + j]) << (8 * j);
    }
    db.place_ids[i] = static_cast<int>(u);
  }
  return db;
}

}  // namespace qvpr
