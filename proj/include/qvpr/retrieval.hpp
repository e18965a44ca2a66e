#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "qvpr/model.hpp"
#include "qvpr/tensor.hpp"

namespace qvpr {

// Synthetic place-recognition data: references are seeded smooth noise
// tensors, queries are perturbed copies. The perturbation knobs map to the
// usual VPR challenge axes: noise_sigma to appearance change, brightness to
// illumination, translation to viewpoint shift.
struct SyntheticConfig {
  int places = 64;
  int queries_per_place = 4;
  std::vector<int64_t> input_shape{3, 32, 32};
  float noise_sigma = 0.1f;
  float brightness = 0.1f;
  int translation = 1;  // circular shift in pixels
  uint64_t seed = 0;
};

struct PlaceDataset {
  std::vector<Tensor> references;  // one per place, index = place id
  std::vector<Tensor> queries;
  std::vector<int> query_place;    // ground-truth place id per query
  SyntheticConfig config;
};

PlaceDataset generate_synthetic(const SyntheticConfig& cfg);

// Datasets persist as a directory of QTNS tensors plus an index file with
// one `query_path reference_path place_id` line per query.
void save_dataset(const PlaceDataset& ds, const std::filesystem::path& dir);
PlaceDataset load_dataset(const std::filesystem::path& dir);

struct DescriptorDB {
  Tensor descriptors;          // [N, D] f32, rows unit-norm or zero
  std::vector<int> place_ids;  // N entries

  int64_t size() const { return descriptors.rank() == 2 ? descriptors.dim(0) : 0; }
  int64_t dim() const { return descriptors.rank() == 2 ? descriptors.dim(1) : 0; }
};

DescriptorDB encode_db(const ModelGraph& m, std::span<const Tensor> inputs,
                       std::span<const int> place_ids, int threads = 1);

// Exact top-k by inner product (cosine on unit vectors), descending, ties
// broken by lower row index.
std::vector<int> search_topk_indices(const DescriptorDB& db, std::span<const float> query, int k);
std::vector<int> search_topk(const DescriptorDB& db, std::span<const float> query, int k);

double recall_at_k(const DescriptorDB& queries, const DescriptorDB& refs,
                   std::span<const int> ground_truth, int k);

struct TripletSample {
  std::vector<float> anchor;
  std::vector<float> positive;
  std::vector<float> negative;
  float margin = 0.1f;
};

// L = max(0, f(a,p) - f(a,n) + margin). The default treats f as cosine
// distance 1 - <x,y>, which rewards close positives; the literal variant
// uses raw cosine similarity as printed in some formulations.
enum class TripletConvention : uint8_t { CosineDistance = 0, LiteralSimilarity = 1 };
float triplet_loss(const TripletSample& t,
                   TripletConvention convention = TripletConvention::CosineDistance);

// Descriptor DB container: magic "QVDB", u32 version, u64 N, u64 D, N*D f32
// little-endian descriptors, then N u32 place ids.
void save_db(const DescriptorDB& db, const std::filesystem::path& path);
DescriptorDB load_db(const std::filesystem::path& path);

}  // namespace qvpr
