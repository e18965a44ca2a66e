#pragma once

#include <array>
#include <span>
#include <vector>

#include "qvpr/model.hpp"

namespace qvpr {

struct LatencySample {
  int64_t map_size;   // N
  int64_t dim;        // D
  double encode_s;    // tau_e
  double retrieve_s;  // tau_r
  double total_s() const { return encode_s + retrieve_s; }
};

// tau_r ~= k1 * D + k2 * N, plus the encode latency the plan has to leave
// room for.
struct LatencyModel {
  double k1 = 0.0;  // seconds per descriptor dimension
  double k2 = 0.0;  // seconds per map image
  double encode_s = 0.0;
  int64_t fitted_n_min = 0, fitted_n_max = 0;
  int64_t fitted_d_min = 0, fitted_d_max = 0;
};

// Wall-clock medians over `repetitions` runs (two warm-ups excluded) of one
// forward pass and one brute-force top-1 query against a random unit-norm
// [N, D] database.
std::vector<LatencySample> bench_latency(const ModelGraph& m, std::span<const int64_t> map_sizes,
                                         std::span<const int64_t> dims, int repetitions,
                                         uint64_t seed = 0);

// Least-squares fit of tau_r against (D, N); coefficients clamped at 0.
// Fails when the sample set does not constrain both coefficients.
LatencyModel fit_k1_k2(std::span<const LatencySample> samples);

inline constexpr std::array<int64_t, 4> kSupportedDims{512, 1024, 2048, 4096};

struct DimensionPlan {
  bool feasible = false;
  double raw_dim = 0.0;       // (T_lat - tau_e - k2 N) / k1
  int64_t recommended = 0;    // largest supported dim not exceeding raw_dim
  double predicted_total_s = 0.0;
  double slack_s = 0.0;       // latency budget left at the recommended dim
};

DimensionPlan plan_dim(double latency_target_s, int64_t map_size, const LatencyModel& model,
                       std::span<const int64_t> supported_dims = kSupportedDims);

struct MemoryBudget {
  int64_t budget_bytes = 0;
  int64_t map_size = 0;  // N
  int64_t dim = 0;       // D
};

struct MemoryCheck {
  bool pass = false;
  int64_t required_bytes = 0;  // N * D * 4 for f32 descriptor storage
};

// Passes iff the budget strictly exceeds N * D * 4.
MemoryCheck check_memory(const MemoryBudget& budget);

}  // namespace qvpr
