#pragma once

#include <map>
#include <vector>

#include "qvpr/quant.hpp"
#include "qvpr/rng.hpp"

namespace qvpr {

// Steady-state genetic search over per-layer precision configurations
// (entries in {4, 8, 16}) under an average bit-width budget B.

struct SearchConfig {
  int population = 16;        // N
  double mutation_rate = 0.5; // p_m
  int tournament = 4;         // C, sampled per step
  double budget = 16.0;       // B, average bits
  int generations = 300;      // G, offspring insertions
  uint64_t seed = 0;
  CalibMethod method = CalibMethod::MaxAbs;
  int fitness_samples = 0;    // L, 0 = whole calibration sample
};

void validate_search_config(const SearchConfig& cfg);

// Per-layer sensitivity to quantization noise: sigma_i = -fitness of the
// configuration that is all-16 except layer i at 4 bits.
using SensitivityProfile = std::vector<double>;

// f(I) = -(1/L) sum_i ||Q(I; x_i) - M(x_i)||^2 over normalized descriptors,
// where Q is the model quantized under I. Zero is the maximum.
// Evaluations are memoized per configuration; the reference descriptors and
// activation statistics are computed once at construction.
class FitnessEvaluator {
 public:
  FitnessEvaluator(const ModelGraph& fused, const CalibrationSample& calib, CalibMethod method,
                   int sample_limit = 0);

  double operator()(const PrecisionConfig& config);
  int layer_count() const { return layer_count_; }
  int evaluations() const { return evaluations_; }

 private:
  const ModelGraph& model_;
  CalibMethod method_;
  ActivationStats stats_;
  std::vector<Tensor> batches_;      // one [1,C,H,W] batch per sample
  std::vector<Tensor> references_;   // f32 descriptors per sample
  std::map<PrecisionConfig, double> cache_;
  int layer_count_ = 0;
  int evaluations_ = 0;
};

double fitness(const ModelGraph& fused, const PrecisionConfig& config,
               const CalibrationSample& calib, CalibMethod method = CalibMethod::MaxAbs);

SensitivityProfile sensitivity_profile(const ModelGraph& fused, const CalibrationSample& calib,
                                       CalibMethod method = CalibMethod::MaxAbs);
SensitivityProfile sensitivity_profile(FitnessEvaluator& eval);

// Lowers the least-sensitive layer above 4 bits one step at a time until
// mean(I) <= B.
PrecisionConfig repair_to_budget(PrecisionConfig config, const SensitivityProfile& profile,
                                 double budget);

// With probability p_m resamples one uniformly chosen layer from a
// categorical over {4, 8, 16} tilted by its sensitivity (weights
// proportional to exp(sigma_i * (bits - 4) / 12)), then repairs to budget.
PrecisionConfig mutate(const PrecisionConfig& config, double mutation_rate,
                       const SensitivityProfile& profile, double budget, Rng& rng);

// Single-point crossover at a uniform cut in [1, T-1], repaired to budget.
PrecisionConfig crossover(const PrecisionConfig& a, const PrecisionConfig& b,
                          const SensitivityProfile& profile, double budget, Rng& rng);

struct SearchResult {
  PrecisionConfig best;
  double best_fitness = 0.0;
  std::vector<double> trace;               // best-so-far after each insertion
  std::vector<PrecisionConfig> evaluated;  // every candidate that was scored
  SensitivityProfile profile;
};

SearchResult run_search(const ModelGraph& fused, const CalibrationSample& calib,
                        const SearchConfig& cfg);

struct OracleResult {
  PrecisionConfig best;
  double best_fitness = 0.0;
  int feasible_count = 0;
};

// Enumerates all 3^T configurations (T <= 8), filters mean(I) <= B and
// returns the fitness argmax; ties break toward lower mean bits, then
// lexicographic order.
OracleResult exhaustive_oracle(const ModelGraph& fused, const CalibrationSample& calib,
                               double budget, CalibMethod method = CalibMethod::MaxAbs);

}  // namespace qvpr
