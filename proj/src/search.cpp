#include "qvpr/search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace qvpr {

namespace {

constexpr int kPrecisions[] = {4, 8, 16};

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

void validate_search_config(const SearchConfig& cfg) {
  require(cfg.population >= 2, "search: population must be >= 2");
  require(cfg.tournament >= 2 && cfg.tournament <= cfg.population,
          "search: tournament size must satisfy 2 <= C <= N");
  require(cfg.mutation_rate > 0.0 && cfg.mutation_rate <= 1.0,
          "search: mutation rate must be in (0, 1]");
  require(cfg.budget >= 4.0 && cfg.budget <= 16.0,
          "search: budget must lie in [4, 16]; no feasible candidate exists below 4");
  require(cfg.generations >= 1, "search: generation limit must be >= 1");
}

FitnessEvaluator::FitnessEvaluator(const ModelGraph& fused, const CalibrationSample& calib,
                                   CalibMethod method, int sample_limit)
    : model_(fused), method_(method) {
  require(!calib.inputs.empty(), "fitness: calibration sample is empty");
  layer_count_ = static_cast<int>(quantizable_layers(fused).size());

  size_t take = calib.inputs.size();
  if (sample_limit > 0) take = std::min<size_t>(take, static_cast<size_t>(sample_limit));
  CalibrationSample used;
  used.inputs.assign(calib.inputs.begin(), calib.inputs.begin() + take);
  stats_ = collect_activation_stats(fused, used);

  batches_.reserve(take);
  references_.reserve(take);
  for (const Tensor& sample : used.inputs) {
    Tensor batch({1, sample.dim(0), sample.dim(1), sample.dim(2)}, DType::F32);
    std::copy(sample.raw().begin(), sample.raw().end(), batch.raw().begin());
    references_.push_back(forward(fused, batch));
    batches_.push_back(std::move(batch));
  }
}

double FitnessEvaluator::operator()(const PrecisionConfig& config) {
  const auto it = cache_.find(config);
  if (it != cache_.end()) return it->second;

  const ModelGraph q = quantize_model(model_, config, stats_, method_);
  double total = 0.0;
  for (size_t i = 0; i < batches_.size(); ++i) {
    const Tensor out = forward(q, batches_[i]);
    const auto a = out.f32();
    const auto b = references_[i].f32();
    for (size_t j = 0; j < a.size(); ++j) {
      const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
      total += diff * diff;
    }
  }
  const double value = -total / static_cast<double>(batches_.size());
  cache_[config] = value;
  ++evaluations_;
  return value;
}

double fitness(const ModelGraph& fused, const PrecisionConfig& config,
               const CalibrationSample& calib, CalibMethod method) {
  FitnessEvaluator eval(fused, calib, method);
  return eval(config);
}

SensitivityProfile sensitivity_profile(FitnessEvaluator& eval) {
  const int t = eval.layer_count();
  SensitivityProfile profile(static_cast<size_t>(t), 0.0);
  for (int i = 0; i < t; ++i) {
    PrecisionConfig probe(static_cast<size_t>(t), 16);
    probe[static_cast<size_t>(i)] = 4;
    profile[static_cast<size_t>(i)] = -eval(probe);
  }
  return profile;
}

SensitivityProfile sensitivity_profile(const ModelGraph& fused, const CalibrationSample& calib,
                                       CalibMethod method) {
  FitnessEvaluator eval(fused, calib, method);
  return sensitivity_profile(eval);
}

PrecisionConfig repair_to_budget(PrecisionConfig config, const SensitivityProfile& profile,
                                 double budget) {
  require(profile.size() == config.size(), "repair: profile length mismatch");
  while (mean_bits(config) > budget) {
    int victim = -1;
    double lowest = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < config.size(); ++i) {
      if (config[i] > 4 && profile[i] < lowest) {
        lowest = profile[i];
        victim = static_cast<int>(i);
      }
    }
    if (victim < 0) break;  // all at 4 bits already; mean is the floor
    config[static_cast<size_t>(victim)] = config[static_cast<size_t>(victim)] == 16 ? 8 : 4;
  }
  return config;
}

PrecisionConfig mutate(const PrecisionConfig& config, double mutation_rate,
                       const SensitivityProfile& profile, double budget, Rng& rng) {
  PrecisionConfig out = config;
  if (rng.uniform() < mutation_rate) {
    const auto layer = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(out.size())));
    // categorical over {4, 8, 16} tilted toward high bits for sensitive layers
    double weights[3];
    double total = 0.0;
    for (int j = 0; j < 3; ++j) {
      weights[j] = std::exp(profile[layer] * (kPrecisions[j] - 4) / 12.0);
      total += weights[j];
    }
    const double draw = rng.uniform() * total;
    double cum = 0.0;
    int pick = 2;
    for (int j = 0; j < 3; ++j) {
      cum += weights[j];
      if (draw < cum) {
        pick = j;
        break;
      }
    }
    out[layer] = kPrecisions[pick];
  }
  return repair_to_budget(std::move(out), profile, budget);
}

PrecisionConfig crossover(const PrecisionConfig& a, const PrecisionConfig& b,
                          const SensitivityProfile& profile, double budget, Rng& rng) {
  require(a.size() == b.size(), "crossover: parent length mismatch (" +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                                    ")");
  const size_t t = a.size();
  PrecisionConfig child = a;
  if (t >= 2) {
    const auto cut = static_cast<size_t>(1 + rng.uniform_int(static_cast<int64_t>(t - 1)));
    for (size_t i = cut; i < t; ++i) child[i] = b[i];
  }
  return repair_to_budget(std::move(child), profile, budget);
}

namespace {

// Homogeneous anchor: every layer at the largest precision not above B.
PrecisionConfig homogeneous_anchor(int t, double budget) {
  int level = 4;
  for (int p : kPrecisions) {
    if (p <= budget) level = p;
  }
  return PrecisionConfig(static_cast<size_t>(t), level);
}

PrecisionConfig random_feasible(int t, double budget, Rng& rng) {
  for (;;) {
    PrecisionConfig config(static_cast<size_t>(t));
    for (int& v : config) v = kPrecisions[rng.uniform_int(3)];
    if (mean_bits(config) <= budget) return config;
  }
}

}  // namespace

SearchResult run_search(const ModelGraph& fused, const CalibrationSample& calib,
                        const SearchConfig& cfg) {
  validate_search_config(cfg);
  FitnessEvaluator eval(fused, calib, cfg.method, cfg.fitness_samples);
  const int t = eval.layer_count();
  require(t >= 1, "search: model has no quantizable layers");

  SearchResult result;
  result.profile = sensitivity_profile(eval);
  Rng rng(cfg.seed);

  struct Member {
    PrecisionConfig config;
    double fitness;
  };
  std::vector<Member> population;
  population.reserve(static_cast<size_t>(cfg.population));

  const auto score = [&](const PrecisionConfig& config) {
    result.evaluated.push_back(config);
    return eval(config);
  };

  {
    PrecisionConfig anchor = homogeneous_anchor(t, cfg.budget);
    population.push_back({anchor, score(anchor)});
  }
  while (static_cast<int>(population.size()) < cfg.population) {
    PrecisionConfig config = random_feasible(t, cfg.budget, rng);
    population.push_back({config, score(config)});
  }

  result.best = population.front().config;
  result.best_fitness = population.front().fitness;
  for (const Member& m : population) {
    if (m.fitness > result.best_fitness) {
      result.best_fitness = m.fitness;
      result.best = m.config;
    }
  }

  const int stagnation_limit = std::max(1, (cfg.generations + 4) / 5);  // 20% of G
  int stagnant = 0;
  std::vector<int> indices(static_cast<size_t>(cfg.population));
  std::iota(indices.begin(), indices.end(), 0);

  for (int step = 0; step < cfg.generations && stagnant < stagnation_limit; ++step) {
    // sample C distinct members into the tournament
    for (int i = 0; i < cfg.tournament; ++i) {
      const auto j = static_cast<size_t>(i + rng.uniform_int(cfg.population - i));
      std::swap(indices[static_cast<size_t>(i)], indices[j]);
    }
    int parent_a = indices[0], parent_b = indices[1], worst = indices[0];
    for (int i = 0; i < cfg.tournament; ++i) {
      const int idx = indices[static_cast<size_t>(i)];
      if (population[idx].fitness > population[parent_a].fitness) {
        parent_b = parent_a;
        parent_a = idx;
      } else if (idx != parent_a && population[idx].fitness > population[parent_b].fitness) {
        parent_b = idx;
      }
      if (population[idx].fitness < population[worst].fitness) worst = idx;
    }

    PrecisionConfig child = crossover(population[parent_a].config, population[parent_b].config,
                                      result.profile, cfg.budget, rng);
    child = mutate(child, cfg.mutation_rate, result.profile, cfg.budget, rng);
    const double child_fitness = score(child);

    // steady-state replacement: the tournament's worst leaves the population
    population[worst] = {std::move(child), child_fitness};

    if (child_fitness > result.best_fitness) {
      result.best_fitness = child_fitness;
      result.best = population[worst].config;
      stagnant = 0;
    } else {
      ++stagnant;
    }
    result.trace.push_back(result.best_fitness);
  }
  return result;
}

OracleResult exhaustive_oracle(const ModelGraph& fused, const CalibrationSample& calib,
                               double budget, CalibMethod method) {
  FitnessEvaluator eval(fused, calib, method);
  const int t = eval.layer_count();
  require(t >= 1 && t <= 8, "oracle: layer count " + std::to_string(t) +
                                " outside the tractable range [1, 8]");

  OracleResult result;
  bool found = false;
  double best_mean = 0.0;
  PrecisionConfig config(static_cast<size_t>(t), 4);
  int64_t total = 1;
  for (int i = 0; i < t; ++i) total *= 3;
  for (int64_t code = 0; code < total; ++code) {
    int64_t rest = code;
    for (int i = 0; i < t; ++i) {
      config[static_cast<size_t>(i)] = kPrecisions[rest % 3];
      rest /= 3;
    }
    const double mean = mean_bits(config);
    if (mean > budget) continue;
    ++result.feasible_count;
    const double value = eval(config);
    const bool better =
        !found || value > result.best_fitness ||
        (value == result.best_fitness &&
         (mean < best_mean || (mean == best_mean && config < result.best)));
    if (better) {
      found = true;
      result.best_fitness = value;
      result.best = config;
      best_mean = mean;
    }
  }
  require(found, "oracle: no feasible configuration under budget " + std::to_string(budget));
  return result;
}

}  // namespace qvpr
