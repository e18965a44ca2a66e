#include "qvpr/perf.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "qvpr/kernels.hpp"
#include "qvpr/retrieval.hpp"
#include "qvpr/rng.hpp"

namespace qvpr {

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
double time_median(int repetitions, Fn&& fn) {
  for (int i = 0; i < 2; ++i) fn();  // warm-up
  std::vector<double> times;
  times.reserve(static_cast<size_t>(repetitions));
  for (int i = 0; i < repetitions; ++i) {
    const auto begin = Clock::now();
    fn();
    const auto end = Clock::now();
    times.push_back(std::chrono::duration<double>(end - begin).count());
  }
  return median(std::move(times));
}

}  // namespace

std::vector<LatencySample> bench_latency(const ModelGraph& m, std::span<const int64_t> map_sizes,
                                         std::span<const int64_t> dims, int repetitions,
                                         uint64_t seed) {
  if (repetitions < 3) throw std::invalid_argument("bench: repetitions must be >= 3");
  if (map_sizes.empty() || dims.empty()) {
    throw std::invalid_argument("bench: need at least one map size and one dimension");
  }

  Rng rng(seed);
  Tensor input({1, m.input_shape.at(0), m.input_shape.at(1), m.input_shape.at(2)}, DType::F32);
  for (float& v : input.f32()) v = rng.uniform_f(-1.0f, 1.0f);

  std::vector<LatencySample> samples;
  volatile float sink = 0.0f;  // keep the timed work observable
  for (int64_t n : map_sizes) {
    for (int64_t d : dims) {
      DescriptorDB db;
      db.descriptors = Tensor({n, d}, DType::F32);
      for (float& v : db.descriptors.f32()) v = rng.uniform_f(-1.0f, 1.0f);
      l2_normalize_rows(db.descriptors);
      db.place_ids.resize(static_cast<size_t>(n));
      std::vector<float> query(static_cast<size_t>(d));
      for (float& v : query) v = rng.uniform_f(-1.0f, 1.0f);
      l2_normalize(query);

      const double tau_e = time_median(repetitions, [&] {
        const Tensor out = forward(m, input);
        sink = sink + out.f32()[0];
      });
      const double tau_r = time_median(repetitions, [&] {
        const auto top = search_topk_indices(db, query, 1);
        sink = sink + static_cast<float>(top[0]);
      });
      samples.push_back({n, d, tau_e, tau_r});
    }
  }
  return samples;
}

LatencyModel fit_k1_k2(std::span<const LatencySample> samples) {
  if (samples.size() < 2) {
    throw std::invalid_argument("fit: need at least two latency samples");
  }
  // normal equations for tau_r = k1 D + k2 N
  double sdd = 0.0, snn = 0.0, sdn = 0.0, sdt = 0.0, snt = 0.0, se = 0.0;
  LatencyModel model;
  model.fitted_n_min = samples[0].map_size;
  model.fitted_n_max = samples[0].map_size;
  model.fitted_d_min = samples[0].dim;
  model.fitted_d_max = samples[0].dim;
  for (const LatencySample& s : samples) {
    const auto d = static_cast<double>(s.dim);
    const auto n = static_cast<double>(s.map_size);
    sdd += d * d;
    snn += n * n;
    sdn += d * n;
    sdt += d * s.retrieve_s;
    snt += n * s.retrieve_s;
    se += s.encode_s;
    model.fitted_n_min = std::min(model.fitted_n_min, s.map_size);
    model.fitted_n_max = std::max(model.fitted_n_max, s.map_size);
    model.fitted_d_min = std::min(model.fitted_d_min, s.dim);
    model.fitted_d_max = std::max(model.fitted_d_max, s.dim);
  }
  const double det = sdd * snn - sdn * sdn;
  const double scale = std::max(sdd, snn);
  if (scale == 0.0 || std::fabs(det) < 1e-12 * scale * scale) {
    throw std::invalid_argument(
        "fit: rank-deficient sample set; vary D and N so both coefficients are determined");
  }
  model.k1 = std::max(0.0, (snn * sdt - sdn * snt) / det);
  model.k2 = std::max(0.0, (sdd * snt - sdn * sdt) / det);
  model.encode_s = se / static_cast<double>(samples.size());
  return model;
}

DimensionPlan plan_dim(double latency_target_s, int64_t map_size, const LatencyModel& model,
                       std::span<const int64_t> supported_dims) {
  if (supported_dims.empty()) throw std::invalid_argument("plan: no supported dimensions");
  DimensionPlan plan;
  const double headroom =
      latency_target_s - model.encode_s - model.k2 * static_cast<double>(map_size);
  if (headroom <= 0.0) return plan;  // budget below encode + map cost

  const int64_t largest = *std::max_element(supported_dims.begin(), supported_dims.end());
  if (model.k1 == 0.0) {
    plan.raw_dim = static_cast<double>(largest);
  } else {
    plan.raw_dim = headroom / model.k1;
  }

  int64_t chosen = 0;
  for (int64_t d : supported_dims) {
    if (static_cast<double>(d) <= plan.raw_dim && d > chosen) chosen = d;
  }
  if (chosen == 0) return plan;  // even the smallest supported dim overshoots

  plan.feasible = true;
  plan.recommended = chosen;
  plan.predicted_total_s = model.encode_s + model.k1 * static_cast<double>(chosen) +
                           model.k2 * static_cast<double>(map_size);
  plan.slack_s = latency_target_s - plan.predicted_total_s;
  return plan;
}

MemoryCheck check_memory(const MemoryBudget& budget) {
  MemoryCheck check;
  check.required_bytes = budget.map_size * budget.dim * 4;
  check.pass = budget.budget_bytes > check.required_bytes;
  return check;
}

}  // namespace qvpr
