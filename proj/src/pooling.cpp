#include "qvpr/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "qvpr/kernels.hpp"

namespace qvpr {

const char* pool_kind_name(PoolKind kind) {
  switch (kind) {
    case PoolKind::SPoC: return "spoc";
    case PoolKind::MAC: return "mac";
    case PoolKind::GeM: return "gem";
    case PoolKind::NetVLAD: return "netvlad";
  }
  return "?";
}

PoolKind pool_kind_from_name(const std::string& name) {
  if (name == "spoc") return PoolKind::SPoC;
  if (name == "mac") return PoolKind::MAC;
  if (name == "gem") return PoolKind::GeM;
  if (name == "netvlad") return PoolKind::NetVLAD;
  throw std::invalid_argument("unknown pooling kind '" + name + "'");
}

namespace {

void check_chw(const Tensor& features, const char* op) {
  if (features.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected [C,H,W] features, got " +
                                features.shape_str());
  }
  if (features.dim(1) < 1 || features.dim(2) < 1) {
    throw std::invalid_argument(std::string(op) + ": empty spatial extent " +
                                features.shape_str());
  }
}

}  // namespace

std::vector<float> spoc(const Tensor& features) {
  check_chw(features, "spoc");
  const int64_t c = features.dim(0), spatial = features.dim(1) * features.dim(2);
  auto src = features.f32();
  std::vector<float> out(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int64_t i = 0; i < spatial; ++i) sum += src[ch * spatial + i];
    out[ch] = static_cast<float>(sum / static_cast<double>(spatial));
  }
  return out;
}

std::vector<float> mac(const Tensor& features) {
  check_chw(features, "mac");
  const int64_t c = features.dim(0), spatial = features.dim(1) * features.dim(2);
  auto src = features.f32();
  std::vector<float> out(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    float best = -std::numeric_limits<float>::infinity();
    for (int64_t i = 0; i < spatial; ++i) best = std::max(best, src[ch * spatial + i]);
    out[ch] = best;
  }
  return out;
}

std::vector<float> gem(const Tensor& features, std::span<const float> p, float eps) {
  check_chw(features, "gem");
  const int64_t c = features.dim(0), spatial = features.dim(1) * features.dim(2);
  if (!(p.size() == 1 || static_cast<int64_t>(p.size()) == c)) {
    throw std::invalid_argument("gem: p length (" + std::to_string(p.size()) +
                                ") must be 1 or match channels (" + std::to_string(c) + ")");
  }
  for (float pe : p) {
    if (!(pe >= 1.0f)) throw std::invalid_argument("gem: exponent p must be >= 1");
  }
  auto src = features.f32();
  std::vector<float> out(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    const double pe = p.size() == 1 ? p[0] : p[ch];
    // Work relative to the channel max so large exponents cannot overflow.
    double mx = eps;
    for (int64_t i = 0; i < spatial; ++i) {
      mx = std::max(mx, static_cast<double>(std::max(src[ch * spatial + i], eps)));
    }
    double sum = 0.0;
    for (int64_t i = 0; i < spatial; ++i) {
      const double v = std::max(static_cast<double>(src[ch * spatial + i]),
                                static_cast<double>(eps));
      sum += std::pow(v / mx, pe);
    }
    out[ch] = static_cast<float>(mx * std::pow(sum / static_cast<double>(spatial), 1.0 / pe));
  }
  return out;
}

std::vector<float> gem(const Tensor& features, float p, float eps) {
  return gem(features, std::span<const float>(&p, 1), eps);
}

std::vector<float> netvlad_assign(std::span<const float> x, const Tensor& codes) {
  if (codes.rank() != 2) {
    throw std::invalid_argument("netvlad: codes must be [K,d], got " + codes.shape_str());
  }
  const int64_t k = codes.dim(0), d = codes.dim(1);
  if (static_cast<int64_t>(x.size()) != d) {
    throw std::invalid_argument("netvlad: descriptor dim (" + std::to_string(x.size()) +
                                ") does not match code dim (" + std::to_string(d) + ")");
  }
  auto csp = codes.f32();
  std::vector<double> dots(static_cast<size_t>(k));
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < k; ++i) {
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(x[j]) * csp[i * d + j];
    dots[i] = dot;
    mx = std::max(mx, dot);
  }
  double denom = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    dots[i] = std::exp(dots[i] - mx);
    denom += dots[i];
  }
  std::vector<float> out(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) out[i] = static_cast<float>(dots[i] / denom);
  return out;
}

std::vector<float> netvlad_pool(const Tensor& locals, const Tensor& codes, bool normalize) {
  if (locals.rank() != 2) {
    throw std::invalid_argument("netvlad: locals must be [N,d], got " + locals.shape_str());
  }
  const int64_t n = locals.dim(0), d = locals.dim(1), k = codes.dim(0);
  if (n < 1) throw std::invalid_argument("netvlad: need at least one local descriptor");
  if (codes.dim(1) != d) {
    throw std::invalid_argument("netvlad: code dim (" + std::to_string(codes.dim(1)) +
                                ") does not match local dim (" + std::to_string(d) + ")");
  }
  auto xs = locals.f32();
  auto cs = codes.f32();
  std::vector<double> acc(static_cast<size_t>(k * d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const auto a = netvlad_assign(xs.subspan(i * d, d), codes);
    for (int64_t kk = 0; kk < k; ++kk) {
      for (int64_t j = 0; j < d; ++j) {
        acc[kk * d + j] += static_cast<double>(a[kk]) * (xs[i * d + j] - cs[kk * d + j]);
      }
    }
  }
  std::vector<float> out(static_cast<size_t>(k * d));
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i]);
  if (normalize) {
    for (int64_t kk = 0; kk < k; ++kk) {
      l2_normalize(std::span<float>(out).subspan(kk * d, d));
    }
    l2_normalize(out);
  }
  return out;
}

Tensor feature_locals(const Tensor& features) {
  check_chw(features, "feature_locals");
  const int64_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
  Tensor locals({h * w, c}, DType::F32);
  auto src = features.f32();
  auto dst = locals.f32();
  for (int64_t pos = 0; pos < h * w; ++pos) {
    for (int64_t ch = 0; ch < c; ++ch) {
      dst[pos * c + ch] = src[ch * h * w + pos];
    }
  }
  return locals;
}

std::vector<float> project_normalize(std::span<const float> v, const Tensor* projection) {
  std::vector<float> out;
  if (projection != nullptr) {
    if (projection->rank() != 2 || projection->dim(1) != static_cast<int64_t>(v.size())) {
      throw std::invalid_argument("project_normalize: projection " + projection->shape_str() +
                                  " incompatible with input dim " + std::to_string(v.size()));
    }
    const int64_t rows = projection->dim(0), cols = projection->dim(1);
    auto w = projection->f32();
    out.resize(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int64_t cidx = 0; cidx < cols; ++cidx) {
        acc += static_cast<double>(w[r * cols + cidx]) * static_cast<double>(v[cidx]);
      }
      out[r] = static_cast<float>(acc);
    }
  } else {
    out.assign(v.begin(), v.end());
  }
  l2_normalize(out);
  return out;
}

Tensor kmeans_codes(const Tensor& samples, int k, int iterations, Rng& rng) {
  if (samples.rank() != 2) {
    throw std::invalid_argument("kmeans: samples must be [M,d], got " + samples.shape_str());
  }
  const int64_t m = samples.dim(0), d = samples.dim(1);
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  auto xs = samples.f32();

  Tensor codes({k, d}, DType::F32);
  auto cs = codes.f32();
  for (int64_t i = 0; i < k; ++i) {
    const int64_t pick = rng.uniform_int(m);
    std::memcpy(&cs[i * d], &xs[pick * d], static_cast<size_t>(d) * sizeof(float));
  }

  std::vector<int64_t> owner(static_cast<size_t>(m));
  std::vector<double> sums(static_cast<size_t>(k * d));
  std::vector<int64_t> counts(static_cast<size_t>(k));
  for (int it = 0; it < iterations; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int64_t i = 0; i < m; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int64_t arg = 0;
      for (int64_t c = 0; c < k; ++c) {
        double dist = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          const double diff = xs[i * d + j] - cs[c * d + j];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          arg = c;
        }
      }
      owner[i] = arg;
      counts[arg]++;
      for (int64_t j = 0; j < d; ++j) sums[arg * d + j] += xs[i * d + j];
    }
    for (int64_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {  // reseed empty cluster
        const int64_t pick = rng.uniform_int(m);
        std::memcpy(&cs[c * d], &xs[pick * d], static_cast<size_t>(d) * sizeof(float));
        continue;
      }
      for (int64_t j = 0; j < d; ++j) {
        cs[c * d + j] = static_cast<float>(sums[c * d + j] / static_cast<double>(counts[c]));
      }
    }
  }
  return codes;
}

}  // namespace qvpr
