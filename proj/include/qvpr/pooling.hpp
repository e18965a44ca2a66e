#pragma once

#include <span>
#include <vector>

#include "qvpr/rng.hpp"
#include "qvpr/tensor.hpp"

namespace qvpr {

enum class PoolKind : uint8_t { SPoC = 0, MAC = 1, GeM = 2, NetVLAD = 3 };

const char* pool_kind_name(PoolKind kind);
PoolKind pool_kind_from_name(const std::string& name);

// All heads consume a [C, H, W] feature map from the last conv layer.

// Spatial mean per channel.
std::vector<float> spoc(const Tensor& features);

// Spatial max per channel.
std::vector<float> mac(const Tensor& features);

// Generalized mean v_c = (mean_{hw} max(F, eps)^p)^(1/p). p is a single
// shared exponent or one per channel; p >= 1. p = 1 reduces to SPoC and
// p -> inf approaches MAC.
std::vector<float> gem(const Tensor& features, std::span<const float> p, float eps = 1e-6f);
std::vector<float> gem(const Tensor& features, float p, float eps = 1e-6f);

// Soft assignment of one local descriptor against [K, d] codes:
// a_k = softmax_k <x, c_k>. Rows sum to 1.
std::vector<float> netvlad_assign(std::span<const float> x, const Tensor& codes);

// Aggregated residuals v_k = sum_n a_nk (x_n - c_k) over locals [N, d],
// concatenated k-major into a K*d vector. When normalize is set, each
// k-block is L2-normalized and then the whole vector is (zero blocks and
// zero vectors pass through unchanged).
std::vector<float> netvlad_pool(const Tensor& locals, const Tensor& codes, bool normalize = true);

// Reshapes a [C, H, W] feature map into H*W local descriptors of dim C.
Tensor feature_locals(const Tensor& features);

// Optional linear projection followed by L2 normalization; a zero input
// stays zero.
std::vector<float> project_normalize(std::span<const float> v, const Tensor* projection);

// Lloyd k-means over [M, d] samples, seeded and deterministic. Used to fit
// NetVLAD codes from calibration features in place of training.
Tensor kmeans_codes(const Tensor& samples, int k, int iterations, Rng& rng);

}  // namespace qvpr
