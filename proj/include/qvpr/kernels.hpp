#pragma once

#include <span>

#include "qvpr/tensor.hpp"

namespace qvpr {

struct Conv2dAttrs {
  int stride = 1;
  int pad = 0;  // symmetric zero padding
  int groups = 1;
};

// Cross-correlation over NCHW input with [Cout, Cin/groups, Kh, Kw] weights.
// groups == Cin == Cout gives a depthwise convolution. Accumulation is done
// in double and stored as f32.
Tensor conv2d_f32(const Tensor& input, const Tensor& weight, std::span<const float> bias,
                  const Conv2dAttrs& attrs);

// y = scale * (x - mean) / sqrt(var + eps) + shift, per channel over NCHW.
Tensor batchnorm_f32(const Tensor& x, std::span<const float> mean, std::span<const float> var,
                     std::span<const float> scale, std::span<const float> shift, float eps);

Tensor relu(const Tensor& x);
Tensor relu6(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);

// y = x W^T + b with x [N, in], W [out, in].
Tensor linear_f32(const Tensor& x, const Tensor& weight, std::span<const float> bias);

// f32 <-> f16 tensor casts (round-to-nearest-even, saturating to infinity).
Tensor cast_f16(const Tensor& x);
Tensor cast_f32(const Tensor& x);
// f32 -> f16 -> f32 in one step, used to inject half-precision round-off.
Tensor f16_bounce(const Tensor& x);

// L2-normalizes each row of a [N, D] tensor in place; zero rows stay zero.
void l2_normalize_rows(Tensor& x);
void l2_normalize(std::span<float> v);

int64_t conv_out_extent(int64_t in, int kernel, int stride, int pad);

}  // namespace qvpr
