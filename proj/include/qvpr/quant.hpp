#pragma once

#include <map>
#include <span>
#include <vector>

#include "qvpr/kernels.hpp"
#include "qvpr/model.hpp"
#include "qvpr/tensor.hpp"

namespace qvpr {

enum class Granularity : uint8_t { PerTensor = 0, PerChannel = 1 };

enum class CalibMethod : uint8_t { MaxAbs = 0, KL = 1 };
const char* calib_method_name(CalibMethod m);
CalibMethod calib_method_from_name(const std::string& name);

// Symmetric linear quantization. scales holds one entry per output channel
// (PerChannel) or a single entry (PerTensor); every scale is positive.
struct QuantParams {
  int bits = 8;  // 4 or 8
  Granularity granularity = Granularity::PerTensor;
  std::vector<float> scales;
};

// 2^(b-1) - 1; the integer grid is the symmetric range [-qmax, qmax].
int quant_max(int bits);
double round_half_even(double x);

// w_int = clamp(round_half_even(w / s), -qmax, qmax). Per-channel scales
// apply along axis 0 (output channels). bits 8 yields i8, bits 4 yields
// i4packed.
Tensor quantize_tensor(const Tensor& w, const QuantParams& params);

// w = s * w_int elementwise, per-channel where applicable.
Tensor dequantize_tensor(const Tensor& w_int, const QuantParams& params);

// s = max|w| / qmax; an all-zero slice gets the sentinel scale 1.
QuantParams calibrate_maxabs(const Tensor& w, int bits, Granularity granularity);
float maxabs_scale(double max_abs, int bits);

// Magnitude histogram for entropy calibration: 2048 bins over [0, max|v|],
// candidate clip thresholds swept from bin 128 upward. Filling is
// two-phase so activation statistics can stream over a calibration pass.
struct MagnitudeHistogram {
  static constexpr int kBins = 2048;
  static constexpr int kSweepStart = 128;

  double max_abs = 0.0;
  std::vector<uint64_t> counts;

  void observe_max(std::span<const float> values);
  void accumulate(std::span<const float> values);  // call after observe_max pass
  bool all_zero() const { return max_abs == 0.0; }

  static MagnitudeHistogram of(std::span<const float> values);
};

// Sweeps clip thresholds i*max_abs/2048 for i in [128, 2048], quantizing the
// clipped distribution to qmax(bits) levels and minimizing KL(ref || quant).
// Ties break toward the larger threshold.
double kl_optimal_threshold(const MagnitudeHistogram& hist, int bits);

QuantParams calibrate_kl(std::span<const float> values, int bits);  // per-tensor
QuantParams calibrate_kl_weights(const Tensor& w, int bits);        // per-channel
QuantParams calibrate_weights(const Tensor& w, int bits, CalibMethod method);  // per-channel

// Quantizes an f32 activation tensor to i8 with a per-tensor scale.
Tensor quantize_activation(const Tensor& x, float scale);

// Integer convolution: i8 activations (per-tensor scale) against i8 or
// i4packed weights (per-channel scales), exact int32 accumulation, output
// dequantized as acc * s_x * s_w[c] + bias[c]. Shapes whose worst-case
// accumulator exceeds int32 are rejected.
Tensor qconv2d_int(const Tensor& input, float act_scale, const Tensor& weight,
                   std::span<const float> weight_scales, std::span<const float> bias,
                   const Conv2dAttrs& attrs);
Tensor qlinear_int(const Tensor& x, float act_scale, const Tensor& weight,
                   std::span<const float> weight_scales, std::span<const float> bias);

struct CalibrationSample {
  std::vector<Tensor> inputs;  // each [C, H, W], matching the model input
};

// Per-layer activation statistics gathered by running the calibration
// sample through the f32 model twice (max pass, then histogram pass). Keys
// are quantizable layer indices plus the pooling head index.
struct ActivationStats {
  std::map<int, MagnitudeHistogram> by_layer;
};

ActivationStats collect_activation_stats(const ModelGraph& m, const CalibrationSample& calib);
float activation_scale(const MagnitudeHistogram& hist, int bits, CalibMethod method);

// Per-layer precision assignment over the quantizable layers; entries are
// 4, 8 or 16 bits.
using PrecisionConfig = std::vector<int>;
double mean_bits(const PrecisionConfig& config);
void validate_precisions(const PrecisionConfig& config);

// Post-training quantization of a fused f32 graph under a per-layer
// precision configuration. Layers at 4/8 bits get per-channel integer
// weights and a per-tensor int8 input activation scale; layers at 16 get
// f16 weights. GeM and NetVLAD head inputs inherit the precision path of
// the preceding layer; SPoC and MAC pool plain dequantized f32 features.
ModelGraph quantize_model(const ModelGraph& fused, const PrecisionConfig& config,
                          const CalibrationSample& calib, CalibMethod method);
ModelGraph quantize_model(const ModelGraph& fused, const PrecisionConfig& config,
                          const ActivationStats& stats, CalibMethod method);

// Reads the per-layer bit widths back off a graph (32 for untouched f32).
PrecisionConfig precision_config_of(const ModelGraph& m);

}  // namespace qvpr
