#include "qvpr/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "qvpr/float16.hpp"

namespace qvpr {

const char* calib_method_name(CalibMethod m) {
  return m == CalibMethod::MaxAbs ? "maxabs" : "kl";
}

CalibMethod calib_method_from_name(const std::string& name) {
  if (name == "maxabs") return CalibMethod::MaxAbs;
  if (name == "kl") return CalibMethod::KL;
  throw std::invalid_argument("unknown calibration method '" + name + "'");
}

int quant_max(int bits) {
  if (bits != 4 && bits != 8) {
    throw std::invalid_argument("bitwidth must be 4 or 8, got " + std::to_string(bits));
  }
  return (1 << (bits - 1)) - 1;
}

double round_half_even(double x) {
  const double fl = std::floor(x);
  const double diff = x - fl;
  if (diff > 0.5) return fl + 1.0;
  if (diff < 0.5) return fl;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

namespace {

void check_params(const QuantParams& params, int64_t cout) {
  quant_max(params.bits);
  if (params.granularity == Granularity::PerTensor) {
    if (params.scales.size() != 1) {
      throw std::invalid_argument("per-tensor params need exactly one scale");
    }
  } else if (static_cast<int64_t>(params.scales.size()) != cout) {
    throw std::invalid_argument("per-channel scale count (" +
                                std::to_string(params.scales.size()) +
                                ") does not match output channels (" + std::to_string(cout) +
                                ")");
  }
  for (float s : params.scales) {
    if (!(s > 0.0f)) throw std::invalid_argument("quantization scales must be positive");
  }
}

}  // namespace

Tensor quantize_tensor(const Tensor& w, const QuantParams& params) {
  const int64_t cout = w.rank() == 0 ? 1 : w.dim(0);
  check_params(params, cout);
  const int qmax = quant_max(params.bits);
  const int64_t count = w.elem_count();
  const int64_t per_channel = cout == 0 ? 0 : count / cout;
  auto src = w.f32();

  Tensor out(w.shape(), params.bits == 8 ? DType::I8 : DType::I4Packed);
  for (int64_t i = 0; i < count; ++i) {
    const int64_t channel =
        params.granularity == Granularity::PerChannel ? i / per_channel : 0;
    const double s = params.scales[static_cast<size_t>(channel)];
    double q = round_half_even(static_cast<double>(src[i]) / s);
    q = std::clamp(q, static_cast<double>(-qmax), static_cast<double>(qmax));
    if (params.bits == 8) {
      out.i8()[i] = static_cast<int8_t>(q);
    } else {
      out.i4_set(i, static_cast<int8_t>(q));
    }
  }
  return out;
}

Tensor dequantize_tensor(const Tensor& w_int, const QuantParams& params) {
  const int64_t cout = w_int.rank() == 0 ? 1 : w_int.dim(0);
  check_params(params, cout);
  const int64_t count = w_int.elem_count();
  const int64_t per_channel = cout == 0 ? 0 : count / cout;

  Tensor out(w_int.shape(), DType::F32);
  auto dst = out.f32();
  for (int64_t i = 0; i < count; ++i) {
    const int64_t channel =
        params.granularity == Granularity::PerChannel ? i / per_channel : 0;
    const float s = params.scales[static_cast<size_t>(channel)];
    const int v = w_int.dtype() == DType::I8 ? w_int.i8()[i] : w_int.i4_get(i);
    dst[i] = s * static_cast<float>(v);
  }
  return out;
}

float maxabs_scale(double max_abs, int bits) {
  if (max_abs == 0.0) return 1.0f;  // sentinel for an all-zero slice
  return static_cast<float>(max_abs / quant_max(bits));
}

QuantParams calibrate_maxabs(const Tensor& w, int bits, Granularity granularity) {
  quant_max(bits);
  auto src = w.f32();
  QuantParams params{bits, granularity, {}};
  if (granularity == Granularity::PerTensor) {
    double mx = 0.0;
    for (float v : src) mx = std::max(mx, static_cast<double>(std::fabs(v)));
    params.scales.push_back(maxabs_scale(mx, bits));
  } else {
    const int64_t cout = w.dim(0);
    const int64_t per_channel = w.elem_count() / cout;
    for (int64_t c = 0; c < cout; ++c) {
      double mx = 0.0;
      for (int64_t k = 0; k < per_channel; ++k) {
        mx = std::max(mx, static_cast<double>(std::fabs(src[c * per_channel + k])));
      }
      params.scales.push_back(maxabs_scale(mx, bits));
    }
  }
  return params;
}

void MagnitudeHistogram::observe_max(std::span<const float> values) {
  for (float v : values) max_abs = std::max(max_abs, static_cast<double>(std::fabs(v)));
}

void MagnitudeHistogram::accumulate(std::span<const float> values) {
  if (max_abs == 0.0) return;
  if (counts.empty()) counts.assign(kBins, 0);
  const double width = max_abs / kBins;
  for (float v : values) {
    const auto bin = static_cast<int64_t>(std::fabs(v) / width);
    counts[static_cast<size_t>(std::min<int64_t>(bin, kBins - 1))]++;
  }
}

MagnitudeHistogram MagnitudeHistogram::of(std::span<const float> values) {
  MagnitudeHistogram h;
  h.observe_max(values);
  h.accumulate(values);
  return h;
}

double kl_optimal_threshold(const MagnitudeHistogram& hist, int bits) {
  const int levels = quant_max(bits);
  const int nbins = MagnitudeHistogram::kBins;
  if (hist.all_zero()) {
    throw std::invalid_argument("kl calibration needs at least one nonzero value");
  }
  const double width = hist.max_abs / nbins;

  double best_kl = std::numeric_limits<double>::infinity();
  int best_i = nbins;
  std::vector<double> ref(nbins), quant(nbins);
  for (int i = MagnitudeHistogram::kSweepStart; i <= nbins; ++i) {
    // clipped reference: outliers collapse into the last kept bin
    double total = 0.0;
    for (int j = 0; j < i; ++j) {
      ref[j] = static_cast<double>(hist.counts[j]);
      total += ref[j];
    }
    double tail = 0.0;
    for (int j = i; j < nbins; ++j) tail += static_cast<double>(hist.counts[j]);
    ref[i - 1] += tail;
    total += tail;
    if (total == 0.0) continue;

    // quantize the i kept bins down to `levels` groups and expand back,
    // spreading each group's mass over its nonzero source bins
    std::fill(quant.begin(), quant.begin() + i, 0.0);
    for (int g = 0; g < levels; ++g) {
      const int lo = static_cast<int>(static_cast<int64_t>(g) * i / levels);
      const int hi = static_cast<int>(static_cast<int64_t>(g + 1) * i / levels);
      double mass = 0.0;
      int nonzero = 0;
      for (int j = lo; j < hi; ++j) {
        mass += ref[j];
        if (ref[j] > 0.0) ++nonzero;
      }
      if (nonzero == 0) continue;
      const double share = mass / nonzero;
      for (int j = lo; j < hi; ++j) {
        if (ref[j] > 0.0) quant[j] = share;
      }
    }

    double kl = 0.0;
    for (int j = 0; j < i; ++j) {
      if (ref[j] > 0.0) kl += ref[j] / total * std::log(ref[j] / quant[j]);
    }
    if (kl <= best_kl) {  // ties toward the larger threshold
      best_kl = kl;
      best_i = i;
    }
  }
  return best_i * width;
}

QuantParams calibrate_kl(std::span<const float> values, int bits) {
  const MagnitudeHistogram hist = MagnitudeHistogram::of(values);
  QuantParams params{bits, Granularity::PerTensor, {}};
  if (hist.all_zero()) {
    params.scales.push_back(1.0f);  // maxabs sentinel
  } else {
    params.scales.push_back(
        static_cast<float>(kl_optimal_threshold(hist, bits) / quant_max(bits)));
  }
  return params;
}

QuantParams calibrate_kl_weights(const Tensor& w, int bits) {
  const int64_t cout = w.dim(0);
  const int64_t per_channel = w.elem_count() / cout;
  auto src = w.f32();
  QuantParams params{bits, Granularity::PerChannel, {}};
  for (int64_t c = 0; c < cout; ++c) {
    const QuantParams slice =
        calibrate_kl(src.subspan(c * per_channel, per_channel), bits);
    params.scales.push_back(slice.scales[0]);
  }
  return params;
}

QuantParams calibrate_weights(const Tensor& w, int bits, CalibMethod method) {
  return method == CalibMethod::KL ? calibrate_kl_weights(w, bits)
                                   : calibrate_maxabs(w, bits, Granularity::PerChannel);
}

Tensor quantize_activation(const Tensor& x, float scale) {
  if (!(scale > 0.0f)) throw std::invalid_argument("activation scale must be positive");
  Tensor out(x.shape(), DType::I8);
  auto src = x.f32();
  auto dst = out.i8();
  const double s = scale;
  for (size_t i = 0; i < src.size(); ++i) {
    const double q =
        std::clamp(round_half_even(static_cast<double>(src[i]) / s), -127.0, 127.0);
    dst[i] = static_cast<int8_t>(q);
  }
  return out;
}

namespace {

void check_accumulator(int64_t cin_per_group, int64_t kh, int64_t kw) {
  const int64_t worst = cin_per_group * kh * kw * 127 * 127;
  if (worst > std::numeric_limits<int32_t>::max()) {
    throw std::invalid_argument(
        "int32 accumulator overflow risk: Cin/g*Kh*Kw = " +
        std::to_string(cin_per_group * kh * kw) + " exceeds the safe bound");
  }
}

// Sign-extended nibble unpack so int4 weights share the i8 kernel path.
std::vector<int8_t> unpack_weights(const Tensor& w) {
  const int64_t count = w.elem_count();
  std::vector<int8_t> out(static_cast<size_t>(count));
  if (w.dtype() == DType::I8) {
    auto src = w.i8();
    std::copy(src.begin(), src.end(), out.begin());
  } else if (w.dtype() == DType::I4Packed) {
    for (int64_t i = 0; i < count; ++i) out[static_cast<size_t>(i)] = w.i4_get(i);
  } else {
    throw std::invalid_argument("integer conv expects i8 or i4packed weights, got " +
                                std::string(dtype_name(w.dtype())));
  }
  return out;
}

}  // namespace

Tensor qconv2d_int(const Tensor& input, float act_scale, const Tensor& weight,
                   std::span<const float> weight_scales, std::span<const float> bias,
                   const Conv2dAttrs& attrs) {
  if (input.rank() != 4 || input.dtype() != DType::I8) {
    throw std::invalid_argument("qconv2d: input must be NCHW i8");
  }
  if (!(act_scale > 0.0f)) throw std::invalid_argument("qconv2d: activation scale must be positive");
  const int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int g = attrs.groups;
  if (cin % g != 0 || cout % g != 0 || weight.dim(1) != cin / g) {
    throw std::invalid_argument("qconv2d: channel/group mismatch: input " + input.shape_str() +
                                ", weight " + weight.shape_str() + ", groups " +
                                std::to_string(g));
  }
  if (static_cast<int64_t>(weight_scales.size()) != cout) {
    throw std::invalid_argument("qconv2d: per-channel scale count mismatch");
  }
  check_accumulator(cin / g, kh, kw);

  const std::vector<int8_t> wz = unpack_weights(weight);
  const int64_t oh = conv_out_extent(h, static_cast<int>(kh), attrs.stride, attrs.pad);
  const int64_t ow = conv_out_extent(w, static_cast<int>(kw), attrs.stride, attrs.pad);

  Tensor out({n, cout, oh, ow}, DType::F32);
  auto src = input.i8();
  auto dst = out.f32();
  const int64_t cin_g = cin / g;
  const int64_t cout_g = cout / g;

  for (int64_t img = 0; img < n; ++img) {
    for (int64_t co = 0; co < cout; ++co) {
      const int64_t grp = co / cout_g;
      const float out_scale = act_scale * weight_scales[co];
      const float b = bias.empty() ? 0.0f : bias[co];
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          int32_t acc = 0;
          for (int64_t c = 0; c < cin_g; ++c) {
            const int64_t ic = grp * cin_g + c;
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = oy * attrs.stride - attrs.pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ox * attrs.stride - attrs.pad + kx;
                if (ix < 0 || ix >= w) continue;
                const int32_t xv = src[((img * cin + ic) * h + iy) * w + ix];
                const int32_t wv = wz[((co * cin_g + c) * kh + ky) * kw + kx];
                acc += xv * wv;
              }
            }
          }
          dst[((img * cout + co) * oh + oy) * ow + ox] =
              static_cast<float>(acc) * out_scale + b;
        }
      }
    }
  }
  return out;
}

Tensor qlinear_int(const Tensor& x, float act_scale, const Tensor& weight,
                   std::span<const float> weight_scales, std::span<const float> bias) {
  if (x.rank() != 2 || x.dtype() != DType::I8) {
    throw std::invalid_argument("qlinear: input must be [N,in] i8");
  }
  const int64_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) throw std::invalid_argument("qlinear: weight inner dim mismatch");
  if (static_cast<int64_t>(weight_scales.size()) != out_dim) {
    throw std::invalid_argument("qlinear: per-channel scale count mismatch");
  }
  check_accumulator(in, 1, 1);

  const std::vector<int8_t> wz = unpack_weights(weight);
  Tensor out({n, out_dim}, DType::F32);
  auto src = x.i8();
  auto dst = out.f32();
  for (int64_t row = 0; row < n; ++row) {
    for (int64_t o = 0; o < out_dim; ++o) {
      int32_t acc = 0;
      for (int64_t k = 0; k < in; ++k) {
        acc += static_cast<int32_t>(src[row * in + k]) * wz[o * in + k];
      }
      const float b = bias.empty() ? 0.0f : bias[o];
      dst[row * out_dim + o] = static_cast<float>(acc) * act_scale * weight_scales[o] + b;
    }
  }
  return out;
}

ActivationStats collect_activation_stats(const ModelGraph& m, const CalibrationSample& calib) {
  if (calib.inputs.empty()) {
    throw std::invalid_argument("calibration sample is empty");
  }
  ActivationStats stats;
  const auto max_pass = [&stats](int layer, const Tensor& input) {
    stats.by_layer[layer].observe_max(input.f32());
  };
  const auto hist_pass = [&stats](int layer, const Tensor& input) {
    stats.by_layer[layer].accumulate(input.f32());
  };
  for (const Tensor& sample : calib.inputs) {
    Tensor batch({1, sample.dim(0), sample.dim(1), sample.dim(2)}, DType::F32);
    std::copy(sample.raw().begin(), sample.raw().end(), batch.raw().begin());
    forward(m, batch, max_pass);
  }
  for (const Tensor& sample : calib.inputs) {
    Tensor batch({1, sample.dim(0), sample.dim(1), sample.dim(2)}, DType::F32);
    std::copy(sample.raw().begin(), sample.raw().end(), batch.raw().begin());
    forward(m, batch, hist_pass);
  }
  return stats;
}

float activation_scale(const MagnitudeHistogram& hist, int bits, CalibMethod method) {
  if (hist.all_zero()) return 1.0f;
  if (method == CalibMethod::KL) {
    return static_cast<float>(kl_optimal_threshold(hist, bits) / quant_max(bits));
  }
  return maxabs_scale(hist.max_abs, bits);
}

double mean_bits(const PrecisionConfig& config) {
  if (config.empty()) return 0.0;
  double sum = 0.0;
  for (int b : config) sum += b;
  return sum / static_cast<double>(config.size());
}

void validate_precisions(const PrecisionConfig& config) {
  for (int b : config) {
    if (b != 4 && b != 8 && b != 16) {
      throw std::invalid_argument("precision entries must be 4, 8 or 16; got " +
                                  std::to_string(b));
    }
  }
}

ModelGraph quantize_model(const ModelGraph& fused, const PrecisionConfig& config,
                          const ActivationStats& stats, CalibMethod method) {
  validate_precisions(config);
  const std::vector<int> targets = quantizable_layers(fused);
  if (config.size() != targets.size()) {
    throw std::invalid_argument("precision config length (" + std::to_string(config.size()) +
                                ") does not match quantizable layer count (" +
                                std::to_string(targets.size()) + ")");
  }
  for (const LayerSpec& layer : fused.layers) {
    if (layer.kind == LayerKind::BatchNorm) {
      throw std::invalid_argument("quantize: model contains batchnorm layers; fuse first");
    }
    if (layer.quant.bits != 32) {
      throw std::invalid_argument("quantize: model is already quantized");
    }
  }

  ModelGraph q = fused;
  for (size_t t = 0; t < targets.size(); ++t) {
    const int idx = targets[t];
    const int bits = config[t];
    LayerSpec& layer = q.layers[idx];
    Tensor& w = q.weight(idx, "weight");
    if (bits == 16) {
      w = cast_f16(w);
      layer.quant = LayerQuant{16, {}, 0.0f};
      continue;
    }
    if (layer.kind == LayerKind::Conv || layer.kind == LayerKind::DepthwiseConv) {
      check_accumulator(w.dim(1), w.dim(2), w.dim(3));
    } else {
      check_accumulator(w.dim(1), 1, 1);
    }
    const QuantParams wq = calibrate_weights(w, bits, method);
    const auto it = stats.by_layer.find(idx);
    if (it == stats.by_layer.end()) {
      throw std::invalid_argument("quantize: no activation statistics for layer " +
                                  std::to_string(idx));
    }
    // Weights carry the 4- or 8-bit grid; input activations always ride the
    // int8 path with a per-tensor scale.
    const float act = activation_scale(it->second, 8, method);
    w = quantize_tensor(w, wq);
    layer.quant = LayerQuant{bits, wq.scales, act};
  }

  // GeM and NetVLAD inputs inherit the precision path of the layer feeding
  // the head; SPoC and MAC pool plain f32 features.
  const int head = pooling_head_index(q);
  PoolingHeadAttrs& pool = q.layers[head].pooling();
  if (pool.kind == PoolKind::GeM || pool.kind == PoolKind::NetVLAD) {
    int feeder_bits = 32;
    for (size_t t = 0; t < targets.size(); ++t) {
      if (targets[t] < head) feeder_bits = config[t];
    }
    if (feeder_bits == 16) {
      pool.input_bits = 16;
    } else if (feeder_bits == 8 || feeder_bits == 4) {
      const auto it = stats.by_layer.find(head);
      if (it == stats.by_layer.end()) {
        throw std::invalid_argument("quantize: no activation statistics for the pooling head");
      }
      pool.input_bits = 8;
      pool.input_scale = activation_scale(it->second, 8, method);
    }
  }
  return q;
}

ModelGraph quantize_model(const ModelGraph& fused, const PrecisionConfig& config,
                          const CalibrationSample& calib, CalibMethod method) {
  bool needs_stats = false;
  for (int b : config) needs_stats |= (b == 4 || b == 8);
  if (needs_stats && calib.inputs.empty()) {
    throw std::invalid_argument("quantize: integer precisions need a calibration sample");
  }
  ActivationStats stats;
  if (needs_stats) stats = collect_activation_stats(fused, calib);
  return quantize_model(fused, config, stats, method);
}

PrecisionConfig precision_config_of(const ModelGraph& m) {
  PrecisionConfig config;
  for (int idx : quantizable_layers(m)) config.push_back(m.layers[idx].quant.bits);
  return config;
}

}  // namespace qvpr
