#include "qvpr/kernels.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "qvpr/float16.hpp"

namespace qvpr {

int64_t conv_out_extent(int64_t in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

Tensor conv2d_f32(const Tensor& input, const Tensor& weight, std::span<const float> bias,
                  const Conv2dAttrs& attrs) {
  require(input.rank() == 4, "conv2d: input must be NCHW, got shape " + input.shape_str());
  require(weight.rank() == 4, "conv2d: weight must be [Cout,Cin/g,Kh,Kw], got " + weight.shape_str());
  require(attrs.stride >= 1 && attrs.pad >= 0 && attrs.groups >= 1, "conv2d: bad stride/pad/groups");

  const int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const int g = attrs.groups;

  require(cin % g == 0, "conv2d: input channels (" + std::to_string(cin) +
                            ") not divisible by groups (" + std::to_string(g) + ")");
  require(cout % g == 0, "conv2d: output channels (" + std::to_string(cout) +
                             ") not divisible by groups (" + std::to_string(g) + ")");
  require(wc == cin / g, "conv2d: weight channel extent (" + std::to_string(wc) +
                             ") does not match input channels/groups (" +
                             std::to_string(cin / g) + ")");
  require(bias.empty() || static_cast<int64_t>(bias.size()) == cout,
          "conv2d: bias length (" + std::to_string(bias.size()) + ") does not match Cout (" +
              std::to_string(cout) + ")");

  const int64_t oh = conv_out_extent(h, static_cast<int>(kh), attrs.stride, attrs.pad);
  const int64_t ow = conv_out_extent(w, static_cast<int>(kw), attrs.stride, attrs.pad);
  require(oh >= 1 && ow >= 1, "conv2d: kernel " + weight.shape_str() +
                                  " does not fit input spatial extent " + input.shape_str());

  Tensor out({n, cout, oh, ow}, DType::F32);
  auto src = input.f32();
  auto wsp = weight.f32();
  auto dst = out.f32();

  const int64_t cin_g = cin / g;
  const int64_t cout_g = cout / g;
  const int64_t ksize = cin_g * kh * kw;

  // im2col per (image, group), then a small GEMM with double accumulation.
  std::vector<double> col(static_cast<size_t>(ksize * oh * ow));
  for (int64_t img = 0; img < n; ++img) {
    for (int64_t grp = 0; grp < g; ++grp) {
      double* colp = col.data();
      for (int64_t c = 0; c < cin_g; ++c) {
        const float* plane = &src[((img * cin + grp * cin_g + c) * h) * w];
        for (int64_t ky = 0; ky < kh; ++ky) {
          for (int64_t kx = 0; kx < kw; ++kx) {
            for (int64_t oy = 0; oy < oh; ++oy) {
              const int64_t iy = oy * attrs.stride - attrs.pad + ky;
              for (int64_t ox = 0; ox < ow; ++ox) {
                const int64_t ix = ox * attrs.stride - attrs.pad + kx;
                const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
                *colp++ = inside ? static_cast<double>(plane[iy * w + ix]) : 0.0;
              }
            }
          }
        }
      }
      for (int64_t oc = 0; oc < cout_g; ++oc) {
        const int64_t co = grp * cout_g + oc;
        const float* wrow = &wsp[co * ksize];
        float* orow = &dst[((img * cout + co) * oh) * ow];
        const double b = bias.empty() ? 0.0 : static_cast<double>(bias[co]);
        for (int64_t pix = 0; pix < oh * ow; ++pix) {
          double acc = b;
          const double* cp = &col[pix];
          const int64_t stride_pix = oh * ow;
          for (int64_t k = 0; k < ksize; ++k) {
            acc += static_cast<double>(wrow[k]) * cp[k * stride_pix];
          }
          orow[pix] = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

Tensor batchnorm_f32(const Tensor& x, std::span<const float> mean, std::span<const float> var,
                     std::span<const float> scale, std::span<const float> shift, float eps) {
  require(x.rank() == 4, "batchnorm: input must be NCHW, got " + x.shape_str());
  const int64_t c = x.dim(1);
  const auto check_len = [&](std::span<const float> v, const char* name) {
    require(static_cast<int64_t>(v.size()) == c,
            std::string("batchnorm: ") + name + " length (" + std::to_string(v.size()) +
                ") does not match channel extent (" + std::to_string(c) + ")");
  };
  check_len(mean, "mean");
  check_len(var, "var");
  check_len(scale, "scale");
  check_len(shift, "shift");
  require(eps > 0.0f, "batchnorm: eps must be positive");
  for (float v : var) require(v >= 0.0f, "batchnorm: negative variance");

  Tensor out(x.shape(), DType::F32);
  auto src = x.f32();
  auto dst = out.f32();
  const int64_t n = x.dim(0), spatial = x.dim(2) * x.dim(3);
  for (int64_t img = 0; img < n; ++img) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(var[ch]) + static_cast<double>(eps));
      const double a = static_cast<double>(scale[ch]) * inv;
      const double b = static_cast<double>(shift[ch]) - a * static_cast<double>(mean[ch]);
      const int64_t base = (img * c + ch) * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        dst[base + i] = static_cast<float>(a * static_cast<double>(src[base + i]) + b);
      }
    }
  }
  return out;
}

namespace {

Tensor map_f32(const Tensor& x, float (*fn)(float)) {
  Tensor out(x.shape(), DType::F32);
  auto src = x.f32();
  auto dst = out.f32();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return map_f32(x, [](float v) { return v > 0.0f ? v : 0.0f; });
}

Tensor relu6(const Tensor& x) {
  return map_f32(x, [](float v) { return v < 0.0f ? 0.0f : (v > 6.0f ? 6.0f : v); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor out(a.shape(), DType::F32);
  auto pa = a.f32();
  auto pb = b.f32();
  auto dst = out.f32();
  for (size_t i = 0; i < pa.size(); ++i) dst[i] = pa[i] + pb[i];
  return out;
}

Tensor linear_f32(const Tensor& x, const Tensor& weight, std::span<const float> bias) {
  require(x.rank() == 2, "linear: input must be [N,in], got " + x.shape_str());
  require(weight.rank() == 2, "linear: weight must be [out,in], got " + weight.shape_str());
  const int64_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  require(weight.dim(1) == in, "linear: weight inner dim (" + std::to_string(weight.dim(1)) +
                                   ") does not match input dim (" + std::to_string(in) + ")");
  require(bias.empty() || static_cast<int64_t>(bias.size()) == out_dim,
          "linear: bias length mismatch");

  Tensor out({n, out_dim}, DType::F32);
  auto src = x.f32();
  auto wsp = weight.f32();
  auto dst = out.f32();
  for (int64_t row = 0; row < n; ++row) {
    for (int64_t o = 0; o < out_dim; ++o) {
      double acc = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
      for (int64_t k = 0; k < in; ++k) {
        acc += static_cast<double>(src[row * in + k]) * static_cast<double>(wsp[o * in + k]);
      }
      dst[row * out_dim + o] = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor cast_f16(const Tensor& x) {
  Tensor out(x.shape(), DType::F16);
  auto src = x.f32();
  auto dst = out.f16();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = f32_to_f16_bits(src[i]);
  return out;
}

Tensor cast_f32(const Tensor& x) {
  Tensor out(x.shape(), DType::F32);
  auto src = x.f16();
  auto dst = out.f32();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = f16_bits_to_f32(src[i]);
  return out;
}

Tensor f16_bounce(const Tensor& x) {
  Tensor out(x.shape(), DType::F32);
  auto src = x.f32();
  auto dst = out.f32();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = f16_round(src[i]);
  return out;
}

void l2_normalize(std::span<float> v) {
  double sum = 0.0;
  for (float x : v) sum += static_cast<double>(x) * static_cast<double>(x);
  if (sum == 0.0) return;  // zero vector passes through
  const double inv = 1.0 / std::sqrt(sum);
  for (float& x : v) x = static_cast<float>(x * inv);
}

void l2_normalize_rows(Tensor& x) {
  require(x.rank() == 2, "l2_normalize_rows: expected [N,D], got " + x.shape_str());
  auto data = x.f32();
  const int64_t n = x.dim(0), d = x.dim(1);
  for (int64_t row = 0; row < n; ++row) {
    l2_normalize(data.subspan(row * d, d));
  }
}

}  // namespace qvpr
