#include "qvpr/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "qvpr/kernels.hpp"
#include "qvpr/quant.hpp"
#include "qvpr/rng.hpp"

namespace qvpr {

namespace {

const char* kLayerNames[] = {"conv",  "dwconv",   "bn",     "relu",
                             "relu6", "resadd", "linear", "pool"};

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

const char* layer_kind_name(LayerKind kind) { return kLayerNames[static_cast<size_t>(kind)]; }

LayerKind layer_kind_from_name(const std::string& name) {
  for (size_t i = 0; i < std::size(kLayerNames); ++i) {
    if (name == kLayerNames[i]) return static_cast<LayerKind>(i);
  }
  throw std::runtime_error("unknown layer kind '" + name + "'");
}

std::string weight_key(int layer_index, std::string_view role) {
  return "layer" + std::to_string(layer_index) + "." + std::string(role);
}

bool ModelGraph::has_weight(int layer, std::string_view role) const {
  return weights.count(weight_key(layer, role)) != 0;
}

const Tensor& ModelGraph::weight(int layer, std::string_view role) const {
  const auto it = weights.find(weight_key(layer, role));
  if (it == weights.end()) {
    throw std::runtime_error("unresolved weight handle " + weight_key(layer, role));
  }
  return it->second;
}

Tensor& ModelGraph::weight(int layer, std::string_view role) {
  const auto it = weights.find(weight_key(layer, role));
  if (it == weights.end()) {
    throw std::runtime_error("unresolved weight handle " + weight_key(layer, role));
  }
  return it->second;
}

void ModelGraph::set_weight(int layer, std::string_view role, Tensor t) {
  weights[weight_key(layer, role)] = std::move(t);
}

void validate_graph(const ModelGraph& m) {
  int head = -1;
  int last_conv = -1;
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerSpec& layer = m.layers[i];
    switch (layer.kind) {
      case LayerKind::Conv:
      case LayerKind::DepthwiseConv:
      case LayerKind::BatchNorm:
        last_conv = i;
        require(head < 0, "graph: layer " + std::to_string(i) + " (" +
                              layer_kind_name(layer.kind) + ") appears after the pooling head");
        break;
      case LayerKind::ResidualAdd:
        require(layer.residual().source >= 0 && layer.residual().source < i,
                "graph: residual source " + std::to_string(layer.residual().source) +
                    " does not precede layer " + std::to_string(i));
        break;
      case LayerKind::PoolingHead:
        require(head < 0, "graph: more than one pooling head");
        head = i;
        break;
      case LayerKind::Linear:
        require(head >= 0, "graph: linear layer " + std::to_string(i) +
                               " before the pooling head");
        break;
      default:
        break;
    }
  }
  require(head >= 0, "graph: missing pooling head");
  require(head > last_conv, "graph: pooling head precedes convolutional layers");
  require(m.descriptor_dim >= 1, "graph: descriptor dim must be >= 1");
}

int64_t count_parameters(const ModelGraph& m) {
  int64_t total = 0;
  for (const auto& [key, tensor] : m.weights) total += tensor.elem_count();
  return total;
}

std::vector<int> quantizable_layers(const ModelGraph& m) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerKind k = m.layers[i].kind;
    if (k == LayerKind::Conv || k == LayerKind::DepthwiseConv || k == LayerKind::Linear) {
      out.push_back(i);
    }
  }
  return out;
}

int pooling_head_index(const ModelGraph& m) {
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    if (m.layers[i].kind == LayerKind::PoolingHead) return i;
  }
  throw std::runtime_error("graph: missing pooling head");
}

const char* family_name(Family f) {
  switch (f) {
    case Family::MiniMobileNet: return "mini-mobilenet";
    case Family::MiniResNet: return "mini-resnet";
    case Family::MiniVGG: return "mini-vgg";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  if (name == "mini-mobilenet") return Family::MiniMobileNet;
  if (name == "mini-resnet") return Family::MiniResNet;
  if (name == "mini-vgg") return Family::MiniVGG;
  throw std::invalid_argument("unknown backbone family '" + name + "'");
}

namespace {

// Incremental graph assembly with seeded initialization.
class Builder {
 public:
  Builder(const BackboneConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    model_.name = family_name(cfg.family);
    model_.input_shape = cfg.input_shape;
    model_.descriptor_dim = cfg.descriptor_dim;
    channels_ = static_cast<int>(cfg.input_shape.at(0));
    height_ = cfg.input_shape.at(1);
    width_ = cfg.input_shape.at(2);
  }

  int conv(int out_channels, int k, int stride, int pad, int groups = 1) {
    const LayerKind kind =
        (groups == channels_ && groups == out_channels && groups > 1)
            ? LayerKind::DepthwiseConv
            : LayerKind::Conv;
    LayerSpec layer;
    layer.kind = kind;
    layer.attrs = ConvAttrs{channels_, out_channels, k, k, stride, pad, groups};
    const int idx = push(std::move(layer));
    const int fan_in = (channels_ / groups) * k * k;
    model_.set_weight(idx, "weight",
                      random_uniform({out_channels, channels_ / groups, k, k}, fan_in));
    model_.set_weight(idx, "bias", Tensor({out_channels}, DType::F32));
    channels_ = out_channels;
    height_ = conv_out_extent(height_, k, stride, pad);
    width_ = conv_out_extent(width_, k, stride, pad);
    return idx;
  }

  int batchnorm() {
    LayerSpec layer;
    layer.kind = LayerKind::BatchNorm;
    layer.attrs = BatchNormAttrs{channels_, 1e-5f};
    const int idx = push(std::move(layer));
    // Statistics emulating a trained network rather than exact identity,
    // so fusion is numerically exercised.
    model_.set_weight(idx, "mean", random_range({channels_}, -0.1f, 0.1f));
    model_.set_weight(idx, "var", random_range({channels_}, 0.5f, 1.5f));
    model_.set_weight(idx, "scale", random_range({channels_}, 0.8f, 1.2f));
    model_.set_weight(idx, "shift", random_range({channels_}, -0.1f, 0.1f));
    return idx;
  }

  int activation(LayerKind kind) {
    LayerSpec layer;
    layer.kind = kind;
    return push(std::move(layer));
  }

  int residual(int source) {
    LayerSpec layer;
    layer.kind = LayerKind::ResidualAdd;
    layer.attrs = ResidualAddAttrs{source};
    return push(std::move(layer));
  }

  int pooling_head() {
    LayerSpec layer;
    layer.kind = LayerKind::PoolingHead;
    PoolingHeadAttrs attrs;
    attrs.kind = cfg_.pooling;
    layer.attrs = attrs;
    const int idx = push(std::move(layer));
    if (cfg_.pooling == PoolKind::GeM) {
      Tensor p({1}, DType::F32);
      p.f32()[0] = cfg_.gem_p;
      model_.set_weight(idx, "p", std::move(p));
      pooled_dim_ = channels_;
    } else if (cfg_.pooling == PoolKind::NetVLAD) {
      require(cfg_.netvlad_codes >= 1, "build: netvlad needs at least one code");
      pooled_dim_ = cfg_.netvlad_codes * channels_;
    } else {
      pooled_dim_ = channels_;
    }
    return idx;
  }

  int last_index() const { return static_cast<int>(model_.layers.size()) - 1; }
  int channels() const { return channels_; }
  int pooled_dim() const { return pooled_dim_; }

  ModelGraph finish() { return std::move(model_); }

 private:
  int push(LayerSpec layer) {
    model_.layers.push_back(std::move(layer));
    return last_index();
  }

  Tensor random_uniform(std::vector<int64_t> shape, int fan_in) {
    const float k = 1.0f / std::sqrt(static_cast<float>(fan_in));
    return random_range(std::move(shape), -k, k);
  }

  Tensor random_range(std::vector<int64_t> shape, float lo, float hi) {
    Tensor t(std::move(shape), DType::F32);
    for (float& v : t.f32()) v = rng_.uniform_f(lo, hi);
    return t;
  }

  const BackboneConfig& cfg_;
  Rng rng_;
  ModelGraph model_;
  int channels_ = 0;
  int64_t height_ = 0, width_ = 0;
  int pooled_dim_ = 0;
};

}  // namespace

ModelGraph build_backbone(const BackboneConfig& cfg) {
  require(cfg.width > 0.0f, "build: width multiplier must be positive");
  require(cfg.depth >= 1, "build: depth must be >= 1");
  require(cfg.input_shape.size() == 3, "build: input shape must be [C,H,W]");
  require(cfg.descriptor_dim >= 1, "build: descriptor dim must be >= 1");

  Builder b(cfg);
  const int c0 = std::max(4, static_cast<int>(std::lround(16.0f * cfg.width)));

  switch (cfg.family) {
    case Family::MiniVGG: {
      // Plain conv stack, no batch normalization; stride-2 downsampling.
      int ch = c0;
      b.conv(ch, 3, 1, 1);
      b.activation(LayerKind::ReLU);
      for (int i = 1; i < cfg.depth; ++i) {
        ch = std::min(ch * 2, c0 * 8);
        b.conv(ch, 3, 2, 1);
        b.activation(LayerKind::ReLU);
      }
      break;
    }
    case Family::MiniResNet: {
      int ch = c0;
      b.conv(ch, 3, 1, 1);
      b.batchnorm();
      b.activation(LayerKind::ReLU);
      for (int i = 0; i < cfg.depth; ++i) {
        if (cfg.depth >= 2 && i == cfg.depth / 2) {
          // transition: downsample and widen, no residual
          ch *= 2;
          b.conv(ch, 3, 2, 1);
          b.batchnorm();
          b.activation(LayerKind::ReLU);
          continue;
        }
        const int entry = b.last_index();
        b.conv(ch, 3, 1, 1);
        b.batchnorm();
        b.activation(LayerKind::ReLU);
        b.conv(ch, 3, 1, 1);
        b.batchnorm();
        b.residual(entry);
        b.activation(LayerKind::ReLU);
      }
      break;
    }
    case Family::MiniMobileNet: {
      int ch = c0;
      b.conv(ch, 3, 2, 1);
      b.batchnorm();
      b.activation(LayerKind::ReLU6);
      constexpr int kExpansion = 4;
      for (int i = 0; i < cfg.depth; ++i) {
        const bool down = cfg.depth >= 2 && i == cfg.depth / 2;
        const int stride = down ? 2 : 1;
        const int out_ch = down ? ch * 2 : ch;
        const int entry = b.last_index();
        const int mid = ch * kExpansion;
        b.conv(mid, 1, 1, 0);  // expand
        b.batchnorm();
        b.activation(LayerKind::ReLU6);
        b.conv(mid, 3, stride, 1, mid);  // depthwise
        b.batchnorm();
        b.activation(LayerKind::ReLU6);
        b.conv(out_ch, 1, 1, 0);  // linear projection
        b.batchnorm();
        if (stride == 1 && out_ch == ch) b.residual(entry);
        ch = out_ch;
      }
      break;
    }
  }

  const int head = b.pooling_head();
  ModelGraph m = b.finish();

  if (cfg.pooling == PoolKind::NetVLAD) {
    // Codes start as seeded nonnegative noise in feature space; they can be
    // refit from calibration features with fit_netvlad_codes.
    Rng code_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    Tensor codes({cfg.netvlad_codes, b.channels()}, DType::F32);
    for (float& v : codes.f32()) v = code_rng.uniform_f(0.0f, 1.0f);
    m.set_weight(head, "codes", std::move(codes));
    m.layers[head].pooling().codes = cfg.netvlad_codes;
  }

  const int pooled = b.pooled_dim();
  if (pooled != cfg.descriptor_dim) {
    require(cfg.auto_projection,
            "build: pooled dim " + std::to_string(pooled) + " incompatible with descriptor dim " +
                std::to_string(cfg.descriptor_dim) + " and projection disabled");
    LayerSpec proj;
    proj.kind = LayerKind::Linear;
    proj.attrs = LinearAttrs{pooled, cfg.descriptor_dim};
    m.layers.push_back(std::move(proj));
    const int idx = static_cast<int>(m.layers.size()) - 1;
    Rng proj_rng(cfg.seed ^ 0xD1B54A32D192ED03ull);
    const float k = 1.0f / std::sqrt(static_cast<float>(pooled));
    Tensor w({cfg.descriptor_dim, pooled}, DType::F32);
    for (float& v : w.f32()) v = proj_rng.uniform_f(-k, k);
    m.set_weight(idx, "weight", std::move(w));
    m.set_weight(idx, "bias", Tensor({cfg.descriptor_dim}, DType::F32));
  }

  validate_graph(m);
  return m;
}

namespace {

Tensor slice_sample(const Tensor& batch, int64_t index) {
  const int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out({c, h, w}, DType::F32);
  std::memcpy(out.raw().data(), batch.raw().data() + index * out.byte_size(), out.byte_size());
  return out;
}

Tensor run_conv(const ModelGraph& m, int idx, const Tensor& input) {
  const LayerSpec& layer = m.layers[idx];
  const ConvAttrs& a = layer.conv();
  const Conv2dAttrs attrs{a.stride, a.pad, a.groups};
  const Tensor& w = m.weight(idx, "weight");
  const auto bias = m.weight(idx, "bias").f32();
  switch (layer.quant.bits) {
    case 32:
      return conv2d_f32(input, w, bias, attrs);
    case 16: {
      const Tensor wf = cast_f32(w);
      return conv2d_f32(f16_bounce(input), wf, bias, attrs);
    }
    case 8:
    case 4: {
      const Tensor xq = quantize_activation(input, layer.quant.act_scale);
      return qconv2d_int(xq, layer.quant.act_scale, w, layer.quant.weight_scales, bias, attrs);
    }
    default:
      throw std::runtime_error("conv layer with unsupported precision " +
                               std::to_string(layer.quant.bits));
  }
}

Tensor run_linear(const ModelGraph& m, int idx, const Tensor& input) {
  const LayerSpec& layer = m.layers[idx];
  const Tensor& w = m.weight(idx, "weight");
  const auto bias = m.weight(idx, "bias").f32();
  switch (layer.quant.bits) {
    case 32:
      return linear_f32(input, w, bias);
    case 16:
      return linear_f32(f16_bounce(input), cast_f32(w), bias);
    case 8:
    case 4: {
      const Tensor xq = quantize_activation(input, layer.quant.act_scale);
      return qlinear_int(xq, layer.quant.act_scale, w, layer.quant.weight_scales, bias);
    }
    default:
      throw std::runtime_error("linear layer with unsupported precision " +
                               std::to_string(layer.quant.bits));
  }
}

Tensor run_pooling(const ModelGraph& m, int idx, const Tensor& features_in) {
  const PoolingHeadAttrs& attrs = m.layers[idx].pooling();
  Tensor features;
  const Tensor* src = &features_in;
  if (attrs.input_bits == 16) {
    features = f16_bounce(features_in);
    src = &features;
  } else if (attrs.input_bits == 8) {
    const Tensor q = quantize_activation(features_in, attrs.input_scale);
    features = Tensor(features_in.shape(), DType::F32);
    auto qs = q.i8();
    auto dst = features.f32();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = attrs.input_scale * qs[i];
    src = &features;
  }

  const int64_t n = src->dim(0);
  std::vector<std::vector<float>> rows(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const Tensor sample = slice_sample(*src, i);
    switch (attrs.kind) {
      case PoolKind::SPoC:
        rows[i] = spoc(sample);
        break;
      case PoolKind::MAC:
        rows[i] = mac(sample);
        break;
      case PoolKind::GeM:
        rows[i] = gem(sample, m.weight(idx, "p").f32());
        break;
      case PoolKind::NetVLAD:
        rows[i] = netvlad_pool(feature_locals(sample), m.weight(idx, "codes"));
        break;
    }
  }
  const int64_t dim = static_cast<int64_t>(rows.at(0).size());
  Tensor out({n, dim}, DType::F32);
  auto dst = out.f32();
  for (int64_t i = 0; i < n; ++i) {
    std::copy(rows[i].begin(), rows[i].end(), dst.begin() + i * dim);
  }
  return out;
}

}  // namespace

Tensor forward(const ModelGraph& m, const Tensor& batch, const ActivationObserver& observer) {
  require(batch.rank() == 4, "forward: batch must be NCHW, got " + batch.shape_str());
  require(batch.dim(1) == m.input_shape.at(0) && batch.dim(2) == m.input_shape.at(1) &&
              batch.dim(3) == m.input_shape.at(2),
          "forward: batch shape " + batch.shape_str() + " does not match model input " +
              shape_to_string(m.input_shape));

  std::vector<Tensor> outputs(m.layers.size());
  const Tensor* current = &batch;
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerSpec& layer = m.layers[i];
    Tensor out;
    switch (layer.kind) {
      case LayerKind::Conv:
      case LayerKind::DepthwiseConv:
        if (observer) observer(i, *current);
        out = run_conv(m, i, *current);
        break;
      case LayerKind::BatchNorm:
        out = batchnorm_f32(*current, m.weight(i, "mean").f32(), m.weight(i, "var").f32(),
                            m.weight(i, "scale").f32(), m.weight(i, "shift").f32(),
                            layer.batchnorm().eps);
        break;
      case LayerKind::ReLU:
        out = relu(*current);
        break;
      case LayerKind::ReLU6:
        out = relu6(*current);
        break;
      case LayerKind::ResidualAdd:
        out = add(*current, outputs.at(layer.residual().source));
        break;
      case LayerKind::Linear:
        if (observer) observer(i, *current);
        out = run_linear(m, i, *current);
        break;
      case LayerKind::PoolingHead:
        if (observer) observer(i, *current);
        out = run_pooling(m, i, *current);
        break;
    }
    outputs[i] = std::move(out);
    current = &outputs[i];
  }

  Tensor result = std::move(outputs.back());
  require(result.rank() == 2 && result.dim(1) == m.descriptor_dim,
          "forward: output dim " + result.shape_str() + " does not match descriptor dim " +
              std::to_string(m.descriptor_dim));
  l2_normalize_rows(result);
  return result;
}

Tensor forward(const ModelGraph& m, const Tensor& batch) {
  return forward(m, batch, ActivationObserver());
}

ModelGraph fuse_conv_bn(const ModelGraph& m) {
  ModelGraph fused;
  fused.name = m.name;
  fused.input_shape = m.input_shape;
  fused.descriptor_dim = m.descriptor_dim;

  std::vector<int> remap(m.layers.size(), -1);
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerSpec& layer = m.layers[i];
    if (layer.kind == LayerKind::BatchNorm) {
      throw std::invalid_argument("fuse: batchnorm at layer " + std::to_string(i) +
                                  " without preceding convolution");
    }

    const int new_idx = static_cast<int>(fused.layers.size());
    LayerSpec copy = layer;
    if (copy.kind == LayerKind::ResidualAdd) {
      copy.attrs = ResidualAddAttrs{remap.at(copy.residual().source)};
    }
    fused.layers.push_back(std::move(copy));
    remap[i] = new_idx;

    // carry weights over under the new index
    for (const char* role : {"weight", "bias", "p", "codes"}) {
      if (m.has_weight(i, role)) fused.set_weight(new_idx, role, m.weight(i, role));
    }

    const bool is_conv =
        layer.kind == LayerKind::Conv || layer.kind == LayerKind::DepthwiseConv;
    if (is_conv && i + 1 < static_cast<int>(m.layers.size()) &&
        m.layers[i + 1].kind == LayerKind::BatchNorm) {
      const int bn = i + 1;
      const BatchNormAttrs& attrs = m.layers[bn].batchnorm();
      auto mean = m.weight(bn, "mean").f32();
      auto var = m.weight(bn, "var").f32();
      auto scale = m.weight(bn, "scale").f32();
      auto shift = m.weight(bn, "shift").f32();

      Tensor& w = fused.weight(new_idx, "weight");
      Tensor& b = fused.weight(new_idx, "bias");
      auto wsp = w.f32();
      auto bsp = b.f32();
      const int64_t cout = w.dim(0);
      const int64_t per_channel = w.elem_count() / cout;
      for (int64_t c = 0; c < cout; ++c) {
        const double factor =
            static_cast<double>(scale[c]) /
            std::sqrt(static_cast<double>(var[c]) + static_cast<double>(attrs.eps));
        for (int64_t k = 0; k < per_channel; ++k) {
          wsp[c * per_channel + k] = static_cast<float>(factor * wsp[c * per_channel + k]);
        }
        bsp[c] = static_cast<float>(static_cast<double>(shift[c]) +
                                    factor * (static_cast<double>(bsp[c]) -
                                              static_cast<double>(mean[c])));
      }
      // BN output equals the fused conv output, so skip edges into the BN
      // land on the fused conv. A skip into the bare conv would change
      // meaning and is rejected.
      remap[bn] = new_idx;
      for (int j = bn + 1; j < static_cast<int>(m.layers.size()); ++j) {
        if (m.layers[j].kind == LayerKind::ResidualAdd && m.layers[j].residual().source == i) {
          throw std::invalid_argument(
              "fuse: residual source " + std::to_string(i) +
              " reads the convolution output between conv and its batchnorm");
        }
      }
      ++i;  // consume the BN
    }
  }
  return fused;
}

}  // namespace qvpr
