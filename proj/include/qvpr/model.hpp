#pragma once

#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "qvpr/pooling.hpp"
#include "qvpr/tensor.hpp"

namespace qvpr {

enum class LayerKind : uint8_t {
  Conv = 0,
  DepthwiseConv = 1,
  BatchNorm = 2,
  ReLU = 3,
  ReLU6 = 4,
  ResidualAdd = 5,
  Linear = 6,
  PoolingHead = 7,
};

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

struct ConvAttrs {
  int in_channels = 0;
  int out_channels = 0;
  int kh = 3;
  int kw = 3;
  int stride = 1;
  int pad = 1;
  int groups = 1;
};

struct BatchNormAttrs {
  int channels = 0;
  float eps = 1e-5f;
};

struct ResidualAddAttrs {
  int source = -1;  // index of the layer whose output is added
};

struct LinearAttrs {
  int in_dim = 0;
  int out_dim = 0;
};

struct PoolingHeadAttrs {
  PoolKind kind = PoolKind::GeM;
  int codes = 0;  // K, NetVLAD only
  // Precision path of the head input, set by quantization for GeM and
  // NetVLAD heads: 32 = f32 passthrough, 16 = f16 bounce, 8 = int8 bounce.
  int input_bits = 32;
  float input_scale = 0.0f;
};

// Quantization state of a conv/linear layer. bits 32 means untouched f32
// weights; 16 means f16 weights; 8/4 mean integer weights with per-channel
// scales and a per-tensor input activation scale.
struct LayerQuant {
  int bits = 32;
  std::vector<float> weight_scales;
  float act_scale = 0.0f;
};

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::variant<std::monostate, ConvAttrs, BatchNormAttrs, ResidualAddAttrs, LinearAttrs,
               PoolingHeadAttrs>
      attrs;
  LayerQuant quant;

  const ConvAttrs& conv() const { return std::get<ConvAttrs>(attrs); }
  const BatchNormAttrs& batchnorm() const { return std::get<BatchNormAttrs>(attrs); }
  const ResidualAddAttrs& residual() const { return std::get<ResidualAddAttrs>(attrs); }
  const LinearAttrs& linear() const { return std::get<LinearAttrs>(attrs); }
  const PoolingHeadAttrs& pooling() const { return std::get<PoolingHeadAttrs>(attrs); }
  PoolingHeadAttrs& pooling() { return std::get<PoolingHeadAttrs>(attrs); }
};

std::string weight_key(int layer_index, std::string_view role);

// Ordered layer list with a named weight store. Layers form a single chain
// with residual skip edges; exactly one PoolingHead sits after the last
// convolution, optionally followed by a Linear projection. The forward
// output is a [batch, descriptor_dim] matrix of L2-normalized rows.
struct ModelGraph {
  std::string name;
  std::vector<int64_t> input_shape;  // [C, H, W]
  int descriptor_dim = 0;
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor> weights;

  bool has_weight(int layer, std::string_view role) const;
  const Tensor& weight(int layer, std::string_view role) const;
  Tensor& weight(int layer, std::string_view role);
  void set_weight(int layer, std::string_view role, Tensor t);
};

void validate_graph(const ModelGraph& m);
int64_t count_parameters(const ModelGraph& m);

// Indices of the quantizable layers (Conv, DepthwiseConv, Linear) in order.
std::vector<int> quantizable_layers(const ModelGraph& m);
int pooling_head_index(const ModelGraph& m);

enum class Family : uint8_t { MiniMobileNet = 0, MiniResNet = 1, MiniVGG = 2 };
const char* family_name(Family f);
Family family_from_name(const std::string& name);

struct BackboneConfig {
  Family family = Family::MiniVGG;
  float width = 1.0f;
  int depth = 2;
  std::vector<int64_t> input_shape{3, 32, 32};
  int descriptor_dim = 128;
  PoolKind pooling = PoolKind::GeM;
  float gem_p = 3.0f;
  int netvlad_codes = 8;
  // When set, a linear head mapping the pooled dim to descriptor_dim is
  // added whenever the two differ; when unset a mismatch is an error.
  bool auto_projection = true;
  uint64_t seed = 0;
};

// Deterministic miniature backbones. mini-vgg stacks plain 3x3 convs with
// stride-2 downsampling, mini-resnet stacks 3x3 conv pairs with residual
// adds, mini-mobilenet stacks inverted bottlenecks (1x1 expand, depthwise
// 3x3, 1x1 linear project) with a residual when stride 1 and channels
// match. Weights are uniform(-k, k) with k = 1/sqrt(fan_in).
ModelGraph build_backbone(const BackboneConfig& cfg);

using ActivationObserver = std::function<void(int layer_index, const Tensor& input)>;

// Runs a [N, C, H, W] batch through the graph, dispatching per-layer on the
// quantization state, and returns [N, descriptor_dim] L2-normalized rows.
// The observer, when given, sees the f32 input of every quantizable layer
// and of the pooling head.
Tensor forward(const ModelGraph& m, const Tensor& batch);
Tensor forward(const ModelGraph& m, const Tensor& batch, const ActivationObserver& observer);

// Folds every BatchNorm into the preceding convolution:
// W' = (scale/sqrt(var+eps)) W per output channel,
// b' = shift + (scale/sqrt(var+eps)) (b - mean).
// Returns a new graph; the input is untouched.
ModelGraph fuse_conv_bn(const ModelGraph& m);

}  // namespace qvpr
