#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "qvpr/model.hpp"
#include "qvpr/model_io.hpp"
#include "qvpr/quant.hpp"
#include "test_util.hpp"

using namespace qvpr;
using test::max_abs_diff;
using test::random_tensor;

namespace {

BackboneConfig small_config(Family family, int depth, uint64_t seed) {
  BackboneConfig cfg;
  cfg.family = family;
  cfg.depth = depth;
  cfg.width = 0.5f;
  cfg.input_shape = {3, 16, 16};
  cfg.descriptor_dim = 32;
  cfg.pooling = PoolKind::GeM;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("build is deterministic per seed") {
  const ModelGraph a = build_backbone(small_config(Family::MiniResNet, 2, 7));
  const ModelGraph b = build_backbone(small_config(Family::MiniResNet, 2, 7));
  CHECK(serialize_model(a) == serialize_model(b));
  const ModelGraph c = build_backbone(small_config(Family::MiniResNet, 2, 8));
  CHECK(serialize_model(a) != serialize_model(c));
}

TEST_CASE("mini-mobilenet stride-1 block carries a residual add") {
  const ModelGraph m = build_backbone(small_config(Family::MiniMobileNet, 1, 3));
  bool found = false;
  for (const LayerSpec& layer : m.layers) {
    if (layer.kind == LayerKind::ResidualAdd) found = true;
  }
  CHECK(found);
}

TEST_CASE("mini-vgg parameter count matches the emitted layer specs") {
  BackboneConfig cfg = small_config(Family::MiniVGG, 3, 5);
  cfg.width = 1.0f;
  cfg.input_shape = {3, 32, 32};
  cfg.descriptor_dim = 64;
  const ModelGraph m = build_backbone(cfg);

  int64_t expect = 0;
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    const LayerSpec& layer = m.layers[i];
    if (layer.kind == LayerKind::Conv || layer.kind == LayerKind::DepthwiseConv) {
      const ConvAttrs& a = layer.conv();
      expect += static_cast<int64_t>(a.out_channels) * (a.in_channels / a.groups) * a.kh * a.kw +
                a.out_channels;
    } else if (layer.kind == LayerKind::Linear) {
      expect += static_cast<int64_t>(layer.linear().out_dim) * layer.linear().in_dim +
                layer.linear().out_dim;
    } else if (layer.kind == LayerKind::PoolingHead) {
      expect += m.has_weight(i, "p") ? m.weight(i, "p").elem_count() : 0;
      expect += m.has_weight(i, "codes") ? m.weight(i, "codes").elem_count() : 0;
    }
  }
  // hand check: convs 3->16, 16->32, 32->64 plus the 64->64 projection
  CHECK(expect == (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + 1 +
                      (64 * 64 + 64));
  CHECK(count_parameters(m) == expect);
}

TEST_CASE("projection mismatch is rejected when auto projection is off") {
  BackboneConfig cfg = small_config(Family::MiniVGG, 2, 1);
  cfg.auto_projection = false;
  cfg.descriptor_dim = 999;
  CHECK_THROWS_WITH_AS((void)build_backbone(cfg), doctest::Contains("incompatible"),
                       std::invalid_argument);
}

TEST_CASE("unknown family name is rejected") {
  CHECK_THROWS_AS((void)family_from_name("resnet-101"), std::invalid_argument);
}

TEST_CASE("forward produces unit-norm descriptor rows") {
  for (Family family : {Family::MiniVGG, Family::MiniResNet, Family::MiniMobileNet}) {
    const ModelGraph m = build_backbone(small_config(family, 2, 11));
    Rng rng(50);
    const Tensor batch = random_tensor({3, 3, 16, 16}, rng);
    const Tensor out = forward(m, batch);
    CHECK(out.shape() == std::vector<int64_t>{3, 32});
    for (int64_t r = 0; r < 3; ++r) {
      double norm = 0.0;
      for (int64_t j = 0; j < 32; ++j) {
        norm += static_cast<double>(out.f32()[r * 32 + j]) * out.f32()[r * 32 + j];
      }
      CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("zero input through a bias-free mini-vgg with spoc stays zero") {
  BackboneConfig cfg = small_config(Family::MiniVGG, 2, 13);
  cfg.pooling = PoolKind::SPoC;
  ModelGraph m = build_backbone(cfg);
  for (auto& [key, tensor] : m.weights) {
    if (key.find(".bias") != std::string::npos) {
      for (float& v : tensor.f32()) v = 0.0f;
    }
  }
  const Tensor zero({1, 3, 16, 16}, DType::F32);
  const Tensor out = forward(m, zero);
  for (float v : out.f32()) CHECK(v == 0.0f);
}

TEST_CASE("forward rejects mismatched batch shapes") {
  const ModelGraph m = build_backbone(small_config(Family::MiniVGG, 2, 1));
  const Tensor bad({1, 3, 8, 8}, DType::F32);
  CHECK_THROWS_WITH_AS((void)forward(m, bad), doctest::Contains("does not match"),
                       std::invalid_argument);
}

TEST_CASE("fusion: identity batchnorm keeps conv weights") {
  ModelGraph m;
  m.name = "pair";
  m.input_shape = {1, 4, 4};
  m.descriptor_dim = 2;
  LayerSpec conv;
  conv.kind = LayerKind::Conv;
  conv.attrs = ConvAttrs{1, 2, 3, 3, 1, 1, 1};
  m.layers.push_back(conv);
  LayerSpec bn;
  bn.kind = LayerKind::BatchNorm;
  const float eps = 1e-5f;
  bn.attrs = BatchNormAttrs{2, eps};
  m.layers.push_back(bn);
  LayerSpec pool;
  pool.kind = LayerKind::PoolingHead;
  PoolingHeadAttrs pa;
  pa.kind = PoolKind::SPoC;
  pool.attrs = pa;
  m.layers.push_back(pool);

  Rng rng(60);
  m.set_weight(0, "weight", random_tensor({2, 1, 3, 3}, rng));
  m.set_weight(0, "bias", random_tensor({2}, rng));
  m.set_weight(1, "mean", Tensor::from_f32({2}, {0, 0}));
  m.set_weight(1, "var", Tensor::from_f32({2}, {1 - eps, 1 - eps}));
  m.set_weight(1, "scale", Tensor::from_f32({2}, {1, 1}));
  m.set_weight(1, "shift", Tensor::from_f32({2}, {0, 0}));

  const ModelGraph fused = fuse_conv_bn(m);
  CHECK(fused.layers.size() == 2);
  CHECK(max_abs_diff(fused.weight(0, "weight").f32(), m.weight(0, "weight").f32()) < 1e-6f);
  CHECK(max_abs_diff(fused.weight(0, "bias").f32(), m.weight(0, "bias").f32()) < 1e-6f);
}

TEST_CASE("fusion folds the batchnorm algebra") {
  // scale=2, var+eps=4, mean=1, shift=0, conv bias=0:
  // factor = 1, fused bias = -1
  ModelGraph m;
  m.input_shape = {1, 2, 2};
  m.descriptor_dim = 1;
  LayerSpec conv;
  conv.kind = LayerKind::Conv;
  conv.attrs = ConvAttrs{1, 1, 1, 1, 1, 0, 1};
  m.layers.push_back(conv);
  LayerSpec bn;
  bn.kind = LayerKind::BatchNorm;
  const float eps = 1e-5f;
  bn.attrs = BatchNormAttrs{1, eps};
  m.layers.push_back(bn);
  LayerSpec pool;
  pool.kind = LayerKind::PoolingHead;
  PoolingHeadAttrs pa;
  pa.kind = PoolKind::SPoC;
  pool.attrs = pa;
  m.layers.push_back(pool);

  m.set_weight(0, "weight", Tensor::from_f32({1, 1, 1, 1}, {1.5f}));
  m.set_weight(0, "bias", Tensor::from_f32({1}, {0.0f}));
  m.set_weight(1, "mean", Tensor::from_f32({1}, {1.0f}));
  m.set_weight(1, "var", Tensor::from_f32({1}, {4.0f - eps}));
  m.set_weight(1, "scale", Tensor::from_f32({1}, {2.0f}));
  m.set_weight(1, "shift", Tensor::from_f32({1}, {0.0f}));

  const ModelGraph fused = fuse_conv_bn(m);
  CHECK(fused.weight(0, "weight").f32()[0] == doctest::Approx(1.5f).epsilon(1e-6));
  CHECK(fused.weight(0, "bias").f32()[0] == doctest::Approx(-1.0f).epsilon(1e-6));
}

TEST_CASE("fusion preserves forward output over 100 seeded graphs") {
  float worst = 0.0f;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const Family family = seed % 2 ? Family::MiniResNet : Family::MiniMobileNet;
    const ModelGraph m = build_backbone(small_config(family, 2, seed));
    const ModelGraph fused = fuse_conv_bn(m);
    for (const LayerSpec& layer : fused.layers) {
      CHECK(layer.kind != LayerKind::BatchNorm);
    }
    Rng rng(seed + 1000);
    const Tensor batch = random_tensor({1, 3, 16, 16}, rng);
    const Tensor a = forward(m, batch);
    const Tensor b = forward(fused, batch);
    worst = std::max(worst, max_abs_diff(a.f32(), b.f32()));
  }
  CHECK(worst < 1e-4f);
}

TEST_CASE("fusion removes 4C parameters per folded batchnorm") {
  const ModelGraph m = build_backbone(small_config(Family::MiniResNet, 2, 17));
  int64_t bn_params = 0;
  for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
    if (m.layers[i].kind == LayerKind::BatchNorm) {
      bn_params += 4 * m.layers[i].batchnorm().channels;
    }
  }
  const ModelGraph fused = fuse_conv_bn(m);
  CHECK(count_parameters(fused) == count_parameters(m) - bn_params);
}

TEST_CASE("fusion rejects a batchnorm with no preceding conv") {
  ModelGraph m;
  m.input_shape = {1, 2, 2};
  m.descriptor_dim = 1;
  LayerSpec bn;
  bn.kind = LayerKind::BatchNorm;
  bn.attrs = BatchNormAttrs{1, 1e-5f};
  m.layers.push_back(bn);
  m.set_weight(0, "mean", Tensor::from_f32({1}, {0.0f}));
  m.set_weight(0, "var", Tensor::from_f32({1}, {1.0f}));
  m.set_weight(0, "scale", Tensor::from_f32({1}, {1.0f}));
  m.set_weight(0, "shift", Tensor::from_f32({1}, {0.0f}));
  CHECK_THROWS_WITH_AS((void)fuse_conv_bn(m), doctest::Contains("without preceding"),
                       std::invalid_argument);
}

TEST_CASE("model container round trip is bit-identical") {
  for (Family family : {Family::MiniVGG, Family::MiniResNet, Family::MiniMobileNet}) {
    const ModelGraph m = build_backbone(small_config(family, 2, 23));
    const auto bytes = serialize_model(m);
    const ModelGraph back = deserialize_model(bytes);
    CHECK(serialize_model(back) == bytes);
  }
}

TEST_CASE("quantized models round trip through the container") {
  const ModelGraph m = fuse_conv_bn(build_backbone(small_config(Family::MiniResNet, 2, 29)));
  CalibrationSample calib;
  Rng rng(71);
  for (int i = 0; i < 2; ++i) calib.inputs.push_back(random_tensor({3, 16, 16}, rng));
  PrecisionConfig config(quantizable_layers(m).size(), 8);
  config[0] = 4;
  config.back() = 16;
  const ModelGraph q = quantize_model(m, config, calib, CalibMethod::MaxAbs);

  const auto bytes = serialize_model(q);
  const ModelGraph back = deserialize_model(bytes);
  CHECK(serialize_model(back) == bytes);
  CHECK(precision_config_of(back) == config);

  Rng in_rng(72);
  const Tensor batch = random_tensor({1, 3, 16, 16}, in_rng);
  CHECK(max_abs_diff(forward(q, batch).f32(), forward(back, batch).f32()) == 0.0f);
}

TEST_CASE("f32 model file size is header plus manifest plus 4 bytes per parameter") {
  const ModelGraph m = build_backbone(small_config(Family::MiniVGG, 2, 31));
  const auto bytes = serialize_model(m);
  const int64_t params = count_parameters(m);
  // every blob is 64-byte aligned, so allow one alignment pad per blob
  int64_t blobs = 0;
  for (const auto& [key, tensor] : m.weights) {
    (void)tensor;
    ++blobs;
  }
  CHECK(static_cast<int64_t>(bytes.size()) >= params * 4);
  CHECK(static_cast<int64_t>(bytes.size()) <= params * 4 + 64 * (blobs + 2) + 4096);
}

TEST_CASE("model container diagnostics") {
  const ModelGraph m = build_backbone(small_config(Family::MiniVGG, 2, 37));
  auto bytes = serialize_model(m);

  auto bad_magic = bytes;
  bad_magic[0] = 'Z';
  CHECK_THROWS_WITH_AS((void)deserialize_model(bad_magic), doctest::Contains("magic"),
                       std::runtime_error);

  auto bad_version = bytes;
  bad_version[4] = 42;
  CHECK_THROWS_WITH_AS((void)deserialize_model(bad_version), doctest::Contains("version"),
                       std::runtime_error);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 32);
  CHECK_THROWS_WITH_AS((void)deserialize_model(truncated), doctest::Contains("truncated"),
                       std::runtime_error);
}

TEST_CASE("backbone config text parsing") {
  const std::string text =
      "# arch\n"
      "[model]\n"
      "family = mini-mobilenet\n"
      "width = 0.5\n"
      "depth = 3\n"
      "input = 3x24x24\n"
      "descriptor_dim = 48\n"
      "pooling = mac\n"
      "seed = 99\n";
  const BackboneConfig cfg = parse_backbone_config(text);
  CHECK(cfg.family == Family::MiniMobileNet);
  CHECK(cfg.width == 0.5f);
  CHECK(cfg.depth == 3);
  CHECK(cfg.input_shape == std::vector<int64_t>{3, 24, 24});
  CHECK(cfg.descriptor_dim == 48);
  CHECK(cfg.pooling == PoolKind::MAC);
  CHECK(cfg.seed == 99);
  CHECK_THROWS_WITH_AS((void)parse_backbone_config("bogus = 1\n"), doctest::Contains("unknown"),
                       std::runtime_error);
}
