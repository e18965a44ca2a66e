#include <doctest.h>

#include <cmath>

#include "qvpr/kernels.hpp"
#include "qvpr/rng.hpp"
#include "test_util.hpp"

using namespace qvpr;
using test::max_abs_diff;
using test::naive_conv2d;
using test::random_tensor;

TEST_CASE("conv2d 1x1 kernel acts as scalar scaling") {
  const Tensor input = Tensor::from_f32({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor weight = Tensor::from_f32({1, 1, 1, 1}, {2});
  const std::vector<float> bias{0};
  const Tensor out = conv2d_f32(input, weight, bias, {1, 0, 1});
  const std::vector<float> expect{2, 4, 6, 8};
  CHECK(max_abs_diff(out.f32(), expect) == 0.0f);
}

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
  const Tensor input = Tensor::from_f32({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  const Tensor weight = Tensor::from_f32({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  const Tensor out = conv2d_f32(input, weight, {}, {1, 0, 1});
  CHECK(out.shape() == std::vector<int64_t>{1, 1, 1, 1});
  CHECK(out.f32()[0] == 9.0f);
}

TEST_CASE("conv2d matches the nested-loop oracle over 200 seeded cases") {
  Rng rng(1234);
  float worst = 0.0f;
  for (int trial = 0; trial < 200; ++trial) {
    const int cin = 1 + static_cast<int>(rng.uniform_int(6));
    const int cout = 1 + static_cast<int>(rng.uniform_int(6));
    const int k = 1 + 2 * static_cast<int>(rng.uniform_int(2));  // 1 or 3
    const int h = k + static_cast<int>(rng.uniform_int(6));
    const int w = k + static_cast<int>(rng.uniform_int(6));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    const Tensor input = random_tensor({2, cin, h, w}, rng);
    const Tensor weight = random_tensor({cout, cin, k, k}, rng);
    std::vector<float> bias(static_cast<size_t>(cout));
    for (float& b : bias) b = rng.uniform_f(-0.5f, 0.5f);

    const Tensor got = conv2d_f32(input, weight, bias, {stride, pad, 1});
    const Tensor expect = naive_conv2d(input, weight, bias, stride, pad, 1);
    worst = std::max(worst, max_abs_diff(got.f32(), expect.f32()));
  }
  CHECK(worst < 1e-5f);
}

TEST_CASE("depthwise conv equals the per-channel correlation oracle") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 2 + static_cast<int>(rng.uniform_int(6));
    const Tensor input = random_tensor({1, c, 6, 6}, rng);
    const Tensor weight = random_tensor({c, 1, 3, 3}, rng);
    const Tensor got = conv2d_f32(input, weight, {}, {1, 1, c});

    // oracle: each channel correlated with its own 2-d kernel
    const Tensor expect = naive_conv2d(input, weight, {}, 1, 1, c);
    CHECK(max_abs_diff(got.f32(), expect.f32()) < 1e-6f);
  }
}

TEST_CASE("grouped conv matches the oracle") {
  Rng rng(77);
  const Tensor input = random_tensor({1, 8, 5, 5}, rng);
  const Tensor weight = random_tensor({4, 4, 3, 3}, rng);  // groups = 2
  const Tensor got = conv2d_f32(input, weight, {}, {1, 1, 2});
  const Tensor expect = naive_conv2d(input, weight, {}, 1, 1, 2);
  CHECK(max_abs_diff(got.f32(), expect.f32()) < 1e-6f);
}

TEST_CASE("conv2d shape diagnostics name the offending dimension") {
  const Tensor input = Tensor::from_f32({1, 3, 4, 4}, std::vector<float>(48, 0.0f));
  const Tensor weight = Tensor::from_f32({2, 5, 3, 3}, std::vector<float>(90, 0.0f));
  CHECK_THROWS_WITH_AS((void)conv2d_f32(input, weight, {}, {1, 1, 1}),
                       doctest::Contains("channel"), std::invalid_argument);
  const Tensor wrong_groups = Tensor::from_f32({2, 3, 3, 3}, std::vector<float>(54, 0.0f));
  CHECK_THROWS_WITH_AS((void)conv2d_f32(input, wrong_groups, {}, {1, 1, 2}),
                       doctest::Contains("groups"), std::invalid_argument);
}

TEST_CASE("batchnorm identity parameters pass input through") {
  Rng rng(5);
  const Tensor x = random_tensor({1, 3, 4, 4}, rng);
  const float eps = 1e-5f;
  const std::vector<float> mean(3, 0.0f), var(3, 1.0f - eps), scale(3, 1.0f), shift(3, 0.0f);
  const Tensor y = batchnorm_f32(x, mean, var, scale, shift, eps);
  CHECK(max_abs_diff(x.f32(), y.f32()) < 1e-6f);
}

TEST_CASE("batchnorm scalar evaluation") {
  const Tensor x = Tensor::from_f32({1, 1, 1, 1}, {2.0f});
  const Tensor y = batchnorm_f32(x, std::vector<float>{1.0f}, std::vector<float>{1.0f},
                                 std::vector<float>{3.0f}, std::vector<float>{0.5f}, 1e-5f);
  CHECK(y.f32()[0] == doctest::Approx(3.4999850f).epsilon(1e-6));
}

TEST_CASE("batchnorm of the mean is the shift") {
  const std::vector<float> mean{1.5f, -2.0f};
  const std::vector<float> shift{0.25f, 4.0f};
  Tensor x({1, 2, 2, 2}, DType::F32);
  auto data = x.f32();
  for (int i = 0; i < 4; ++i) data[i] = mean[0];
  for (int i = 4; i < 8; ++i) data[i] = mean[1];
  const Tensor y = batchnorm_f32(x, mean, std::vector<float>{0.7f, 0.3f},
                                 std::vector<float>{2.0f, 3.0f}, shift, 1e-5f);
  auto out = y.f32();
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(shift[0]));
  for (int i = 4; i < 8; ++i) CHECK(out[i] == doctest::Approx(shift[1]));
}

TEST_CASE("batchnorm rejects negative variance") {
  const Tensor x = Tensor::from_f32({1, 1, 1, 1}, {0.0f});
  CHECK_THROWS_WITH_AS(
      (void)batchnorm_f32(x, std::vector<float>{0.0f}, std::vector<float>{-1.0f},
                          std::vector<float>{1.0f}, std::vector<float>{0.0f}, 1e-5f),
      doctest::Contains("negative variance"), std::invalid_argument);
}

TEST_CASE("linear matches a naive product") {
  Rng rng(8);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor w = random_tensor({4, 5}, rng);
  std::vector<float> bias{0.1f, -0.2f, 0.3f, 0.0f};
  const Tensor y = linear_f32(x, w, bias);
  for (int64_t r = 0; r < 3; ++r) {
    for (int64_t o = 0; o < 4; ++o) {
      double acc = bias[static_cast<size_t>(o)];
      for (int64_t k = 0; k < 5; ++k) acc += x.f32()[r * 5 + k] * w.f32()[o * 5 + k];
      CHECK(y.f32()[r * 4 + o] == doctest::Approx(acc).epsilon(1e-6));
    }
  }
}

TEST_CASE("l2 normalization and the zero-row rule") {
  Tensor x = Tensor::from_f32({2, 2}, {3.0f, 4.0f, 0.0f, 0.0f});
  l2_normalize_rows(x);
  CHECK(x.f32()[0] == doctest::Approx(0.6f));
  CHECK(x.f32()[1] == doctest::Approx(0.8f));
  CHECK(x.f32()[2] == 0.0f);
  CHECK(x.f32()[3] == 0.0f);
}

TEST_CASE("relu6 clamps both sides") {
  const Tensor x = Tensor::from_f32({1, 1, 1, 4}, {-1.0f, 0.5f, 6.0f, 9.0f});
  const Tensor y = relu6(x);
  CHECK(y.f32()[0] == 0.0f);
  CHECK(y.f32()[1] == 0.5f);
  CHECK(y.f32()[2] == 6.0f);
  CHECK(y.f32()[3] == 6.0f);
}
