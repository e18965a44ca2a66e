#include <doctest.h>

#include <cmath>

#include "qvpr/pooling.hpp"
#include "qvpr/rng.hpp"
#include "test_util.hpp"

using namespace qvpr;
using test::random_tensor;

TEST_CASE("spoc is the spatial mean") {
  const Tensor f = Tensor::from_f32({1, 2, 2}, {1, 2, 3, 4});
  CHECK(spoc(f)[0] == doctest::Approx(2.5));

  const Tensor c = Tensor::from_f32({1, 3, 3}, std::vector<float>(9, 0.7f));
  CHECK(spoc(c)[0] == doctest::Approx(0.7f));

  Rng rng(21);
  const Tensor r = random_tensor({4, 5, 7}, rng);
  const auto got = spoc(r);
  for (int ch = 0; ch < 4; ++ch) {
    double sum = 0.0;
    for (int i = 0; i < 35; ++i) sum += r.f32()[ch * 35 + i];
    CHECK(got[ch] == doctest::Approx(sum / 35.0).epsilon(1e-6));
  }
}

TEST_CASE("mac is the spatial max and keeps the sign") {
  const Tensor f = Tensor::from_f32({1, 2, 2}, {1, 2, 3, 4});
  CHECK(mac(f)[0] == 4.0f);

  const Tensor neg = Tensor::from_f32({1, 2, 2}, {-5, -2, -9, -3});
  CHECK(mac(neg)[0] == -2.0f);

  Rng rng(22);
  const Tensor r = random_tensor({3, 4, 4}, rng);
  const auto got = mac(r);
  for (int ch = 0; ch < 3; ++ch) {
    float best = -1e30f;
    for (int i = 0; i < 16; ++i) best = std::max(best, r.f32()[ch * 16 + i]);
    CHECK(got[ch] == best);
  }
}

TEST_CASE("gem interpolates between spoc and mac") {
  const Tensor f = Tensor::from_f32({1, 2, 2}, {1, 2, 3, 4});
  CHECK(gem(f, 1.0f)[0] == doctest::Approx(2.5).epsilon(1e-6));
  CHECK(gem(f, 3.0f)[0] == doctest::Approx(std::cbrt(25.0)).epsilon(1e-6));
  // p=100 sits within 1.5% of the max
  CHECK(gem(f, 100.0f)[0] == doctest::Approx(3.945).epsilon(0.001));
  CHECK(std::fabs(gem(f, 100.0f)[0] - mac(f)[0]) / mac(f)[0] < 0.015);
}

TEST_CASE("gem properties: p=1 equals spoc, monotone in p, bounded by mac") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor f = random_tensor({5, 4, 6}, rng, 0.0f, 2.0f);  // nonnegative features
    const auto s = spoc(f);
    const auto g1 = gem(f, 1.0f);
    const auto g3 = gem(f, 3.0f);
    const auto g8 = gem(f, 8.0f);
    const auto m = mac(f);
    for (size_t c = 0; c < s.size(); ++c) {
      CHECK(g1[c] == doctest::Approx(s[c]).epsilon(1e-6));
      CHECK(g1[c] <= g3[c] + 1e-6f);
      CHECK(g3[c] <= g8[c] + 1e-6f);
      CHECK(g8[c] <= m[c] + 1e-6f);
    }
  }
}

TEST_CASE("gem rejects p below 1") {
  const Tensor f = Tensor::from_f32({1, 1, 1}, {1.0f});
  CHECK_THROWS_AS((void)gem(f, 0.5f), std::invalid_argument);
}

TEST_CASE("gem accepts a per-channel exponent vector") {
  const Tensor f = Tensor::from_f32({2, 1, 2}, {1, 3, 1, 3});
  const std::vector<float> p{1.0f, 100.0f};
  const auto v = gem(f, p);
  CHECK(v[0] == doctest::Approx(2.0).epsilon(1e-5));
  CHECK(v[1] > 2.9f);  // approaches the max of 3
}

TEST_CASE("netvlad assignment is a softmax over code inner products") {
  const Tensor codes = Tensor::from_f32({2, 2}, {1, 0, 0, 1});

  // equidistant descriptor splits evenly
  const std::vector<float> mid{0.5f, 0.5f};
  const auto even = netvlad_assign(mid, codes);
  CHECK(even[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(even[1] == doctest::Approx(0.5).epsilon(1e-6));

  const std::vector<float> x{1.0f, 0.0f};
  const auto a = netvlad_assign(x, codes);
  const double e = std::exp(1.0);
  CHECK(a[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-6));
  CHECK(a[1] == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-6));

  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor c = random_tensor({6, 4}, rng);
    std::vector<float> q(4);
    for (float& v : q) v = rng.uniform_f(-2.0f, 2.0f);
    const auto w = netvlad_assign(q, c);
    double sum = 0.0;
    for (float v : w) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("netvlad pooling aggregates weighted residuals") {
  // a single local equal to the only code gives a zero residual
  const Tensor one_code = Tensor::from_f32({1, 2}, {0.3f, -0.4f});
  const Tensor locals = Tensor::from_f32({1, 2}, {0.3f, -0.4f});
  const auto raw = netvlad_pool(locals, one_code, /*normalize=*/false);
  CHECK(raw[0] == doctest::Approx(0.0));
  CHECK(raw[1] == doctest::Approx(0.0));

  // worked two-code case from the assignment test
  const Tensor codes = Tensor::from_f32({2, 2}, {1, 0, 0, 1});
  const Tensor x = Tensor::from_f32({1, 2}, {1.0f, 0.0f});
  const auto v = netvlad_pool(x, codes, /*normalize=*/false);
  const double a1 = 1.0 / (std::exp(1.0) + 1.0);
  CHECK(v[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(v[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(v[2] == doctest::Approx(a1).epsilon(1e-4));
  CHECK(v[3] == doctest::Approx(-a1).epsilon(1e-4));
}

TEST_CASE("netvlad pooling matches a per-local accumulation oracle") {
  Rng rng(32);
  const Tensor codes = random_tensor({4, 3}, rng);
  const Tensor locals = random_tensor({9, 3}, rng);
  const auto got = netvlad_pool(locals, codes, /*normalize=*/false);

  std::vector<double> expect(12, 0.0);
  for (int n = 0; n < 9; ++n) {
    std::vector<float> x(locals.f32().begin() + n * 3, locals.f32().begin() + n * 3 + 3);
    const auto a = netvlad_assign(x, codes);
    for (int k = 0; k < 4; ++k) {
      for (int j = 0; j < 3; ++j) {
        expect[k * 3 + j] += a[k] * (x[j] - codes.f32()[k * 3 + j]);
      }
    }
  }
  for (int i = 0; i < 12; ++i) {
    CHECK(got[static_cast<size_t>(i)] == doctest::Approx(expect[i]).epsilon(1e-6));
  }
}

TEST_CASE("netvlad output dimension is K*d and the normalized form is unit length") {
  Rng rng(33);
  const Tensor codes = random_tensor({8, 5}, rng);
  const Tensor locals = random_tensor({16, 5}, rng);
  const auto v = netvlad_pool(locals, codes);
  CHECK(v.size() == 40);
  double norm = 0.0;
  for (float x : v) norm += static_cast<double>(x) * x;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("project_normalize") {
  // identity projection keeps a unit vector
  const Tensor eye = Tensor::from_f32({2, 2}, {1, 0, 0, 1});
  const std::vector<float> unit{0.6f, 0.8f};
  const auto kept = project_normalize(unit, &eye);
  CHECK(kept[0] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(kept[1] == doctest::Approx(0.8).epsilon(1e-6));

  // 3-4-5 without projection
  const std::vector<float> v{3.0f, 4.0f};
  const auto n = project_normalize(v, nullptr);
  CHECK(n[0] == doctest::Approx(0.6));
  CHECK(n[1] == doctest::Approx(0.8));

  // random projection emits a unit vector
  Rng rng(34);
  const Tensor proj = random_tensor({6, 9}, rng);
  std::vector<float> in(9);
  for (float& x : in) x = rng.uniform_f(-2.0f, 2.0f);
  const auto out = project_normalize(in, &proj);
  double norm = 0.0;
  for (float x : out) norm += static_cast<double>(x) * x;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));

  // zero passes through as zero
  const std::vector<float> zero(4, 0.0f);
  for (float x : project_normalize(zero, nullptr)) CHECK(x == 0.0f);

  CHECK_THROWS_WITH_AS((void)project_normalize(v, &proj), doctest::Contains("incompatible"),
                       std::invalid_argument);
}

TEST_CASE("kmeans codes are deterministic and dimensioned [K,d]") {
  Rng rng_a(40);
  Rng rng_b(40);
  Rng data_rng(41);
  const Tensor samples = random_tensor({50, 6}, data_rng);
  const Tensor a = kmeans_codes(samples, 4, 10, rng_a);
  const Tensor b = kmeans_codes(samples, 4, 10, rng_b);
  CHECK(a == b);
  CHECK(a.shape() == std::vector<int64_t>{4, 6});
}
