#include <doctest.h>

#include <filesystem>

#include "qvpr/rng.hpp"
#include "qvpr/tensor.hpp"
#include "qvpr/tensor_io.hpp"
#include "test_util.hpp"

using namespace qvpr;

TEST_CASE("payload sizes per dtype") {
  CHECK(Tensor::payload_bytes({2, 3}, DType::F32) == 24);
  CHECK(Tensor::payload_bytes({2, 3}, DType::F16) == 12);
  CHECK(Tensor::payload_bytes({2, 3}, DType::I8) == 6);
  CHECK(Tensor::payload_bytes({2, 3}, DType::I32) == 24);
  // i4: two elements per byte, rows padded to whole bytes
  CHECK(Tensor::payload_bytes({2, 3}, DType::I4Packed) == 4);
  CHECK(Tensor::payload_bytes({2, 4}, DType::I4Packed) == 4);
  CHECK(Tensor::payload_bytes({5}, DType::I4Packed) == 3);
}

TEST_CASE("dtype info") {
  CHECK(dtype_info(DType::F16).bits == 16);
  CHECK(dtype_info(DType::F16).max == 65504.0f);
  CHECK(dtype_info(DType::I8).min == -127.0f);
  CHECK(dtype_info(DType::I8).max == 127.0f);
  CHECK(dtype_info(DType::I4Packed).min == -7.0f);
  CHECK(dtype_info(DType::I4Packed).max == 7.0f);
  CHECK(dtype_info(DType::F32).is_float);
  CHECK_FALSE(dtype_info(DType::I32).is_float);
}

TEST_CASE("i4 packing round trip, low nibble first") {
  Tensor t({3, 5}, DType::I4Packed);
  Rng rng(11);
  std::vector<int8_t> values;
  for (int64_t i = 0; i < t.elem_count(); ++i) {
    values.push_back(static_cast<int8_t>(rng.uniform_int(15) - 7));
    t.i4_set(i, values.back());
  }
  for (int64_t i = 0; i < t.elem_count(); ++i) {
    CHECK(t.i4_get(i) == values[static_cast<size_t>(i)]);
  }
  // element 0 sits in the low nibble of byte 0
  Tensor probe({1, 2}, DType::I4Packed);
  probe.i4_set(0, 3);
  probe.i4_set(1, -2);
  CHECK(probe.raw()[0] == ((0x0E << 4) | 0x03));
}

TEST_CASE("typed access rejects the wrong dtype") {
  Tensor t({4}, DType::I8);
  CHECK_THROWS_WITH_AS((void)t.f32(), doctest::Contains("f32"), std::invalid_argument);
}

TEST_CASE("qtns round trip") {
  Rng rng(3);
  const Tensor t = test::random_tensor({2, 3, 4}, rng);
  const auto bytes = serialize_tensor(t);
  const Tensor back = deserialize_tensor(bytes);
  CHECK(back == t);
  // twice through the file layer
  const auto dir = std::filesystem::temp_directory_path() / "qvpr_test_tensor";
  std::filesystem::create_directories(dir);
  save_tensor(t, dir / "t.qtns");
  CHECK(load_tensor(dir / "t.qtns") == t);
}

TEST_CASE("qtns container diagnostics") {
  Rng rng(4);
  auto bytes = serialize_tensor(test::random_tensor({4, 4}, rng));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS((void)deserialize_tensor(bad_magic), doctest::Contains("magic"),
                       std::runtime_error);

  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS((void)deserialize_tensor(bad_version), doctest::Contains("version"),
                       std::runtime_error);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  CHECK_THROWS_WITH_AS((void)deserialize_tensor(truncated), doctest::Contains("truncated"),
                       std::runtime_error);
}
