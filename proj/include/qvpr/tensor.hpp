#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qvpr {

enum class DType : uint8_t {
  F32 = 0,
  F16 = 1,
  I8 = 2,
  I4Packed = 3,
  I32 = 4,
};

struct DTypeInfo {
  int bits;
  float min;
  float max;
  bool is_float;
};

const DTypeInfo& dtype_info(DType dt);
const char* dtype_name(DType dt);
DType dtype_from_code(uint8_t code);

// Dense n-dimensional array with a contiguous little-endian buffer.
// 4-d activations are NCHW, conv weights are [Cout, Cin/groups, Kh, Kw].
// i4packed stores two elements per byte, low nibble first, with each
// innermost row padded to a whole byte. Integer payloads are symmetric:
// i8 values lie in [-127, 127] and i4 in [-7, 7].
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, DType dtype);

  static Tensor from_f32(std::vector<int64_t> shape, std::vector<float> values);
  static size_t payload_bytes(const std::vector<int64_t>& shape, DType dtype);

  const std::vector<int64_t>& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  int64_t elem_count() const;
  size_t byte_size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  std::span<const uint8_t> raw() const { return data_; }
  std::span<uint8_t> raw() { return data_; }

  std::span<const float> f32() const;
  std::span<float> f32();
  std::span<const uint16_t> f16() const;
  std::span<uint16_t> f16();
  std::span<const int8_t> i8() const;
  std::span<int8_t> i8();
  std::span<const int32_t> i32() const;
  std::span<int32_t> i32();

  // Element access for i4packed payloads by flat logical index.
  int8_t i4_get(int64_t flat_index) const;
  void i4_set(int64_t flat_index, int8_t value);

  std::string shape_str() const;

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  void check_dtype(DType expected, const char* what) const;

  std::vector<int64_t> shape_;
  DType dtype_ = DType::F32;
  std::vector<uint8_t> data_;
};

std::string shape_to_string(std::span<const int64_t> shape);

}  // namespace qvpr
