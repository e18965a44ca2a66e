#include "qvpr/tensor.hpp"

#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace qvpr {

namespace {

const DTypeInfo kInfo[] = {
    /* F32 */ {32, -std::numeric_limits<float>::max(), std::numeric_limits<float>::max(), true},
    /* F16 */ {16, -65504.0f, 65504.0f, true},
    /* I8 */ {8, -127.0f, 127.0f, false},
    /* I4Packed */ {4, -7.0f, 7.0f, false},
    /* I32 */ {32, -2147483647.0f, 2147483647.0f, false},
};

const char* kNames[] = {"f32", "f16", "i8", "i4packed", "i32"};

}  // namespace

const DTypeInfo& dtype_info(DType dt) { return kInfo[static_cast<size_t>(dt)]; }

const char* dtype_name(DType dt) { return kNames[static_cast<size_t>(dt)]; }

DType dtype_from_code(uint8_t code) {
  if (code > 4) {
    throw std::runtime_error("unknown dtype code " + std::to_string(int(code)));
  }
  return static_cast<DType>(code);
}

std::string shape_to_string(std::span<const int64_t> shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

size_t Tensor::payload_bytes(const std::vector<int64_t>& shape, DType dtype) {
  int64_t count = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_to_string(shape));
    count *= d;
  }
  switch (dtype) {
    case DType::F32:
    case DType::I32:
      return static_cast<size_t>(count) * 4;
    case DType::F16:
      return static_cast<size_t>(count) * 2;
    case DType::I8:
      return static_cast<size_t>(count);
    case DType::I4Packed: {
      // two elements per byte, rows padded to whole bytes
      const int64_t row = shape.empty() ? count : shape.back();
      const int64_t rows = row == 0 ? 0 : count / row;
      return static_cast<size_t>(rows * ((row + 1) / 2));
    }
  }
  throw std::invalid_argument("bad dtype");
}

Tensor::Tensor(std::vector<int64_t> shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype), data_(payload_bytes(shape_, dtype), 0) {}

Tensor Tensor::from_f32(std::vector<int64_t> shape, std::vector<float> values) {
  Tensor t(std::move(shape), DType::F32);
  if (static_cast<int64_t>(values.size()) != t.elem_count()) {
    throw std::invalid_argument("from_f32: " + std::to_string(values.size()) +
                                " values for shape " + t.shape_str());
  }
  std::memcpy(t.data_.data(), values.data(), values.size() * sizeof(float));
  return t;
}

int64_t Tensor::elem_count() const {
  int64_t count = 1;
  for (int64_t d : shape_) count *= d;
  return count;
}

void Tensor::check_dtype(DType expected, const char* what) const {
  if (dtype_ != expected) {
    throw std::invalid_argument(std::string(what) + " access on " + dtype_name(dtype_) +
                                " tensor");
  }
}

std::span<const float> Tensor::f32() const {
  check_dtype(DType::F32, "f32");
  return {reinterpret_cast<const float*>(data_.data()), data_.size() / 4};
}

std::span<float> Tensor::f32() {
  check_dtype(DType::F32, "f32");
  return {reinterpret_cast<float*>(data_.data()), data_.size() / 4};
}

std::span<const uint16_t> Tensor::f16() const {
  check_dtype(DType::F16, "f16");
  return {reinterpret_cast<const uint16_t*>(data_.data()), data_.size() / 2};
}

std::span<uint16_t> Tensor::f16() {
  check_dtype(DType::F16, "f16");
  return {reinterpret_cast<uint16_t*>(data_.data()), data_.size() / 2};
}

std::span<const int8_t> Tensor::i8() const {
  check_dtype(DType::I8, "i8");
  return {reinterpret_cast<const int8_t*>(data_.data()), data_.size()};
}

std::span<int8_t> Tensor::i8() {
  check_dtype(DType::I8, "i8");
  return {reinterpret_cast<int8_t*>(data_.data()), data_.size()};
}

std::span<const int32_t> Tensor::i32() const {
  check_dtype(DType::I32, "i32");
  return {reinterpret_cast<const int32_t*>(data_.data()), data_.size() / 4};
}

std::span<int32_t> Tensor::i32() {
  check_dtype(DType::I32, "i32");
  return {reinterpret_cast<int32_t*>(data_.data()), data_.size() / 4};
}

int8_t Tensor::i4_get(int64_t flat_index) const {
  check_dtype(DType::I4Packed, "i4");
  const int64_t row_len = shape_.empty() ? elem_count() : shape_.back();
  const int64_t row = row_len == 0 ? 0 : flat_index / row_len;
  const int64_t col = row_len == 0 ? 0 : flat_index % row_len;
  const uint8_t byte = data_.at(row * ((row_len + 1) / 2) + col / 2);
  uint8_t nibble = (col % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
  if (nibble & 0x08) nibble |= 0xF0;  // sign extend
  return static_cast<int8_t>(nibble);
}

void Tensor::i4_set(int64_t flat_index, int8_t value) {
  check_dtype(DType::I4Packed, "i4");
  const int64_t row_len = shape_.empty() ? elem_count() : shape_.back();
  const int64_t row = row_len == 0 ? 0 : flat_index / row_len;
  const int64_t col = row_len == 0 ? 0 : flat_index % row_len;
  uint8_t& byte = data_.at(row * ((row_len + 1) / 2) + col / 2);
  const uint8_t nibble = static_cast<uint8_t>(value) & 0x0F;
  if (col % 2 == 0) {
    byte = static_cast<uint8_t>((byte & 0xF0) | nibble);
  } else {
    byte = static_cast<uint8_t>((byte & 0x0F) | (nibble << 4));
  }
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool operator==(const Tensor& a, const Tensor& b) {
  return a.dtype_ == b.dtype_ && a.shape_ == b.shape_ && a.data_ == b.data_;
}

}  // namespace qvpr
