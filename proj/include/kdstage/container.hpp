#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "kdstage/tensor.hpp"

namespace kdstage {

// Tensor container ("DTK1"):
//   4 bytes  magic "DTK1"
//   1 byte   dtype code, 0 = f32, 1 = f64
//   u32 LE   ndim
//   u32 LE   dims[ndim]
//   raw little-endian values, row-major
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& tensor);

// Reads one container. f32 data widens into a double tensor; f64 data never
// narrows into a float tensor. Malformed input raises CorruptDataError with
// `what` in the message.
template <typename T>
BasicTensor<T> read_tensor(std::istream& in, const std::string& what = "tensor");

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& tensor);

// The whole file must be exactly one container.
template <typename T>
BasicTensor<T> load_tensor(const std::filesystem::path& path);

}  // namespace kdstage
