#include "kdstage/container.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "kdstage/error.hpp"

namespace kdstage {

namespace {

constexpr std::array<char, 4> kMagic{'D', 'T', 'K', '1'};
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 4);
}

template <typename U>
void put_le(std::ostream& out, U bits) {
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(b, sizeof(U));
}

void get_bytes(std::istream& in, char* dst, std::size_t n, const std::string& what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw CorruptDataError(what + ": truncated tensor container");
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  unsigned char b[sizeof(U)];
  get_bytes(in, reinterpret_cast<char*>(b), sizeof(U), what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& tensor) {
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(dtype_of<T>()));
  put_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
  for (auto d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (T v : tensor.values()) {
    if constexpr (std::is_same_v<T, float>) {
      put_le(out, std::bit_cast<std::uint32_t>(v));
    } else {
      put_le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

template <typename T>
BasicTensor<T> read_tensor(std::istream& in, const std::string& what) {
  std::array<char, 4> magic{};
  get_bytes(in, magic.data(), magic.size(), what);
  if (magic != kMagic) throw CorruptDataError(what + ": bad magic bytes (expected DTK1)");
  char code = 0;
  get_bytes(in, &code, 1, what);
  if (code != static_cast<char>(DType::F32) && code != static_cast<char>(DType::F64)) {
    throw CorruptDataError(what + ": unknown dtype code " + std::to_string(static_cast<int>(code)));
  }
  const auto dtype = static_cast<DType>(code);
  if constexpr (std::is_same_v<T, float>) {
    if (dtype == DType::F64) throw CorruptDataError(what + ": f64 container cannot load as f32");
  }
  const auto ndim = get_le<std::uint32_t>(in, what);
  if (ndim > kMaxRank) throw CorruptDataError(what + ": rank " + std::to_string(ndim) + " too large");
  Shape shape(ndim);
  for (auto& d : shape) {
    d = get_le<std::uint32_t>(in, what);
    if (d == 0) throw CorruptDataError(what + ": zero dimension");
  }
  const std::size_t n = shape_size(shape);
  std::vector<T> values(n);
  for (auto& v : values) {
    if (dtype == DType::F32) {
      v = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(in, what)));
    } else {
      v = static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(in, what)));
    }
  }
  try {
    return BasicTensor<T>(std::move(shape), std::move(values));
  } catch (const NumericDomainError& e) {
    throw CorruptDataError(what + ": " + e.what());
  }
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename T>
BasicTensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto tensor = read_tensor<T>(in, path.string());
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CorruptDataError(path.string() + ": trailing bytes after tensor container");
  }
  return tensor;
}

template void write_tensor(std::ostream&, const BasicTensor<float>&);
template void write_tensor(std::ostream&, const BasicTensor<double>&);
template BasicTensor<float> read_tensor(std::istream&, const std::string&);
template BasicTensor<double> read_tensor(std::istream&, const std::string&);
template void save_tensor(const std::filesystem::path&, const BasicTensor<float>&);
template void save_tensor(const std::filesystem::path&, const BasicTensor<double>&);
template BasicTensor<float> load_tensor(const std::filesystem::path&);
template BasicTensor<double> load_tensor(const std::filesystem::path&);

}  // namespace kdstage
