#pragma once

// Dense tensors and the UBT1 file format:
//   "UBT1" | u32 rank | rank x u32 dims | float32 data, all little-endian, row-major.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev {

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t size() const { return data.size(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw std::runtime_error("truncated UBT1 file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

template <typename T>
void write_ubt1(const std::string& path, const std::vector<std::size_t>& shape, const std::vector<T>& values) {
  if (Tensor<T>::numel(shape) != values.size()) throw std::invalid_argument("UBT1 shape does not match data");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write("UBT1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (const T& v : values) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw std::runtime_error("failed writing " + path);
}

template <typename T>
void write_ubt1(const std::string& path, const Tensor<T>& t) {
  write_ubt1(path, t.shape, t.data);
}

inline Tensor<float> read_ubt1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || std::memcmp(magic.data(), "UBT1", 4) != 0) throw std::runtime_error(path + ": not a UBT1 file");
  const std::uint32_t rank = detail::get_u32(in);
  if (rank > 16) throw std::runtime_error(path + ": implausible UBT1 rank");
  Tensor<float> t;
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(detail::get_u32(in));
  t.data.resize(Tensor<float>::numel(t.shape));
  for (float& v : t.data) v = std::bit_cast<float>(detail::get_u32(in));
  return t;
}

}  // namespace unibev
