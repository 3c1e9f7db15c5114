#pragma once

// Named parameter registry and the binary checkpoint format:
// magic "VCT1", version u16, count u32, then per parameter
// name_len u16 + name bytes, rank u8, extents u32..., payload f32 LE.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

template <class T>
class ParamRegistry {
 public:
  Ptr<T> add(const std::string& name, Ptr<T> t) {
    for (const auto& [n, p] : items_)
      if (n == name)
        throw std::invalid_argument("duplicate parameter name: " + name);
    t->requires_grad = true;
    items_.emplace_back(name, t);
    return t;
  }

  Ptr<T> find(const std::string& name) const {
    for (const auto& [n, p] : items_)
      if (n == name) return p;
    throw std::out_of_range("no such parameter: " + name);
  }

  const std::vector<std::pair<std::string, Ptr<T>>>& items() const {
    return items_;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, p] : items_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Ptr<T>>> items_;
};

// He fan-in scaled normal init.
template <class T>
void init_he(Ptr<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  for (auto& v : t->value) v = static_cast<T>(dist(rng));
}

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<char*>(b), 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<char*>(b), 4);
}
inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

constexpr std::uint16_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const ParamRegistry<T>& reg, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for write: " + path);
  os.write("VCT1", 4);
  detail::put_u16(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(reg.items().size()));
  for (const auto& [name, p] : reg.items()) {
    detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(p->shape.size()));
    for (int e : p->shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
    for (T v : p->value) {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

// Loads into an existing registry; every stored name and shape must match.
template <class T>
void load_checkpoint(ParamRegistry<T>& reg, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VCT1", 4) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  const std::uint16_t version = detail::get_u16(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  const std::uint32_t count = detail::get_u32(is);
  if (count != reg.items().size())
    throw std::runtime_error("checkpoint/model mismatch: " +
                             std::to_string(count) + " stored vs " +
                             std::to_string(reg.items().size()) + " expected");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = detail::get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    auto p = reg.find(name);
    const int rank = is.get();
    Shape shape(rank);
    for (int r = 0; r < rank; ++r)
      shape[r] = static_cast<int>(detail::get_u32(is));
    if (shape != p->shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name +
                               ": stored " + shape_str(shape) + " vs model " +
                               shape_str(p->shape));
    for (auto& v : p->value) {
      const std::uint32_t bits = detail::get_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<T>(f);
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  }
}

}  // namespace vct
