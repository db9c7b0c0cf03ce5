#include "genad/numkit/blob.hpp"

#include <cstring>
#include <fstream>
#include <ostream>

#include "genad/errors.hpp"

namespace genad::numkit {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CorruptionError("truncated tensor blob");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CorruptionError("truncated tensor blob");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kBlobMagic, 4);
  put_u32(os, kBlobVersion);
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
  for (double v : t.data) put_f64(os, v);
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw CorruptionError("truncated tensor blob");
  if (std::memcmp(magic, kBlobMagic, 4) != 0) throw CorruptionError("bad tensor blob magic");
  uint32_t version = get_u32(is);
  if (version != kBlobVersion) {
    throw CorruptionError("unsupported tensor blob version " + std::to_string(version));
  }
  uint32_t rank = get_u32(is);
  if (rank < 1 || rank > 3) throw CorruptionError("tensor blob rank out of range");
  std::vector<int> shape;
  size_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = get_u32(is);
    if (d == 0 || d > (1u << 28)) throw CorruptionError("tensor blob dim out of range");
    shape.push_back(static_cast<int>(d));
    numel *= d;
  }
  std::vector<double> data(numel);
  for (auto& v : data) v = get_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CorruptionError("cannot open " + path + " for writing");
  write_tensor(f, t);
  if (!f) throw CorruptionError("write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptionError("cannot open " + path);
  return read_tensor(f);
}

}  // namespace genad::numkit
