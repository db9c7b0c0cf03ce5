#pragma once

#include <iosfwd>
#include <string>

#include "genad/numkit/tensor.hpp"

namespace genad::numkit {

// Tensor wire format: "GADT" magic, u32 version, u32 rank, u32 dims[rank],
// then row-major little-endian f64 payload.
inline constexpr char kBlobMagic[4] = {'G', 'A', 'D', 'T'};
inline constexpr uint32_t kBlobVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);  // CorruptionError on malformed input

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace genad::numkit
