// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor format, little-endian:
//   "TNSR" | u32 rank | u64 dims[rank] | f64 payload (row-major)
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtldr/tensor.hpp"

namespace mtldr {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

namespace le {
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_f64(std::ostream& os, double v);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
double get_f64(std::istream& is);
void put_string(std::ostream& os, const std::string& s);  // u32 length + bytes
std::string get_string(std::istream& is);
}  // namespace le

}  // namespace mtldr
