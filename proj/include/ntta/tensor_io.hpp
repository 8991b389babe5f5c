#pragma once

// NTT1 tensor serialization: magic "NTT1", u32 rank, u32 dims[rank], then
// little-endian f64 values in row-major order.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ntta/tensor.hpp"

namespace ntta {

class IoError : public Error {
 public:
  using Error::Error;
};

void write_ntt(std::ostream& os, const Tensor& t);
Tensor read_ntt(std::istream& is, const std::string& origin = "<stream>");

std::vector<std::uint8_t> encode_ntt(const Tensor& t);
Tensor decode_ntt(std::span<const std::uint8_t> bytes, const std::string& origin = "<buffer>");

void save_ntt(const std::filesystem::path& path, const Tensor& t);
Tensor load_ntt(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace ntta
