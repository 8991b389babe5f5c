#include "ntta/tensor_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>

namespace ntta {

namespace {

constexpr char kMagic[4] = {'N', 'T', 'T', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::vector<std::uint8_t> encode_ntt(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 * t.rank() + 8 * t.numel());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_f64(out, v);
  return out;
}

Tensor decode_ntt(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError(origin + ": not an NTT1 tensor (bad magic)");
  }
  const std::uint32_t rank = get_u32(bytes.data() + 4);
  const std::size_t header = 8 + 4 * static_cast<std::size_t>(rank);
  if (bytes.size() < header) throw IoError(origin + ": truncated NTT1 header");
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) shape[d] = get_u32(bytes.data() + 8 + 4 * d);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != header + 8 * n) {
    throw IoError(origin + ": NTT1 payload size " + std::to_string(bytes.size() - header) +
                  " does not match shape " + shape_str(shape));
  }
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(bytes.data() + header + 8 * i);
  return Tensor(std::move(shape), std::move(data));
}

void write_ntt(std::ostream& os, const Tensor& t) {
  const auto bytes = encode_ntt(t);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing NTT1 tensor");
}

Tensor read_ntt(std::istream& is, const std::string& origin) {
  std::uint8_t head[8];
  if (!is.read(reinterpret_cast<char*>(head), 8)) throw IoError(origin + ": truncated NTT1 header");
  if (std::memcmp(head, kMagic, 4) != 0) throw IoError(origin + ": not an NTT1 tensor (bad magic)");
  const std::uint32_t rank = get_u32(head + 4);
  std::vector<std::uint8_t> bytes(head, head + 8);
  bytes.resize(8 + 4 * static_cast<std::size_t>(rank));
  if (!is.read(reinterpret_cast<char*>(bytes.data() + 8), 4 * static_cast<std::streamsize>(rank))) {
    throw IoError(origin + ": truncated NTT1 header");
  }
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) shape[d] = get_u32(bytes.data() + 8 + 4 * d);
  const std::size_t payload = 8 * shape_numel(shape);
  const std::size_t header = bytes.size();
  bytes.resize(header + payload);
  if (!is.read(reinterpret_cast<char*>(bytes.data() + header), static_cast<std::streamsize>(payload))) {
    throw IoError(origin + ": truncated NTT1 payload");
  }
  return decode_ntt(bytes, origin);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void save_ntt(const std::filesystem::path& path, const Tensor& t) { write_file_bytes(path, encode_ntt(t)); }

Tensor load_ntt(const std::filesystem::path& path) { return decode_ntt(read_file_bytes(path), path.string()); }

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace ntta
