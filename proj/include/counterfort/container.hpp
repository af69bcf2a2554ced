#pragma once

// Self-describing binary container shared by checkpoints, adversarial
// batches and persisted datasets.
//
// Layout (all integers little-endian):
//   8 bytes   magic "CFORTBIN"
//   u32       format version
//   u64       header length H
//   H bytes   JSON header: {"kind", "meta", "tensors": [{"name", "dims"}...]}
//   8*N bytes tensor payloads as IEEE-754 binary64, in header order
//   u32       CRC-32 (zlib) of every preceding byte

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/error.hpp"
#include "counterfort/tensor.hpp"

namespace counterfort {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::array<char, 8> kContainerMagic = {'C', 'F', 'O', 'R', 'T', 'B', 'I', 'N'};

struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("container: missing tensor '" + name + "'");
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& entry : tensors) {
      if (entry.first == name) return true;
    }
    return false;
  }
};

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto step = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, step);
    data += step;
    size -= step;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<unsigned char> encode_container(const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) header["tensors"].push_back({{"name", name}, {"dims", t.dims}});
  const std::string text = header.dump();

  std::vector<unsigned char> out(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& entry : c.tensors) {
    for (double v : entry.second.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_le<std::uint32_t>(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

inline Container decode_container(const std::vector<unsigned char>& bytes) {
  constexpr std::size_t kFixed = 8 + 4 + 8;
  if (bytes.size() < kFixed + 4) {
    throw FormatError("container: corrupt payload (file has " + std::to_string(bytes.size()) + " bytes)");
  }
  if (!std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    throw FormatError("container: bad magic");
  }
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version > kContainerVersion) {
    throw VersionError("container: format version " + std::to_string(version) + " is newer than supported version " +
                       std::to_string(kContainerVersion));
  }
  if (version == 0) throw FormatError("container: invalid format version 0");
  const auto header_len = detail::get_le<std::uint64_t>(bytes.data() + 12);
  if (header_len > bytes.size() - kFixed - 4) throw FormatError("container: corrupt payload (header overruns file)");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kFixed, bytes.begin() + static_cast<std::ptrdiff_t>(kFixed + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: corrupt header: ") + e.what());
  }

  Container c;
  std::size_t payload = 0;
  std::vector<std::pair<std::string, Dims>> layout;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      layout.emplace_back(t.at("name").get<std::string>(), t.at("dims").get<Dims>());
      payload += dims_product(layout.back().second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container: corrupt header: ") + e.what());
  }

  const std::size_t expected = kFixed + header_len + 8 * payload + 4;
  if (bytes.size() != expected) {
    throw FormatError("container: corrupt payload (expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()) + ")");
  }
  const auto stored_crc = detail::get_le<std::uint32_t>(bytes.data() + expected - 4);
  if (stored_crc != detail::crc32_of(bytes.data(), expected - 4)) {
    throw FormatError("container: corrupt payload (checksum mismatch)");
  }

  const unsigned char* p = bytes.data() + kFixed + header_len;
  for (auto& [name, dims] : layout) {
    Tensor t(dims);
    for (double& v : t.values) {
      v = std::bit_cast<double>(detail::get_le<std::uint64_t>(p));
      p += 8;
    }
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

inline void save_container(const Container& c, const std::string& path) { write_file_bytes(path, encode_container(c)); }

inline Container load_container(const std::string& path) { return decode_container(read_file_bytes(path)); }

}  // namespace counterfort
