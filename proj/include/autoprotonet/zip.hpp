#pragma once

// Minimal store-only (method 0) zip archives: enough for checkpoints, whose
// payload is raw float32 and does not compress usefully.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "autoprotonet/core.hpp"

namespace apn::zip {

struct ZipError : IoError {
  enum class Kind { Truncated, Malformed };
  ZipError(Kind k, const std::string& what) : IoError(what), kind(k) {}
  Kind kind;
};

using Bytes = std::vector<std::uint8_t>;

namespace detail {

inline void put16(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

inline void put32(Bytes& out, std::uint32_t v) {
  put16(out, v & 0xffff);
  put16(out, v >> 16);
}

inline std::uint32_t get16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8;
}

inline std::uint32_t get32(std::span<const std::uint8_t> b, std::size_t at) {
  return get16(b, at) | get16(b, at + 2) << 16;
}

inline std::uint32_t crc(std::span<const std::uint8_t> data) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < data.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - done, 1u << 30));
    c = crc32(c, data.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint32_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

}  // namespace detail

/// Builds an archive from (name, content) entries in insertion order.
inline Bytes write_archive(const std::vector<std::pair<std::string, Bytes>>& entries) {
  using namespace detail;
  Bytes out, central;
  for (const auto& [name, data] : entries) {
    if (data.size() > 0xffffffffu || out.size() > 0xffffffffu) throw IoError("zip entry exceeds 4 GiB");
    const auto offset = static_cast<std::uint32_t>(out.size());
    const std::uint32_t c = crc(data);
    const auto size = static_cast<std::uint32_t>(data.size());
    put32(out, kLocalSig);
    put16(out, 20);
    put16(out, 0);
    put16(out, 0);
    put16(out, 0);
    put16(out, kDosDate);
    put32(out, c);
    put32(out, size);
    put32(out, size);
    put16(out, static_cast<std::uint32_t>(name.size()));
    put16(out, 0);
    out.insert(out.end(), name.begin(), name.end());
    out.insert(out.end(), data.begin(), data.end());

    put32(central, kCentralSig);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, kDosDate);
    put32(central, c);
    put32(central, size);
    put32(central, size);
    put16(central, static_cast<std::uint32_t>(name.size()));
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central.insert(central.end(), name.begin(), name.end());
  }
  const auto cd_offset = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, kEndSig);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint32_t>(entries.size()));
  put16(out, static_cast<std::uint32_t>(entries.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, cd_offset);
  put16(out, 0);
  return out;
}

/// Parses an archive written by write_archive (or any store-only zip).
inline std::map<std::string, Bytes> read_archive(std::span<const std::uint8_t> b) {
  using namespace detail;
  using K = ZipError::Kind;
  constexpr std::size_t kEndSize = 22;
  if (b.size() < kEndSize) throw ZipError(K::Truncated, "archive is truncated (" + std::to_string(b.size()) + " bytes)");
  std::size_t end = b.size() - kEndSize;
  const std::size_t stop = b.size() > kEndSize + 0xffff ? b.size() - kEndSize - 0xffff : 0;
  while (get32(b, end) != kEndSig) {
    if (end == stop) throw ZipError(K::Truncated, "archive is truncated: end-of-central-directory record not found");
    --end;
  }
  const std::uint32_t count = get16(b, end + 10);
  const std::uint32_t cd_size = get32(b, end + 12);
  const std::uint32_t cd_offset = get32(b, end + 16);
  if (static_cast<std::size_t>(cd_offset) + cd_size > end) throw ZipError(K::Malformed, "central directory out of range");

  std::map<std::string, Bytes> entries;
  std::size_t at = cd_offset;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (at + 46 > end || get32(b, at) != kCentralSig) throw ZipError(K::Malformed, "bad central directory entry");
    const std::uint32_t method = get16(b, at + 10);
    const std::uint32_t crc_expected = get32(b, at + 16);
    const std::uint32_t size = get32(b, at + 20);
    const std::uint32_t usize = get32(b, at + 24);
    const std::uint32_t nlen = get16(b, at + 28);
    const std::uint32_t xlen = get16(b, at + 30);
    const std::uint32_t clen = get16(b, at + 32);
    const std::uint32_t local = get32(b, at + 42);
    if (at + 46 + nlen > end) throw ZipError(K::Malformed, "bad central directory entry");
    std::string name(reinterpret_cast<const char*>(b.data() + at + 46), nlen);
    at += 46 + nlen + xlen + clen;
    if (method != 0 || size != usize) throw ZipError(K::Malformed, "entry '" + name + "' is compressed; only stored entries are supported");
    if (static_cast<std::size_t>(local) + 30 > b.size() || get32(b, local) != kLocalSig) {
      throw ZipError(K::Malformed, "bad local header for '" + name + "'");
    }
    const std::size_t data = local + 30 + get16(b, local + 26) + get16(b, local + 28);
    if (data + size > b.size()) throw ZipError(K::Truncated, "entry '" + name + "' is truncated");
    Bytes content(b.begin() + static_cast<std::ptrdiff_t>(data), b.begin() + static_cast<std::ptrdiff_t>(data + size));
    if (crc(content) != crc_expected) throw ZipError(K::Malformed, "CRC mismatch in entry '" + name + "'");
    entries.emplace(std::move(name), std::move(content));
  }
  return entries;
}

}  // namespace apn::zip
