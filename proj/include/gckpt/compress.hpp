#pragma once

#include <zlib.h>

#include <cstdint>
#include <span>

#include "gckpt/bytes.hpp"
#include "gckpt/error.hpp"

namespace gckpt {

// Raw DEFLATE streams (no zlib or gzip framing); integrity lives in the
// section table's CRC32, not in the stream itself.
inline Bytes deflate_bytes(std::span<const uint8_t> input) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -15, 8,
                   Z_DEFAULT_STRATEGY) != Z_OK)
    raise(ErrorCode::IoFailure, "deflateInit2 failed");

  Bytes out(deflateBound(&zs, static_cast<uLong>(input.size())));
  zs.next_in = const_cast<Bytef*>(input.data());
  zs.avail_in = static_cast<uInt>(input.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  int rc = deflate(&zs, Z_FINISH);
  if (rc != Z_STREAM_END) {
    deflateEnd(&zs);
    raise(ErrorCode::IoFailure, "deflate did not finish");
  }
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

// expected_len is the decoded size recorded in the section table; output is
// capped there so a corrupt stream cannot balloon memory.
inline Bytes inflate_bytes(std::span<const uint8_t> input, size_t expected_len) {
  // One spare byte lets zlib signal overlong streams instead of stalling on a
  // zero-capacity buffer.
  Bytes out(expected_len + 1);
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK)
    raise(ErrorCode::IoFailure, "inflateInit2 failed");

  zs.next_in = const_cast<Bytef*>(input.data());
  zs.avail_in = static_cast<uInt>(input.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  int rc = inflate(&zs, Z_FINISH);
  bool ok = (rc == Z_STREAM_END) && zs.total_out == expected_len && zs.avail_in == 0;
  inflateEnd(&zs);
  if (!ok) raise(ErrorCode::CorruptImage, "bad compressed section");
  out.resize(expected_len);
  return out;
}

inline uint32_t crc32_bytes(std::span<const uint8_t> input) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // crc32 takes uInt lengths; feed in chunks so >4GiB inputs stay correct.
  size_t pos = 0;
  while (pos < input.size()) {
    uInt chunk = static_cast<uInt>(std::min<size_t>(input.size() - pos, 1u << 30));
    c = ::crc32(c, input.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<uint32_t>(c);
}

}  // namespace gckpt
