#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <span>

#include "gckpt/bytes.hpp"
#include "gckpt/error.hpp"

namespace gckpt {

using Digest = std::array<uint8_t, 32>;

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      raise(ErrorCode::IoFailure, "sha256 init failed");
  }

  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  ~Sha256() { EVP_MD_CTX_free(ctx_); }

  void update(std::span<const uint8_t> data) {
    if (EVP_DigestUpdate(ctx_, data.data(), data.size()) != 1)
      raise(ErrorCode::IoFailure, "sha256 update failed");
  }

  void update(const void* p, size_t n) {
    update(std::span<const uint8_t>(static_cast<const uint8_t*>(p), n));
  }

  Digest finish() {
    Digest d{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, d.data(), &len) != 1 || len != d.size())
      raise(ErrorCode::IoFailure, "sha256 final failed");
    return d;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline Digest sha256(std::span<const uint8_t> data) {
  Sha256 h;
  h.update(data);
  return h.finish();
}

inline std::string digest_hex(const Digest& d) { return to_hex(d); }

inline Digest digest_from_hex(std::string_view hex) {
  Bytes b = from_hex(hex);
  if (b.size() != 32) raise(ErrorCode::DecodeError, "digest must be 32 bytes");
  Digest d{};
  std::copy(b.begin(), b.end(), d.begin());
  return d;
}

}  // namespace gckpt
