#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "consisaug/errors.hpp"

namespace consisaug {

inline std::array<std::uint8_t, 32> sha256(const void* bytes, std::size_t len) {
  std::array<std::uint8_t, 32> out{};
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) raise(ErrorCode::IoError, "EVP_MD_CTX_new failed");
  unsigned int out_len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, bytes, len) == 1 &&
                  EVP_DigestFinal_ex(ctx, out.data(), &out_len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok || out_len != 32) raise(ErrorCode::IoError, "sha256 computation failed");
  return out;
}

inline std::string to_hex(const std::array<std::uint8_t, 32>& digest) {
  static const char* hexdig = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (std::uint8_t b : digest) {
    s.push_back(hexdig[b >> 4]);
    s.push_back(hexdig[b & 0xf]);
  }
  return s;
}

inline std::string sha256_hex(const void* bytes, std::size_t len) {
  return to_hex(sha256(bytes, len));
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

inline std::string sha256_hex(const std::vector<std::uint8_t>& v) {
  return sha256_hex(v.data(), v.size());
}

}  // namespace consisaug
