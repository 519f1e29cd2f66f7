#include "patchsearch/hashing.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

namespace patchsearch {

std::string sha256_hex(std::span<const unsigned char> data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr);
  std::string hex;
  hex.reserve(len * 2);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string sha256_hex(std::string_view data) {
  return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(data.data()),
                                                   data.size()));
}

std::string short_hash(std::string_view data) { return sha256_hex(data).substr(0, 16); }

}  // namespace patchsearch
