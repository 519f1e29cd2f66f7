#pragma once

#include <span>
#include <string>
#include <string_view>

namespace patchsearch {

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view data);
std::string sha256_hex(std::span<const unsigned char> data);

/// First 16 hex digits; used for artifact/config hashes.
std::string short_hash(std::string_view data);

}  // namespace patchsearch
