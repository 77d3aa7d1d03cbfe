#pragma once

#include <string>

#include "json.hpp"

namespace dmkit {

// SHA-256 hex digest of a byte string.
std::string sha256_hex(const std::string& bytes);

// Digest of a canonicalised JSON value. nlohmann keeps object keys sorted,
// so dump() is already canonical for our configs.
inline std::string digest_json(const nlohmann::json& j) {
  return sha256_hex(j.dump());
}

}  // namespace dmkit
