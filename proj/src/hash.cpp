#include "navgen/hash.hpp"

#include <openssl/sha.h>

#include <array>
#include <cstdio>

namespace navgen {

std::string sha1_hex(std::string_view bytes) {
  std::array<unsigned char, SHA_DIGEST_LENGTH> digest{};
  SHA1(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest.data());
  std::string out;
  out.reserve(2 * digest.size());
  char buf[3];
  for (unsigned char c : digest) {
    std::snprintf(buf, sizeof(buf), "%02x", c);
    out += buf;
  }
  return out;
}

std::string git_blob_hash(std::string_view bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed.push_back('\0');
  framed.append(bytes);
  return sha1_hex(framed);
}

}  // namespace navgen
