#pragma once

#include <string>
#include <string_view>

namespace navgen {

// Hex SHA-1 of the raw bytes.
std::string sha1_hex(std::string_view bytes);

// Content hash computed the way git hashes a blob: sha1("blob <len>\0" + bytes).
std::string git_blob_hash(std::string_view bytes);

}  // namespace navgen
