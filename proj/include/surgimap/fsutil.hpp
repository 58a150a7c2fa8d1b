#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace surgimap {

// Writes to a sibling temporary file, flushes, then renames over `path`, so
// readers see either the old or the new content.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

} // namespace surgimap
