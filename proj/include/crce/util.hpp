#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace crce {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Writes to a sibling temp file then renames over `path`.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);

/// Lower-cases, drops punctuation, collapses whitespace. Used for prompt equality.
std::string normalize_prompt(std::string_view s);

/// UTC timestamp, ISO-8601 with seconds.
std::string utc_timestamp();

} // namespace crce
