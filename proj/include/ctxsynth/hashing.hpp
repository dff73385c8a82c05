#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace ctxsynth {

std::string sha256_hex(std::string_view data);
/// Streams the file; throws Error when it cannot be read.
std::string sha256_file(const std::filesystem::path& path);

/// Writes to "<path>.tmp" then renames over `path`. The temp file is removed on failure.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace ctxsynth
