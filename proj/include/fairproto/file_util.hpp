#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>

namespace fairproto {

/// Writes through `writer` into a sibling temporary file, then renames it
/// over `path`. The destination is never observed half-written.
void write_file_atomic(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& writer);

void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Throws IoError naming the path when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

}  // namespace fairproto
