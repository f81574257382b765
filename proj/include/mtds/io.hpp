#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mtds::io {

// Writes to "<path>.tmp" then renames over path.
void write_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace mtds::io
