#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mmk {

// Whole-file read; IoError naming the path on failure.
std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file, then renames over `path`, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// Creates `dir`; an existing directory is an error unless `force` is set.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

}  // namespace mmk
