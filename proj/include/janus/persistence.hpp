#pragma once

// Flat binary tensors (little-endian, no header) plus JSON manifests. Every
// on-disk artifact of the project goes through these helpers so that reruns
// produce byte-identical files.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace janus::io {

namespace fs = std::filesystem;
using nlohmann::json;

void write_f64(const fs::path& path, std::span<const double> data);
std::vector<double> read_f64(const fs::path& path);
void write_i32(const fs::path& path, std::span<const std::int32_t> data);
std::vector<std::int32_t> read_i32(const fs::path& path);

/// Pretty-printed with sorted keys (nlohmann's default object ordering).
void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

/// Throws MissingArtifact when `path` does not exist.
void require_file(const fs::path& path);

/// Git blob hash (SHA-1 over "blob <size>\0" + bytes), hex encoded.
std::string git_blob_hash(std::span<const unsigned char> bytes);
std::string git_blob_hash_file(const fs::path& path);
/// Hash of a directory: git blob hash of the concatenated "name hash\n" lines
/// of its regular files in sorted order.
std::string content_hash_dir(const fs::path& dir);

/// Fixed-precision formatting for CSV output ("%.17g").
std::string fmt(double v);

}  // namespace janus::io
