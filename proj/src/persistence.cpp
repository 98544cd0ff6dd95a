#include "janus/persistence.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "janus/common.hpp"

namespace janus::io {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

template <class T>
void write_raw(const fs::path& path, std::span<const T> data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
}

template <class T>
std::vector<T> read_raw(const fs::path& path) {
  require_file(path);
  std::ifstream in(path, std::ios::binary);
  const auto bytes = fs::file_size(path);
  if (bytes % sizeof(T) != 0) throw Error("truncated tensor file " + path.string());
  std::vector<T> out(bytes / sizeof(T));
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  return out;
}

}  // namespace

void write_f64(const fs::path& path, std::span<const double> data) { write_raw(path, data); }
std::vector<double> read_f64(const fs::path& path) { return read_raw<double>(path); }
void write_i32(const fs::path& path, std::span<const std::int32_t> data) { write_raw(path, data); }
std::vector<std::int32_t> read_i32(const fs::path& path) { return read_raw<std::int32_t>(path); }

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  return json::parse(in);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  require_file(path);
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact(path.string());
}

std::string git_blob_hash(std::span<const unsigned char> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : std::span<const unsigned char>(digest, len)) {
    out += hex[c >> 4];
    out += hex[c & 15];
  }
  return out;
}

std::string git_blob_hash_file(const fs::path& path) {
  const std::string bytes = read_text(path);
  return git_blob_hash({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
}

std::string content_hash_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingArtifact(dir.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::string listing;
  for (const auto& n : names) listing += n + " " + git_blob_hash_file(dir / n) + "\n";
  return git_blob_hash({reinterpret_cast<const unsigned char*>(listing.data()), listing.size()});
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace janus::io
