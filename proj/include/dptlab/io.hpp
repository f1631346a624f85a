// Little-endian binary records, SHA-256 content hashes, atomic file writes.
#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "dptlab/core.hpp"

namespace dptlab::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

class Writer {
 public:
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> xs) {
    put<std::uint64_t>(xs.size());
    buf_.append(reinterpret_cast<const char*>(xs.data()), xs.size_bytes());
  }

  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    buf_.append(s.data(), s.size());
  }

  void put_magic(std::string_view magic) { buf_.append(magic.data(), magic.size()); }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_array() {
    auto n = get<std::uint64_t>();
    if (n > (buf_.size() - pos_) / sizeof(T)) throw StageError("truncated array in binary record");
    std::vector<T> out(n);
    std::memcpy(out.data(), buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return out;
  }

  std::string get_string() {
    auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::string_view(buf_).substr(pos_, magic.size()) != magic)
      throw StageError("bad magic: expected " + std::string(magic));
    pos_ += magic.size();
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw StageError("truncated binary record");
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write to a sibling temporary, then rename over the target.
inline void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StageError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw StageError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace dptlab::io
