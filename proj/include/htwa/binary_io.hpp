#pragma once

// Little-endian byte buffers shared by the shard and checkpoint formats.

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace htwa::io {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string in, std::string path) : in_(std::move(in)), path_(std::move(path)) {}
  const char* take(std::size_t n) {
    if (pos_ + n > in_.size()) throw std::runtime_error(path_ + ": truncated");
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string in_;
  std::string path_;
  std::size_t pos_ = 0;
};

// Whole file as bytes; throws std::runtime_error naming the path.
std::string read_file(const std::string& path);
// Writes all bytes, replacing the file.
void write_file(const std::string& path, const std::string& bytes);

}  // namespace htwa::io
