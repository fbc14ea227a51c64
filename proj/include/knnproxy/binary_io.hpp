#pragma once

// Little-endian binary encoding helpers with a running CRC32, plus a
// read-only memory mapping used by the file-backed readers.

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "knnproxy/error.hpp"

namespace knnproxy::io {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are not supported");

inline std::uint32_t crc32_update(std::uint32_t crc, const void* data, std::size_t len) {
  const auto* p = static_cast<const Bytef*>(data);
  // zlib takes uInt lengths.
  while (len > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = static_cast<std::uint32_t>(::crc32(crc, p, chunk));
    p += chunk;
    len -= chunk;
  }
  return crc;
}

// Buffered writer. Bytes written after begin_payload() feed the CRC.
class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open '" + path.string() + "' for writing");
  }

  void raw(const void* data, std::size_t len) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (payload_) crc_ = crc32_update(crc_, data, len);
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    raw(&v, sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> xs) {
    raw(xs.data(), xs.size_bytes());
  }

  void magic(std::string_view m) { raw(m.data(), m.size()); }
  void begin_payload() {
    payload_ = true;
    crc_ = 0;
  }

  // Appends the CRC of the payload and flushes.
  void finish() {
    payload_ = false;
    put<std::uint32_t>(crc_);
    out_.flush();
    if (!out_) throw DataError("write to '" + path_.string() + "' failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  bool payload_ = false;
  std::uint32_t crc_ = 0;
};

// Read-only mapping of a whole file.
class MappedFile {
 public:
  MappedFile() = default;
  explicit MappedFile(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw DataError("cannot open '" + path.string() + "'");
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw DataError("cannot stat '" + path.string() + "'");
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        fd_ = -1;
        throw DataError("cannot map '" + path.string() + "'");
      }
      data_ = static_cast<const std::uint8_t*>(p);
    }
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  MappedFile(MappedFile&& o) noexcept { swap(o); }
  MappedFile& operator=(MappedFile&& o) noexcept {
    if (this != &o) {
      release();
      swap(o);
    }
    return *this;
  }
  ~MappedFile() { release(); }

  std::span<const std::uint8_t> bytes() const noexcept { return {data_, size_}; }
  std::size_t size() const noexcept { return size_; }

 private:
  void swap(MappedFile& o) noexcept {
    std::swap(fd_, o.fd_);
    std::swap(data_, o.data_);
    std::swap(size_, o.size_);
  }
  void release() noexcept {
    if (data_ != nullptr) ::munmap(const_cast<std::uint8_t*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
    data_ = nullptr;
    fd_ = -1;
    size_ = 0;
  }

  int fd_ = -1;
  const std::uint8_t* data_ = nullptr;
  std::size_t size_ = 0;
};

// Bounds-checked cursor over a byte span; every overrun is a format error.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(std::string_view m) {
    if (bytes_.size() < m.size() || std::memcmp(bytes_.data(), m.data(), m.size()) != 0) {
      throw FormatError("bad magic, expected '" + std::string(m) + "'");
    }
    pos_ = m.size();
  }

  // Checks the trailing CRC over [payload_begin, size - 4).
  void verify_crc(std::size_t payload_begin) const {
    if (bytes_.size() < payload_begin + 4) throw FormatError("file truncated");
    const std::size_t end = bytes_.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes_.data() + end, 4);
    const std::uint32_t actual = crc32_update(0, bytes_.data() + payload_begin, end - payload_begin);
    if (stored != actual) throw FormatError("CRC mismatch (file corrupt or truncated)");
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_array(std::size_t count) {
    if (count > 0 && count > (bytes_.size() - pos_) / sizeof(T)) throw FormatError("file truncated");
    std::vector<T> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return out;
  }

  // View into the mapping without copying; alignment is not guaranteed, so
  // callers read through memcpy.
  std::span<const std::uint8_t> view(std::size_t len) {
    need(len);
    auto s = bytes_.subspan(pos_, len);
    pos_ += len;
    return s;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("file truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace knnproxy::io
