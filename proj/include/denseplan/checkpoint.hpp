#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "denseplan/errors.hpp"
#include "denseplan/tensor.hpp"

namespace denseplan {

// CRC-32 (IEEE polynomial, reflected), byte-at-a-time table driven.
inline std::uint32_t crc32_update(std::uint32_t crc, const void* data,
                                  std::size_t len) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      }
      t[i] = c;
    }
    return t;
  }();
  const unsigned char* p = static_cast<const unsigned char*>(data);
  crc ^= 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

namespace detail {

// Buffered writer that maintains a running checksum over everything written.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(const std::string& path)
      : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open " + path + " for writing");
  }

  void write(const void* data, std::size_t len) {
    buffer_.insert(buffer_.end(), static_cast<const char*>(data),
                   static_cast<const char*>(data) + len);
  }
  template <typename V>
  void write_scalar(V v) {
    write(&v, sizeof(V));
  }
  void write_string(const std::string& s) {
    write_scalar<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    write(s.data(), s.size());
  }

  void finish() {
    const std::uint32_t crc = crc32_update(0, buffer_.data(), buffer_.size());
    out_.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    out_.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    out_.close();
    if (!out_) throw FormatError("checkpoint write failed");
  }

 private:
  std::ofstream out_;
  std::vector<char> buffer_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    bytes_.assign((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
    if (bytes_.size() < sizeof(std::uint32_t)) {
      throw FormatError("checkpoint too short: " + path);
    }
    const std::size_t payload = bytes_.size() - sizeof(std::uint32_t);
    std::uint32_t stored;
    std::memcpy(&stored, bytes_.data() + payload, sizeof(stored));
    const std::uint32_t actual = crc32_update(0, bytes_.data(), payload);
    if (stored != actual) {
      throw FormatError("checkpoint checksum mismatch in " + path);
    }
    end_ = payload;
  }

  void read(void* data, std::size_t len) {
    if (pos_ + len > end_) throw FormatError("checkpoint truncated");
    std::memcpy(data, bytes_.data() + pos_, len);
    pos_ += len;
  }
  template <typename V>
  V read_scalar() {
    V v;
    read(&v, sizeof(V));
    return v;
  }
  std::string read_string() {
    const auto len = read_scalar<std::uint32_t>();
    if (pos_ + len > end_) throw FormatError("checkpoint truncated");
    std::string s(bytes_.data() + pos_, len);
    pos_ += len;
    return s;
  }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Format: magic "DPLN", version u32, element-size u32, epoch u32, entry
// count u32, then per entry: length-prefixed name, four i64 dims, raw
// little-endian elements; trailing CRC-32 of all preceding bytes.
// (The writer assumes a little-endian host, which covers every supported
// target; a big-endian port would need byte swaps here.)
template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& entries,
                     int epoch) {
  detail::CheckpointWriter w(path);
  w.write("DPLN", 4);
  w.write_scalar<std::uint32_t>(kCheckpointVersion);
  w.write_scalar<std::uint32_t>(static_cast<std::uint32_t>(sizeof(T)));
  w.write_scalar<std::uint32_t>(static_cast<std::uint32_t>(epoch));
  w.write_scalar<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    w.write_string(name);
    const Shape4& s = tensor.shape();
    w.write_scalar<std::int64_t>(s.n);
    w.write_scalar<std::int64_t>(s.c);
    w.write_scalar<std::int64_t>(s.h);
    w.write_scalar<std::int64_t>(s.w);
    w.write(tensor.data(),
            static_cast<std::size_t>(tensor.elems()) * sizeof(T));
  }
  w.finish();
}

// Loads into the given entries in place; every stored tensor must match an
// entry by name and shape. Returns the stored epoch.
template <typename T>
int load_checkpoint(const std::string& path,
                    std::vector<std::pair<std::string, Tensor<T>>>& entries) {
  detail::CheckpointReader r(path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "DPLN", 4) != 0) {
    throw FormatError("bad checkpoint magic in " + path);
  }
  const auto version = r.read_scalar<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  const auto elem_size = r.read_scalar<std::uint32_t>();
  if (elem_size != sizeof(T)) {
    throw FormatError("checkpoint element size " + std::to_string(elem_size) +
                      " does not match requested element type");
  }
  const auto epoch = r.read_scalar<std::uint32_t>();
  const auto count = r.read_scalar<std::uint32_t>();
  if (count != entries.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) +
                      " tensors, expected " + std::to_string(entries.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.read_string();
    Shape4 s;
    s.n = r.read_scalar<std::int64_t>();
    s.c = r.read_scalar<std::int64_t>();
    s.h = r.read_scalar<std::int64_t>();
    s.w = r.read_scalar<std::int64_t>();
    auto& [ename, etensor] = entries[i];
    if (ename != name) {
      throw FormatError("checkpoint tensor '" + name + "' where '" + ename +
                        "' was expected");
    }
    if (s != etensor.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        s.str() + ", expected " + etensor.shape().str());
    }
    r.read(etensor.data(),
           static_cast<std::size_t>(etensor.elems()) * sizeof(T));
  }
  return static_cast<int>(epoch);
}

}  // namespace denseplan
