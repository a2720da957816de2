// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mos/matrix.hpp"

#include "json.hpp"

namespace mos {

/// Binary container shared by backbone, adapter and class-statistics
/// checkpoints: "MOS1" magic, u16 version, u16 record kind, a u32 manifest
/// (counts and dims), then the weight payload as little-endian f32 in
/// row-major order. A sibling <path>.json duplicates the manifest for
/// human inspection.
inline constexpr char kCheckpointMagic[4] = {'M', 'O', 'S', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class RecordKind : std::uint16_t { backbone = 1, adapter = 2, class_stats = 3 };

struct CheckpointPayload {
  RecordKind kind = RecordKind::backbone;
  std::vector<std::uint32_t> manifest;
  std::vector<float> values;
};

inline std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <typename T>
void put_le(std::string& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  put_bytes(out, buf, sizeof(T));
}

inline void put_f32_le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_le<std::uint32_t>(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  template <typename T>
  T get_le() {
    T v = 0;
    need(sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v = static_cast<T>(v | (static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i)));
    pos_ += sizeof(T);
    return v;
  }

  float get_f32_le() {
    const std::uint32_t bits = get_le<std::uint32_t>();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  void get_raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_exhausted() const {
    if (pos_ != bytes_.size()) throw std::runtime_error(path_ + ": trailing bytes in checkpoint");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error(path_ + ": truncated checkpoint");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

/// Canonical f32 little-endian encoding of a tensor list; this is both the
/// persisted payload and the input to content checksums, so a checksum taken
/// in memory survives a save/load round trip.
inline std::string encode_payload(const std::vector<const Matrix*>& tensors) {
  std::string out;
  for (const Matrix* t : tensors)
    for (double v : t->data()) detail::put_f32_le(out, static_cast<float>(v));
  return out;
}

inline std::uint64_t payload_checksum(const std::vector<const Matrix*>& tensors) {
  const std::string payload = encode_payload(tensors);
  return fnv1a64(payload.data(), payload.size());
}

inline void write_checkpoint(const std::string& path, RecordKind kind,
                             const std::vector<std::uint32_t>& manifest,
                             const std::vector<const Matrix*>& tensors,
                             const nlohmann::ordered_json& sidecar) {
  std::string out;
  detail::put_bytes(out, kCheckpointMagic, 4);
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(kind));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
  for (std::uint32_t m : manifest) detail::put_le<std::uint32_t>(out, m);
  out += encode_payload(tensors);
  detail::write_file(path, out);
  detail::write_file(path + ".json", sidecar.dump(2) + "\n");
}

inline CheckpointPayload read_checkpoint(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  detail::ByteReader r(bytes, path);
  char magic[4];
  r.get_raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error(path + ": bad checkpoint magic");
  const auto version = r.get_le<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointPayload payload;
  payload.kind = static_cast<RecordKind>(r.get_le<std::uint16_t>());
  const auto n_meta = r.get_le<std::uint32_t>();
  payload.manifest.reserve(n_meta);
  for (std::uint32_t i = 0; i < n_meta; ++i) payload.manifest.push_back(r.get_le<std::uint32_t>());
  if (r.remaining() % 4 != 0) throw std::runtime_error(path + ": truncated checkpoint");
  payload.values.reserve(r.remaining() / 4);
  while (r.remaining() > 0) payload.values.push_back(r.get_f32_le());
  r.expect_exhausted();
  return payload;
}

/// Header bytes preceding the f32 payload for a record with `n_meta`
/// manifest entries. Adapter storage accounting relies on this being fixed.
inline constexpr std::size_t checkpoint_header_bytes(std::size_t n_meta) {
  return 4 + 2 + 2 + 4 + 4 * n_meta;
}

}  // namespace mos
