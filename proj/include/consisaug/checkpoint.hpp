#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "consisaug/data.hpp"
#include "consisaug/digest.hpp"
#include "consisaug/errors.hpp"
#include "consisaug/tensor.hpp"

namespace consisaug {

/// On-disk training state. Layout: magic "CSAG", u32 version, u32
/// architecture hash, u64 step, u32 tensor count, then per tensor
/// (u32 name length, name, u32 rank, u32 dims, little-endian f64
/// payload), and a trailing SHA-256 of all preceding bytes. The config
/// snapshot travels in a `.cfg` sidecar next to the binary file. The
/// payload is 64-bit so that save/load round-trips and resumed runs are
/// bit-exact.
struct Checkpoint {
  std::uint32_t version = 1;
  std::uint32_t arch_hash = 0;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string config_text;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) raise(ErrorCode::Truncated, "checkpoint ends mid-record");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
};

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'A', 'G'};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, ckpt.version);
  detail::put_u32(out, ckpt.arch_hash);
  detail::put_u64(out, ckpt.step);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(tensor.shape.size()));
    for (int d : tensor.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : tensor.data) detail::put_f64(out, v);
  }
  const auto digest = sha256(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());
  write_file(path, out);
  if (!ckpt.config_text.empty())
    write_file(std::filesystem::path(path.string() + ".cfg"),
               std::vector<std::uint8_t>(ckpt.config_text.begin(), ckpt.config_text.end()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  std::optional<std::uint32_t> expected_arch = std::nullopt) {
  const auto bytes = read_file(path);
  if (bytes.size() < 4 + 32) raise(ErrorCode::Truncated, "checkpoint too small: " + path.string());
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    raise(ErrorCode::BadMagic, "not a checkpoint file: " + path.string());
  const std::size_t body = bytes.size() - 32;
  const auto digest = sha256(bytes.data(), body);
  if (std::memcmp(digest.data(), bytes.data() + body, 32) != 0)
    raise(ErrorCode::ChecksumMismatch, "checkpoint checksum mismatch: " + path.string());

  detail::ByteReader in{bytes, 4};
  Checkpoint ckpt;
  ckpt.version = in.u32();
  if (ckpt.version != 1)
    raise(ErrorCode::VersionMismatch,
          "unsupported checkpoint version " + std::to_string(ckpt.version));
  ckpt.arch_hash = in.u32();
  if (expected_arch && ckpt.arch_hash != *expected_arch)
    raise(ErrorCode::ArchMismatch, "checkpoint was written by a different architecture");
  ckpt.step = in.u64();
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32();
    const std::string name = in.str(name_len);
    const std::uint32_t rank = in.u32();
    Shape shape;
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int>(in.u32()));
      n *= shape.back();
    }
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = in.f64();
    ckpt.tensors.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  if (in.pos != body) raise(ErrorCode::Truncated, "trailing bytes inside checkpoint body");

  const std::filesystem::path sidecar(path.string() + ".cfg");
  if (std::filesystem::exists(sidecar)) {
    const auto cfg = read_file(sidecar);
    ckpt.config_text.assign(cfg.begin(), cfg.end());
  }
  return ckpt;
}

}  // namespace consisaug
