#pragma once

// MVCK checkpoint container, all integers little-endian u32:
//
//   "MVCK" | version | meta_len | meta (UTF-8 JSON) | count |
//   count x ( name_len | name | rank | dims[rank] | f32 data[prod(dims)] ) |
//   crc32 of every preceding byte
//
// Entries are written in name order; optimizer slots use an "opt/" prefix.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiverse/autodiff.hpp"
#include "multiverse/errors.hpp"
#include "multiverse/tensor.hpp"

namespace mvt {

inline constexpr char kCheckpointMagic[4] = {'M', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kOptimizerPrefix = "opt/";

struct Checkpoint {
  ParameterStore<float> params;
  std::map<std::string, Tensor<float>> optimizer_state;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void put_entry(std::string& out, const std::string& name, const Tensor<T>& t) {
  if (!t.all_finite()) throw NumericError("refusing to save non-finite values in " + name);
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (T v : t.values()) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f)) throw NumericError("value of " + name + " overflows 32-bit float");
    put_f32(out, f);
  }
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end, std::string path) : buf_(buf), end_(end), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > end_ - pos_)
      throw FormatError(path_ + ": truncated " + what + " at offset " + std::to_string(pos_));
  }

  const std::string& buf_;
  std::size_t end_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string());
  }
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const ParameterStore<T>& params, const nlohmann::json& metadata,
                              const std::map<std::string, Tensor<T>>& optimizer_state = {}) {
  std::map<std::string, const Tensor<T>*> entries;
  for (const auto& [name, e] : params.entries()) {
    if (name.starts_with(kOptimizerPrefix)) throw ArgumentError("parameter name uses reserved prefix: " + name);
    entries.emplace(name, &e.value);
  }
  for (const auto& [name, t] : optimizer_state) entries.emplace(kOptimizerPrefix + name, &t);

  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  if (!metadata.is_object() && !metadata.is_null()) throw ArgumentError("checkpoint metadata must be a JSON object");
  const std::string meta = metadata.is_null() ? std::string("{}") : metadata.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) detail::put_entry(out, name, *t);
  detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& params,
                     const nlohmann::json& metadata, const std::map<std::string, Tensor<T>>& optimizer_state = {}) {
  detail::write_atomic(path, encode_checkpoint(params, metadata, optimizer_state));
}

// Validates magic, version and CRC before parsing anything, and builds the
// result only after every entry has been read.
inline Checkpoint decode_checkpoint(const std::string& buf, const std::string& path = "<memory>") {
  if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw FormatError(path + ": bad magic (not an MVCK checkpoint)");
  detail::Reader head(buf, buf.size(), path);
  head.bytes(4, "magic");
  const std::uint32_t version = head.u32("version");
  if (version == 0 || version > kCheckpointVersion)
    throw VersionError(path + ": checkpoint version " + std::to_string(version) + ", supported up to " +
                       std::to_string(kCheckpointVersion));
  if (buf.size() < 16) throw FormatError(path + ": file too short (" + std::to_string(buf.size()) + " bytes)");
  const std::size_t body = buf.size() - 4;
  detail::Reader tail(buf, buf.size(), path);
  tail.bytes(body, "body");
  const std::uint32_t stored = tail.u32("crc");
  const std::uint32_t actual = detail::crc32_of(buf.data(), body);
  if (stored != actual) {
    char msg[160];
    std::snprintf(msg, sizeof msg, ": CRC mismatch over bytes [0, %zu): stored %08x, computed %08x (crc at offset %zu)",
                  body, stored, actual, body);
    throw CrcError(path + msg);
  }

  detail::Reader r(buf, body, path);
  r.bytes(8, "header");
  const std::uint32_t meta_len = r.u32("metadata length");
  Checkpoint ck;
  try {
    ck.metadata = nlohmann::json::parse(r.bytes(meta_len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": metadata is not valid JSON: " + e.what());
  }
  if (!ck.metadata.is_object()) throw FormatError(path + ": metadata is not a JSON object");
  const std::uint32_t count = r.u32("entry count");
  std::set<std::string> seen;
  const auto seed_it = ck.metadata.find("seed");
  ParameterStore<float> params(seed_it != ck.metadata.end() && seed_it->is_number_unsigned()
                                   ? seed_it->get<std::uint64_t>()
                                   : 0);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.bytes(name_len, "entry name");
    if (!seen.insert(name).second) throw FormatError(path + ": duplicate entry name '" + name + "'");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError(path + ": entry '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(r.u32("dimension"));
      if (shape.back() && n > r.remaining() / shape.back())
        throw FormatError(path + ": entry '" + name + "' dims exceed file size");
      n *= shape.back();
    }
    if (n > r.remaining() / 4) throw FormatError(path + ": entry '" + name + "' data exceeds file size");
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) data[k] = std::bit_cast<float>(r.u32("data"));
    Tensor<float> t(std::move(shape), std::move(data));
    if (!t.all_finite()) throw FormatError(path + ": entry '" + name + "' holds non-finite values");
    if (name.starts_with(kOptimizerPrefix))
      ck.optimizer_state.emplace(name.substr(std::strlen(kOptimizerPrefix)), std::move(t));
    else
      params.add(name, std::move(t));
  }
  if (r.remaining() != 0)
    throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes after last entry");
  ck.params = std::move(params);
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf, path.string());
}

}  // namespace mvt
