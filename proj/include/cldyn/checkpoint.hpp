#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cldyn/tensor.hpp"

namespace cldyn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

/// Ordered (name, tensor) pairs; the unit of serialization and checksums.
using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <typename T>
void write_pod(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(const std::string& buf, size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw IoError("checkpoint truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::uint32_t crc32_of(const void* data, size_t len, std::uint32_t seed = 0) {
  return static_cast<std::uint32_t>(
      ::crc32(seed, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

}  // namespace detail

/// CRC32 over the raw value bytes of a parameter set, in list order. Used
/// for the frozen-parameter contracts.
inline std::uint32_t params_crc32(const NamedTensorList& tensors) {
  std::uint32_t crc = 0;
  for (const auto& [name, t] : tensors) {
    crc = detail::crc32_of(name.data(), name.size(), crc);
    crc = detail::crc32_of(t.data().data(), t.data().size() * sizeof(double), crc);
  }
  return crc;
}

/// Layout: "CLDN" | u32 version | u32 config_hash | module id | tensor table
/// (name, rank, dims, byte offset) | u64 payload size | f64 payload | u32 CRC
/// of everything before it.
inline void save_checkpoint(const std::string& path, const std::string& module_id,
                            const NamedTensorList& tensors, std::uint32_t config_hash = 0) {
  std::string buf;
  buf.append("CLDN", 4);
  detail::write_pod<std::uint32_t>(buf, 1);
  detail::write_pod<std::uint32_t>(buf, config_hash);
  detail::write_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(module_id.size()));
  buf.append(module_id);
  detail::write_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    detail::write_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    detail::write_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(t.shape().rank));
    for (int i = 0; i < t.shape().rank; ++i)
      detail::write_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(t.shape()[i]));
    detail::write_pod<std::uint64_t>(buf, offset);
    offset += t.data().size() * sizeof(double);
  }
  detail::write_pod<std::uint64_t>(buf, offset);
  for (const auto& [name, t] : tensors)
    buf.append(reinterpret_cast<const char*>(t.data().data()), t.data().size() * sizeof(double));
  const std::uint32_t crc = detail::crc32_of(buf.data(), buf.size());
  detail::write_pod<std::uint32_t>(buf, crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to " + path);
}

inline NamedTensorList load_checkpoint(const std::string& path, const std::string& expected_module_id,
                                       std::uint32_t* config_hash_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 4 + 4 + 8 + 4) throw IoError("checkpoint too small: " + path);

  size_t pos = buf.size() - sizeof(std::uint32_t);
  const std::uint32_t stored_crc = detail::read_pod<std::uint32_t>(buf, pos);
  const std::uint32_t actual_crc = detail::crc32_of(buf.data(), buf.size() - sizeof(std::uint32_t));
  if (stored_crc != actual_crc) throw IoError("checkpoint CRC mismatch in " + path);

  pos = 0;
  if (buf.compare(0, 4, "CLDN") != 0) throw IoError("bad checkpoint magic in " + path);
  pos = 4;
  const auto version = detail::read_pod<std::uint32_t>(buf, pos);
  if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto config_hash = detail::read_pod<std::uint32_t>(buf, pos);
  if (config_hash_out) *config_hash_out = config_hash;
  const auto id_len = detail::read_pod<std::uint32_t>(buf, pos);
  if (pos + id_len > buf.size()) throw IoError("checkpoint truncated");
  const std::string module_id = buf.substr(pos, id_len);
  pos += id_len;
  if (module_id != expected_module_id)
    throw IoError("checkpoint module id '" + module_id + "' does not match expected '" +
                  expected_module_id + "'");

  const auto count = detail::read_pod<std::uint32_t>(buf, pos);
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(buf, pos);
    if (pos + name_len > buf.size()) throw IoError("checkpoint truncated");
    Entry e;
    e.name = buf.substr(pos, name_len);
    pos += name_len;
    const auto rank = detail::read_pod<std::uint32_t>(buf, pos);
    if (rank > 4) throw IoError("checkpoint tensor rank > 4");
    std::initializer_list<long> empty{};
    (void)empty;
    std::vector<long> dims(rank);
    for (auto& d : dims) d = static_cast<long>(detail::read_pod<std::uint32_t>(buf, pos));
    switch (rank) {
      case 0: e.shape = Shape{}; break;
      case 1: e.shape = Shape{dims[0]}; break;
      case 2: e.shape = Shape{dims[0], dims[1]}; break;
      case 3: e.shape = Shape{dims[0], dims[1], dims[2]}; break;
      default: e.shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
    }
    e.offset = detail::read_pod<std::uint64_t>(buf, pos);
    entries.push_back(std::move(e));
  }
  const auto payload_size = detail::read_pod<std::uint64_t>(buf, pos);
  if (pos + payload_size + sizeof(std::uint32_t) != buf.size())
    throw IoError("checkpoint payload size mismatch in " + path);

  NamedTensorList out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    const size_t n = static_cast<size_t>(e.shape.numel());
    if (e.offset + n * sizeof(double) > payload_size)
      throw IoError("checkpoint tensor '" + e.name + "' extends past payload");
    std::vector<double> data(n);
    std::memcpy(data.data(), buf.data() + pos + e.offset, n * sizeof(double));
    out.emplace_back(e.name, Tensor::from_data(e.shape, std::move(data)));
  }
  return out;
}

/// Copies loaded values into an existing parameter structure by name,
/// preserving the destination's requires_grad flags. Every destination name
/// must be present with a matching shape.
inline void load_into(const NamedTensorList& loaded, const NamedTensorList& dest) {
  for (const auto& [name, t] : dest) {
    const Tensor* src = nullptr;
    for (const auto& [lname, lt] : loaded)
      if (lname == name) {
        src = &lt;
        break;
      }
    if (!src) throw IoError("checkpoint missing tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw IoError("checkpoint tensor '" + name + "' shape " + src->shape().str() +
                    " does not match " + t.shape().str());
    const_cast<Tensor&>(t).data() = src->data();
  }
}

}  // namespace cldyn
