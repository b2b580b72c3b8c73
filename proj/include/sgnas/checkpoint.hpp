#pragma once

// Versioned binary container for trained state. Layout (little-endian):
//
//   "SGNASCKP"  u32 version  u64 spec_hash
//   u32 tensor_count, then per tensor:
//     u32 name_len, name, u32 rank, rank x u64 extent, f32 values
//   u32 blob_count, then per blob:
//     u32 name_len, name, u32 byte_len, bytes
//
// Records are written in name order, so identical state gives identical
// bytes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sgnas/binary_io.hpp"
#include "sgnas/random.hpp"
#include "sgnas/tensor.hpp"

namespace sgnas {

struct TensorRecord {
  Shape shape;
  std::vector<float> values;
  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t spec_hash = 0;
  std::map<std::string, TensorRecord> tensors;
  std::map<std::string, std::string> blobs;

  void put(const std::string& name, const Tensor& t) {
    tensors[name] = {t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
  }
  void put(const std::string& name, Shape shape, std::vector<float> values) {
    tensors[name] = {std::move(shape), std::move(values)};
  }

  const TensorRecord& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint has no record '" + name + "'");
    return it->second;
  }

  // Copies record `name` into `t`, which must already have the same shape.
  void load_into(const std::string& name, Tensor& t) const {
    const auto& r = get(name);
    if (r.shape != t.shape())
      throw DimensionError("checkpoint record '" + name + "' has shape " + shape_str(r.shape) +
                           ", expected " + shape_str(t.shape()));
    std::copy(r.values.begin(), r.values.end(), t.mutable_values().begin());
  }

  void load_into(const std::string& name, std::vector<float>& v) const {
    const auto& r = get(name);
    if (r.values.size() != v.size())
      throw DimensionError("checkpoint record '" + name + "' has " + std::to_string(r.values.size()) +
                           " values, expected " + std::to_string(v.size()));
    v = r.values;
  }

  const std::string& blob(const std::string& name) const {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw FormatError("checkpoint has no blob '" + name + "'");
    return it->second;
  }

  void write(std::ostream& os) const {
    os.write("SGNASCKP", 8);
    binio::put_u32(os, kVersion);
    binio::put_u64(os, spec_hash);
    binio::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, rec] : tensors) {
      binio::put_bytes(os, name);
      binio::put_u32(os, static_cast<std::uint32_t>(rec.shape.size()));
      for (auto e : rec.shape) binio::put_u64(os, e);
      for (float v : rec.values) binio::put_f32(os, v);
    }
    binio::put_u32(os, static_cast<std::uint32_t>(blobs.size()));
    for (const auto& [name, bytes] : blobs) {
      binio::put_bytes(os, name);
      binio::put_bytes(os, bytes);
    }
  }

  static Checkpoint read(std::istream& is) {
    char magic[8];
    binio::read_exact(is, magic, 8);
    if (std::string(magic, 8) != "SGNASCKP") throw FormatError("not a checkpoint file");
    const std::uint32_t version = binio::get_u32(is);
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.spec_hash = binio::get_u64(is);
    const std::uint32_t n = binio::get_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = binio::get_bytes(is, 4096);
      TensorRecord rec;
      const std::uint32_t rank = binio::get_u32(is);
      if (rank == 0 || rank > 8) throw FormatError("record '" + name + "' has bad rank");
      for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(binio::get_u64(is));
      const std::size_t count = numel(rec.shape);
      if (count > (1u << 28)) throw FormatError("record '" + name + "' too large");
      rec.values.resize(count);
      for (auto& v : rec.values) v = binio::get_f32(is);
      ck.tensors.emplace(std::move(name), std::move(rec));
    }
    const std::uint32_t nb = binio::get_u32(is);
    for (std::uint32_t i = 0; i < nb; ++i) {
      std::string name = binio::get_bytes(is, 4096);
      ck.blobs.emplace(std::move(name), binio::get_bytes(is));
    }
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write checkpoint " + path.string());
    write(os);
    if (!os) throw FormatError("write failed for checkpoint " + path.string());
  }

  // Loads and, when expected_hash is nonzero, insists on a matching space.
  static Checkpoint load(const std::filesystem::path& path, std::uint64_t expected_hash = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    auto ck = read(is);
    if (expected_hash != 0 && ck.spec_hash != expected_hash)
      throw FormatError("checkpoint " + path.string() + " was written for a different search space");
    return ck;
  }
};

// Text round trip of a generator state, for the "rng" blob.
inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("malformed random generator state");
  return rng;
}

}  // namespace sgnas
