#pragma once

#include <string>
#include <utility>
#include <vector>

#include "slrf/array.hpp"

namespace slrf {

// Checkpoint container: magic "SLRF", u32 format version, then repeated
// records of (u32 name length, UTF-8 name, u32 rank, u64 dims, f32 payload),
// all little-endian. Round-trips float payloads bit-exactly.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  std::vector<std::pair<std::string, Array>> records;

  void add(const std::string& name, const Array& value);  // stored as f32
  bool has(const std::string& name) const;
  const Array& get(const std::string& name) const;

  void save(const std::string& path) const;         // atomic (tmp + rename)
  static Checkpoint load(const std::string& path);
};

}  // namespace slrf
