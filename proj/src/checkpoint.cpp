#include "slrf/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace slrf {

namespace {

// The on-disk format is little-endian; this engine targets little-endian
// hosts, so writes are plain memory dumps.
template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail_io("checkpoint truncated");
  return v;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Array& value) {
  records.emplace_back(name, value.dtype() == Dtype::F32 ? value.clone()
                                                         : value.astype(Dtype::F32));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, v] : records)
    if (n == name) return true;
  return false;
}

const Array& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, v] : records)
    if (n == name) return v;
  fail_io("checkpoint record not found: " + name);
}

void Checkpoint::save(const std::string& path) const {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail_io("cannot write checkpoint file: " + tmp);
    os.write("SLRF", 4);
    put<uint32_t>(os, kVersion);
    for (const auto& [name, value] : records) {
      put<uint32_t>(os, static_cast<uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<uint32_t>(os, static_cast<uint32_t>(value.ndim()));
      for (int64_t d : value.shape()) put<uint64_t>(os, static_cast<uint64_t>(d));
      auto span = value.cdata<float>();
      os.write(reinterpret_cast<const char*>(span.data()),
               static_cast<std::streamsize>(span.size() * sizeof(float)));
    }
    if (!os) fail_io("write failure on checkpoint file: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail_io("cannot move checkpoint into place: " + path + ": " + ec.message());
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_io("cannot open checkpoint file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SLRF", 4) != 0)
    fail_io("not a checkpoint file (bad magic): " + path);
  uint32_t version = take<uint32_t>(is);
  if (version != kVersion)
    fail_io("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  while (true) {
    uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) fail_io("checkpoint truncated");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = take<uint32_t>(is);
    std::vector<int64_t> shape(rank);
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int64_t>(take<uint64_t>(is));
      n *= shape[i];
    }
    std::vector<float> data(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) fail_io("checkpoint truncated in record: " + name);
    ck.records.emplace_back(name, Array::from_f32(std::move(data), std::move(shape)));
  }
  return ck;
}

}  // namespace slrf
