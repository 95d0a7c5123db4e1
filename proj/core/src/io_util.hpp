#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "gendf/common.hpp"

// Little-endian binary stream helpers shared by the dataset and model file
// writers. File formats are defined little-endian; big-endian hosts are not
// supported.
static_assert(std::endian::native == std::endian::little,
              "gendf binary formats assume a little-endian host");

namespace gendf::io {

template <typename T>
void write_pod(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& in, std::size_t& off) {
  if (off + sizeof(T) > in.size()) throw IoError("unexpected end of file");
  T value;
  std::memcpy(&value, in.data() + off, sizeof(T));
  off += sizeof(T);
  return value;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for reading");
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (!f.good() && !f.eof()) throw IoError("read failed for " + path);
  return data;
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f.good()) throw IoError("write failed for " + path);
}

}  // namespace gendf::io
