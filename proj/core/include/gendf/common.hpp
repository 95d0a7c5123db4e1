#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gendf {

using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid hyperparameter or malformed configuration.
struct ConfigError : Error {
  using Error::Error;
};

// A NaN/Inf surfaced where only finite values are allowed.
struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// FNV-1a over a byte range; used for config digests and the frozen-weight
// immutability check.
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);

}  // namespace gendf
