#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "tstcnn/tensor.hpp"

namespace tstcnn {

/// Malformed or truncated serialized data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/**
 * Tensor wire format, all fields little-endian:
 *
 *   u32 rank | u32 element width in bytes (4 = f32, 8 = f64) |
 *   u64 extent x rank | values, row-major
 *
 * Only values and shape are stored; gradients and requires_grad are not.
 */
template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

/// Reads a tensor written with the same element width.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);

/// File helpers; save_tensor writes to a temporary and renames so a reader
/// never observes a partial file.
template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::string& path);

/// Writes `bytes` to path via a temporary file and atomic rename.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace tstcnn
