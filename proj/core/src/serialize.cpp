#include "tstcnn/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace tstcnn {
namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b;
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> b;
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size()))
    throw FormatError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void write_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  auto n = read_u64(is);
  if (n > (1ull << 32)) throw FormatError("string length " + std::to_string(n) + " too large");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n)))
    throw FormatError("unexpected end of stream in string");
  return s;
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  write_u32(os, sizeof(T));
  for (auto e : t.shape()) write_u64(os, e);
  for (T v : t.data()) put_le(os, std::bit_cast<Bits<T>>(v));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  auto rank = read_u32(is);
  auto width = read_u32(is);
  if (rank == 0 || rank > 16) throw FormatError("invalid tensor rank " + std::to_string(rank));
  if (width != sizeof(T))
    throw FormatError("tensor element width " + std::to_string(width) + " but reader expects " +
                      std::to_string(sizeof(T)));
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = read_u64(is);
    if (e == 0 || e > (1ull << 40)) throw FormatError("invalid tensor extent");
    n *= e;
  }
  std::vector<T> values(n);
  for (auto& v : values) v = std::bit_cast<T>(get_le<Bits<T>>(is));
  return Tensor<T>(std::move(shape), std::move(values));
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  write_file_atomic(path, os.str());
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor<T>(is);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&);
template Tensor<double> load_tensor(const std::string&);

}  // namespace tstcnn
