#include "bwm/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace bwm {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("unexpected end of binary stream");
  return to_little(v);
}

}  // namespace

void write_f32_grid(const std::filesystem::path& path, const Eigen::ArrayXXf& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::vector<float> buf(static_cast<std::size_t>(data.cols()));
  for (Eigen::Index c = 0; c < data.rows(); ++c) {
    for (Eigen::Index v = 0; v < data.cols(); ++v) buf[static_cast<std::size_t>(v)] = to_little(data(c, v));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Eigen::ArrayXXf read_f32_grid(const std::filesystem::path& path, Eigen::Index channels, Eigen::Index voxels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto expected = static_cast<std::uintmax_t>(channels * voxels) * sizeof(float);
  if (std::filesystem::file_size(path) != expected)
    throw std::runtime_error("size mismatch in " + path.string() + ": expected " + std::to_string(expected) + " bytes");
  Eigen::ArrayXXf data(channels, voxels);
  std::vector<float> buf(static_cast<std::size_t>(voxels));
  for (Eigen::Index c = 0; c < channels; ++c) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw std::runtime_error("short read in " + path.string());
    for (Eigen::Index v = 0; v < voxels; ++v) data(c, v) = to_little(buf[static_cast<std::size_t>(v)]);
  }
  return data;
}

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void write_f64(std::ostream& out, double v) { put(out, v); }
std::uint32_t read_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return get<std::uint64_t>(in); }
double read_f64(std::istream& in) { return get<double>(in); }

}  // namespace bwm
