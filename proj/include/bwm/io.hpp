#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

namespace bwm {

// Raw little-endian float32 grids stored channel-major: all voxels of channel 0,
// then channel 1, and so on. `data` has one row per channel.
void write_f32_grid(const std::filesystem::path& path, const Eigen::ArrayXXf& data);
Eigen::ArrayXXf read_f32_grid(const std::filesystem::path& path, Eigen::Index channels, Eigen::Index voxels);

// Little-endian primitive encoding for binary containers.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);

}  // namespace bwm
