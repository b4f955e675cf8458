#pragma once

// 2-D slices of volumes and masks, and their PNG encoding.

#include "bwm/grid.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace bwm {

Axis axis_from_name(const std::string& name);
std::string axis_name(Axis a);

// Number of slices along `axis`.
int slice_count(Shape3 s, Axis axis);

// Rows/cols of a slice: axial (y, x), coronal (z, x), sagittal (z, y).
std::array<int, 2> slice_extent(Shape3 s, Axis axis);

// Linear voxel index of pixel (r, c) of slice `index`.
long slice_voxel(Shape3 s, Axis axis, int index, int r, int c);

// 8-bit RGB pixels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

// Fixed overlay colours for ED, ET and NET; background is left untouched.
inline constexpr std::array<std::array<std::uint8_t, 3>, 3> kOverlayColours{{{60, 200, 60}, {230, 40, 40}, {60, 110, 240}}};
inline constexpr float kOverlayAlpha = 0.45f;

// Grey-level slice of one channel, intensities [-1, 1] -> [0, 255], with the
// mask's non-background classes alpha-composited on top when `overlay` is set.
Image render_slice(const Volume& v, int channel, Axis axis, int index, const SegMask* overlay = nullptr);

// Label colours only (background black).
Image render_mask(const SegMask& m, Axis axis, int index);

std::vector<std::uint8_t> encode_png(const Image& img);

}  // namespace bwm
