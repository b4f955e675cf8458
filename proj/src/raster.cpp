#include "bwm/raster.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bwm {

Axis axis_from_name(const std::string& name) {
  if (name == "axial") return Axis::axial;
  if (name == "coronal") return Axis::coronal;
  if (name == "sagittal") return Axis::sagittal;
  throw std::invalid_argument("unknown axis '" + name + "' (expected axial, coronal or sagittal)");
}

std::string axis_name(Axis a) {
  switch (a) {
    case Axis::axial: return "axial";
    case Axis::coronal: return "coronal";
    case Axis::sagittal: return "sagittal";
  }
  return "?";
}

int slice_count(Shape3 s, Axis axis) {
  switch (axis) {
    case Axis::axial: return s.depth;
    case Axis::coronal: return s.height;
    case Axis::sagittal: return s.width;
  }
  return 0;
}

std::array<int, 2> slice_extent(Shape3 s, Axis axis) {
  switch (axis) {
    case Axis::axial: return {s.height, s.width};
    case Axis::coronal: return {s.depth, s.width};
    case Axis::sagittal: return {s.depth, s.height};
  }
  return {0, 0};
}

long slice_voxel(Shape3 s, Axis axis, int index, int r, int c) {
  switch (axis) {
    case Axis::axial: return s.index(index, r, c);
    case Axis::coronal: return s.index(r, index, c);
    case Axis::sagittal: return s.index(r, c, index);
  }
  return 0;
}

namespace {

void check_index(Shape3 s, Axis axis, int index) {
  const int n = slice_count(s, axis);
  if (index < 0 || index >= n)
    throw std::out_of_range(axis_name(axis) + " slice " + std::to_string(index) + " outside [0, " +
                            std::to_string(n - 1) + "]");
}

}  // namespace

Image render_slice(const Volume& v, int channel, Axis axis, int index, const SegMask* overlay) {
  if (channel < 0 || channel >= Volume::kChannels)
    throw std::out_of_range("channel " + std::to_string(channel) + " outside [0, 2]");
  check_index(v.shape, axis, index);
  if (overlay && !(overlay->shape == v.shape)) throw std::invalid_argument("render_slice: overlay shape mismatch");
  const auto [rows, cols] = slice_extent(v.shape, axis);
  Image img{cols, rows, std::vector<std::uint8_t>(static_cast<std::size_t>(rows) * cols * 3)};
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const long vox = slice_voxel(v.shape, axis, index, r, c);
      const float g = std::clamp((v.data(channel, vox) + 1.0f) * 127.5f, 0.0f, 255.0f);
      float px[3] = {g, g, g};
      if (overlay) {
        const int label = overlay->label(vox);
        if (label > 0)
          for (int k = 0; k < 3; ++k)
            px[k] = (1 - kOverlayAlpha) * px[k] + kOverlayAlpha * kOverlayColours[static_cast<std::size_t>(label - 1)][k];
      }
      auto* out = &img.rgb[(static_cast<std::size_t>(r) * cols + c) * 3];
      for (int k = 0; k < 3; ++k) out[k] = static_cast<std::uint8_t>(std::lround(px[k]));
    }
  return img;
}

Image render_mask(const SegMask& m, Axis axis, int index) {
  check_index(m.shape, axis, index);
  const auto [rows, cols] = slice_extent(m.shape, axis);
  Image img{cols, rows, std::vector<std::uint8_t>(static_cast<std::size_t>(rows) * cols * 3, 0)};
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int label = m.label(slice_voxel(m.shape, axis, index, r, c));
      if (label > 0)
        std::copy_n(kOverlayColours[static_cast<std::size_t>(label - 1)].begin(), 3,
                    &img.rgb[(static_cast<std::size_t>(r) * cols + c) * 3]);
    }
  return img;
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.width <= 0 || img.height <= 0 || img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw std::invalid_argument("encode_png: inconsistent image");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("encode_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("encode_png: libpng error");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + n);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int r = 0; r < img.height; ++r)
    rows[static_cast<std::size_t>(r)] = const_cast<png_bytep>(&img.rgb[static_cast<std::size_t>(r) * img.width * 3]);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace bwm
