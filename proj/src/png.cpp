#include "paddit/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "paddit/errors.hpp"
#include "paddit/io.hpp"

namespace paddit {
namespace {

void push_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void push_chunk(std::vector<std::uint8_t>& out, const char type[4],
                const std::vector<std::uint8_t>& data) {
  push_u32_be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
  push_u32_be(out, crc);
}

std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& bytes) {
  z_stream strm{};
  if (deflateInit(&strm, 6) != Z_OK) throw io_error("deflate initialization failed");
  std::vector<std::uint8_t> out;
  strm.next_in = const_cast<Bytef*>(bytes.data());
  strm.avail_in = static_cast<uInt>(bytes.size());
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  do {
    strm.next_out = chunk;
    strm.avail_out = sizeof(chunk);
    rc = deflate(&strm, Z_FINISH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      deflateEnd(&strm);
      throw io_error("deflate failed");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - strm.avail_out));
  } while (rc != Z_STREAM_END);
  deflateEnd(&strm);
  return out;
}

void write_png(const std::filesystem::path& path, int width, int height,
               int channels, const std::vector<std::uint8_t>& pixels) {
  if (width < 1 || height < 1) throw std::invalid_argument("empty PNG image");
  const std::size_t row = static_cast<std::size_t>(width) * channels;
  if (pixels.size() != row * static_cast<std::size_t>(height))
    throw std::invalid_argument("pixel buffer size mismatch");

  std::vector<std::uint8_t> filtered;
  filtered.reserve((row + 1) * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    filtered.push_back(0);  // filter type none
    filtered.insert(filtered.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * row),
                    pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * row));
  }

  std::vector<std::uint8_t> ihdr;
  push_u32_be(ihdr, static_cast<std::uint32_t>(width));
  push_u32_be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                                    // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);                // gray / truecolor
  ihdr.push_back(0);                                    // compression
  ihdr.push_back(0);                                    // filter
  ihdr.push_back(0);                                    // no interlace

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", zlib_deflate(filtered));
  push_chunk(out, "IEND", {});
  detail::write_file(path, out);
}

// fixed table for label rendering; label 0 stays black, others cycle
constexpr std::uint8_t kLabelColors[][3] = {
    {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
    {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
    {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
};
constexpr int kLabelColorCount = static_cast<int>(std::size(kLabelColors));

}  // namespace

void write_png_gray8(const std::filesystem::path& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels) {
  write_png(path, width, height, 1, pixels);
}

void write_png_rgb8(const std::filesystem::path& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels) {
  write_png(path, width, height, 3, pixels);
}

void render_preview(const ScalarVolume<2>& vol, const std::filesystem::path& path) {
  const auto& g = vol.geometry();
  double lo = vol[0], hi = vol[0];
  for (std::size_t i = 0; i < vol.size(); ++i) {
    lo = std::min(lo, vol[i]);
    hi = std::max(hi, vol[i]);
  }
  const double range = hi - lo;
  std::vector<std::uint8_t> pixels(vol.size());
  // image row y on screen = grid row y; PNG rows run top to bottom
  for (int y = 0; y < g.dims[1]; ++y)
    for (int x = 0; x < g.dims[0]; ++x) {
      const double v = vol[g.linear({x, y})];
      const double t = range > 0.0 ? (v - lo) / range : 0.5;
      pixels[static_cast<std::size_t>(y) * g.dims[0] + x] =
          static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
    }
  write_png_gray8(path, g.dims[0], g.dims[1], pixels);
}

void render_preview(const LabelVolume<2>& vol, const std::filesystem::path& path) {
  const auto& g = vol.geometry();
  std::vector<std::uint8_t> pixels(vol.size() * 3);
  for (int y = 0; y < g.dims[1]; ++y)
    for (int x = 0; x < g.dims[0]; ++x) {
      const std::int32_t label = vol[g.linear({x, y})];
      std::uint8_t rgb[3] = {0, 0, 0};
      if (label > 0) {
        const auto& c = kLabelColors[(label - 1) % kLabelColorCount];
        rgb[0] = c[0];
        rgb[1] = c[1];
        rgb[2] = c[2];
      }
      const std::size_t at = (static_cast<std::size_t>(y) * g.dims[0] + x) * 3;
      pixels[at] = rgb[0];
      pixels[at + 1] = rgb[1];
      pixels[at + 2] = rgb[2];
    }
  write_png_rgb8(path, g.dims[0], g.dims[1], pixels);
}

namespace {

template <typename Volume>
auto slice_impl(const Volume& vol, int axis, int index) {
  const auto& g = vol.geometry();
  if (axis < 0 || axis > 2)
    throw std::invalid_argument("slice axis must be 0, 1, or 2");
  if (index < 0 || index >= g.dims[axis])
    throw std::invalid_argument("slice index " + std::to_string(index) +
                                " out of range for axis " + std::to_string(axis) +
                                " with extent " + std::to_string(g.dims[axis]));
  const int keep[2] = {axis == 0 ? 1 : 0, axis == 2 ? 1 : 2};
  GridGeometry<2> sg;
  for (int a = 0; a < 2; ++a) {
    sg.dims[a] = g.dims[keep[a]];
    sg.spacing[a] = g.spacing[keep[a]];
    sg.origin[a] = g.origin[keep[a]];
  }
  std::vector<std::decay_t<decltype(vol[0])>> values(sg.voxel_count());
  GridIndex<3> src;
  src[axis] = index;
  for (int v = 0; v < sg.dims[1]; ++v)
    for (int u = 0; u < sg.dims[0]; ++u) {
      src[keep[0]] = u;
      src[keep[1]] = v;
      values[sg.linear({u, v})] = vol[g.linear(src)];
    }
  return std::make_pair(sg, std::move(values));
}

}  // namespace

ScalarVolume<2> extract_slice(const ScalarVolume<3>& vol, int axis, int index) {
  auto [sg, values] = slice_impl(vol, axis, index);
  return ScalarVolume<2>(sg, std::move(values));
}

LabelVolume<2> extract_slice(const LabelVolume<3>& vol, int axis, int index) {
  auto [sg, values] = slice_impl(vol, axis, index);
  return LabelVolume<2>(sg, std::move(values));
}

void render_preview(const ScalarVolume<3>& vol, int axis, int index,
                    const std::filesystem::path& path) {
  render_preview(extract_slice(vol, axis, index), path);
}

void render_preview(const LabelVolume<3>& vol, int axis, int index,
                    const std::filesystem::path& path) {
  render_preview(extract_slice(vol, axis, index), path);
}

}  // namespace paddit
