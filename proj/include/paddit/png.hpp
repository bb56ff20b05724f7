#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "paddit/grid.hpp"

namespace paddit {

// Minimal deterministic PNG output: fixed encoder settings, no ancillary
// chunks, so identical pixels produce identical files.
void write_png_gray8(const std::filesystem::path& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels);
void write_png_rgb8(const std::filesystem::path& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels);

// Grayscale rendering of a scalar slice, min-max windowed (constant slices
// render mid-gray); label slices use a fixed color table with label 0 black.
void render_preview(const ScalarVolume<2>& vol, const std::filesystem::path& path);
void render_preview(const LabelVolume<2>& vol, const std::filesystem::path& path);
void render_preview(const ScalarVolume<3>& vol, int axis, int index,
                    const std::filesystem::path& path);
void render_preview(const LabelVolume<3>& vol, int axis, int index,
                    const std::filesystem::path& path);

// The 2D plane of a 3D volume at `index` along `axis`; spacing/origin of the
// remaining axes carry over. Out-of-range axis or index is rejected.
ScalarVolume<2> extract_slice(const ScalarVolume<3>& vol, int axis, int index);
LabelVolume<2> extract_slice(const LabelVolume<3>& vol, int axis, int index);

}  // namespace paddit
