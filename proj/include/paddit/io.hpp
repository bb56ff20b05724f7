#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "paddit/grid.hpp"

namespace paddit {

// Volume I/O. Two formats, chosen by extension:
//   *.json            raw sidecar: JSON header + little-endian .bin payload
//                     (float32 images, uint16 labels, x fastest)
//   *.nii, *.nii.gz   NIfTI-1 single-file, gzip optional
// Gzip output is written with a fixed stream header (zero mtime) so that
// identical volumes produce identical bytes.

// Number of spatial axes stored at `path` (2 or 3), for runtime dispatch.
int volume_rank(const std::filesystem::path& path);

template <std::size_t N>
ScalarVolume<N> load_image(const std::filesystem::path& path);
template <std::size_t N>
LabelVolume<N> load_labels(const std::filesystem::path& path);

template <std::size_t N>
void save_image(const ScalarVolume<N>& vol, const std::filesystem::path& path);
template <std::size_t N>
void save_labels(const LabelVolume<N>& vol, const std::filesystem::path& path);

extern template ScalarVolume<2> load_image<2>(const std::filesystem::path&);
extern template ScalarVolume<3> load_image<3>(const std::filesystem::path&);
extern template LabelVolume<2> load_labels<2>(const std::filesystem::path&);
extern template LabelVolume<3> load_labels<3>(const std::filesystem::path&);
extern template void save_image<2>(const ScalarVolume<2>&,
                                   const std::filesystem::path&);
extern template void save_image<3>(const ScalarVolume<3>&,
                                   const std::filesystem::path&);
extern template void save_labels<2>(const LabelVolume<2>&,
                                    const std::filesystem::path&);
extern template void save_labels<3>(const LabelVolume<3>&,
                                    const std::filesystem::path&);

namespace detail {

// Whole-file helpers shared by the formats; gunzip applied when the gzip
// magic is present.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_file_maybe_gzip(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> gzip_compress(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> gzip_decompress(const std::vector<std::uint8_t>& bytes);

}  // namespace detail

}  // namespace paddit
