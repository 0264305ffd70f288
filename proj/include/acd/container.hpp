#pragma once

#include "acd/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace acd {

// Volume files: 16-byte header (magic "ACD1", then H, W, D as u32 LE)
// followed by H*W*D little-endian float32 voxels. Label files share the
// header and carry one byte per voxel.
inline constexpr std::array<char, 4> kVolumeMagic{'A', 'C', 'D', '1'};
inline constexpr size_t kVolumeHeaderBytes = 16;

void write_volume(const Volume& volume, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);
void write_labels(const LabelVolume& labels, const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);

// Checkpoint parameter bundles: magic "ACKP", u32 array count, then per array
// u32 name length, name bytes, u32 rank, rank x u32 dims, float32 payload.
inline constexpr std::array<char, 4> kBundleMagic{'A', 'C', 'K', 'P'};

struct NamedArray {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> values;
};

void write_array_bundle(const std::vector<NamedArray>& arrays, const std::filesystem::path& path);
std::vector<NamedArray> read_array_bundle(const std::filesystem::path& path);

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);

} // namespace acd
