#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace acd {

// A 2D slice of intensities, row-major. Data images live in [0,1]; diffused
// images are flagged clean = false and may leave that range.
struct ImageGrid {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> pixels;
    bool clean = true;

    ImageGrid() = default;
    ImageGrid(int64_t h, int64_t w, float fill = 0.0f, bool is_clean = true);

    static ImageGrid constant(int64_t h, int64_t w, float value) { return ImageGrid(h, w, value); }

    float& at(int64_t row, int64_t col) { return pixels[static_cast<size_t>(row * width + col)]; }
    float at(int64_t row, int64_t col) const { return pixels[static_cast<size_t>(row * width + col)]; }
    int64_t size() const { return height * width; }
    bool same_shape(const ImageGrid& other) const { return height == other.height && width == other.width; }
};

// H x W x D stack of slices; slice c is contiguous (voxels[(c*H + row)*W + col]).
struct Volume {
    int64_t height = 0;
    int64_t width = 0;
    int64_t depth = 0;
    std::vector<float> voxels;

    Volume() = default;
    Volume(int64_t h, int64_t w, int64_t d, float fill = 0.0f);

    float& at(int64_t row, int64_t col, int64_t slice) {
        return voxels[static_cast<size_t>((slice * height + row) * width + col)];
    }
    float at(int64_t row, int64_t col, int64_t slice) const {
        return voxels[static_cast<size_t>((slice * height + row) * width + col)];
    }
    ImageGrid slice(int64_t c) const;
    int64_t size() const { return height * width * depth; }
};

// Label volume, same layout as Volume.
struct LabelVolume {
    int64_t height = 0;
    int64_t width = 0;
    int64_t depth = 0;
    std::vector<uint8_t> labels;

    LabelVolume() = default;
    LabelVolume(int64_t h, int64_t w, int64_t d, uint8_t fill = 0);

    uint8_t& at(int64_t row, int64_t col, int64_t slice) {
        return labels[static_cast<size_t>((slice * height + row) * width + col)];
    }
    uint8_t at(int64_t row, int64_t col, int64_t slice) const {
        return labels[static_cast<size_t>((slice * height + row) * width + col)];
    }
    int64_t count(uint8_t label) const;
};

// [1, 1, H, W] float tensor.
torch::Tensor to_tensor(const ImageGrid& image);
// [N, 1, H, W] float tensor.
torch::Tensor to_tensor(std::span<const ImageGrid> images);
// Accepts [H, W], [1, H, W] or [1, 1, H, W].
ImageGrid from_tensor(const torch::Tensor& tensor, bool clean = true);
// Splits an [N, 1, H, W] batch.
std::vector<ImageGrid> batch_from_tensor(const torch::Tensor& tensor, bool clean = true);

// 8-bit binary PGM, intensities clamped to [0,1] then scaled to 0..255.
void write_pgm(const ImageGrid& image, const std::filesystem::path& path);

} // namespace acd
