#include "acd/image.hpp"

#include "acd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace acd {

ImageGrid::ImageGrid(int64_t h, int64_t w, float fill, bool is_clean)
    : height(h), width(w), pixels(static_cast<size_t>(h * w), fill), clean(is_clean) {
    if (h <= 0 || w <= 0)
        throw UsageError("ImageGrid dimensions must be positive");
}

Volume::Volume(int64_t h, int64_t w, int64_t d, float fill)
    : height(h), width(w), depth(d), voxels(static_cast<size_t>(h * w * d), fill) {
    if (h <= 0 || w <= 0 || d <= 0)
        throw UsageError("Volume dimensions must be positive");
}

ImageGrid Volume::slice(int64_t c) const {
    if (c < 0 || c >= depth)
        throw UsageError("slice index " + std::to_string(c) + " out of range");
    ImageGrid out(height, width);
    auto first = voxels.begin() + static_cast<std::ptrdiff_t>(c * height * width);
    std::copy(first, first + static_cast<std::ptrdiff_t>(height * width), out.pixels.begin());
    return out;
}

LabelVolume::LabelVolume(int64_t h, int64_t w, int64_t d, uint8_t fill)
    : height(h), width(w), depth(d), labels(static_cast<size_t>(h * w * d), fill) {
    if (h <= 0 || w <= 0 || d <= 0)
        throw UsageError("LabelVolume dimensions must be positive");
}

int64_t LabelVolume::count(uint8_t label) const {
    return std::count(labels.begin(), labels.end(), label);
}

torch::Tensor to_tensor(const ImageGrid& image) {
    auto t = torch::empty({1, 1, image.height, image.width}, torch::kFloat32);
    std::copy(image.pixels.begin(), image.pixels.end(), t.data_ptr<float>());
    return t;
}

torch::Tensor to_tensor(std::span<const ImageGrid> images) {
    if (images.empty())
        throw UsageError("cannot build a tensor from an empty image list");
    const auto h = images.front().height;
    const auto w = images.front().width;
    auto t = torch::empty({static_cast<int64_t>(images.size()), 1, h, w}, torch::kFloat32);
    float* dst = t.data_ptr<float>();
    for (const auto& img : images) {
        if (img.height != h || img.width != w)
            throw UsageError("images in a batch must share one shape");
        dst = std::copy(img.pixels.begin(), img.pixels.end(), dst);
    }
    return t;
}

ImageGrid from_tensor(const torch::Tensor& tensor, bool clean) {
    auto t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    while (t.dim() > 2) {
        if (t.size(0) != 1)
            throw UsageError("from_tensor expects a single image");
        t = t.squeeze(0);
    }
    if (t.dim() != 2)
        throw UsageError("from_tensor expects a 2D image");
    ImageGrid out(t.size(0), t.size(1), 0.0f, clean);
    std::copy(t.data_ptr<float>(), t.data_ptr<float>() + t.numel(), out.pixels.begin());
    return out;
}

std::vector<ImageGrid> batch_from_tensor(const torch::Tensor& tensor, bool clean) {
    if (tensor.dim() != 4 || tensor.size(1) != 1)
        throw UsageError("batch_from_tensor expects [N, 1, H, W]");
    std::vector<ImageGrid> out;
    out.reserve(static_cast<size_t>(tensor.size(0)));
    for (int64_t i = 0; i < tensor.size(0); ++i)
        out.push_back(from_tensor(tensor[i], clean));
    return out;
}

void write_pgm(const ImageGrid& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot open " + path.string() + " for writing");
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), [](float v) {
        const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
        return static_cast<unsigned char>(std::lround(c * 255.0f));
    });
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw DataError("failed writing " + path.string());
}

} // namespace acd
