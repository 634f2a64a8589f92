#pragma once

#include "flowood/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flowood {

// Decoded raster: planar [C,H,W], integer sample values in 0..255 stored as
// doubles so they feed the quantized-pixel pipeline directly.
struct Image {
    std::int64_t channels = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<double> pixels;

    double& at(std::int64_t c, std::int64_t y, std::int64_t x) {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    double at(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
};

// Dispatches on file extension: .png or .ppm (binary P6). 8-bit output;
// palette/16-bit/alpha PNGs are normalized, grayscale stays single channel.
Image read_image(const std::string& path);

Image read_png(const std::string& path);
Image read_ppm(const std::string& path);

// img is [C,H,W] with C 1 or 3, values in [0,1]; clamped and quantized to
// 8 bits. Encoder settings are fixed so identical tensors give identical
// bytes.
void write_png(const std::string& path, const Tensor& img);
void write_ppm(const std::string& path, const Tensor& img); // always P6 (RGB)

// 1 <-> 3 channels: replication up, channel mean (luminance) down.
Image convert_channels(const Image& src, std::int64_t channels);

// Center-crop to the largest square multiple of extent, then box-average
// down to extent x extent, rounding back to integer samples. Rejects images
// smaller than extent.
Image fit_to_extent(const Image& src, std::int64_t extent);

Tensor image_to_tensor(const Image& img); // [C,H,W]

} // namespace flowood
