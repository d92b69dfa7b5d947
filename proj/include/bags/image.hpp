#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bags {

/// Row-major float image, `channels` values per pixel, nominal range [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) *
                   static_cast<std::size_t>(c),
               fill) {}

    std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }
    std::size_t index(int x, int y, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                static_cast<std::size_t>(x)) *
                   static_cast<std::size_t>(channels) +
               static_cast<std::size_t>(c);
    }
    double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
    bool same_shape(const Image& o) const noexcept {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

/// Loads PNG/JPEG into [0, 1]. `channels` is 1 (gray) or 3 (RGB).
Image load_image(const std::filesystem::path& path, int channels);
/// 8-bit PNG, values clamped to [0, 1]. Written atomically.
void save_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(const std::vector<std::uint8_t>& bytes, int channels);

/// Multiplies every RGB pixel by the mask value.
Image apply_mask(const Image& rgb, const Image& mask);

} // namespace bags
