#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stainsep {

// Dense H x W x C raster, row-major (row, col, channel). Used for RGB
// patches (C=3, values in [0,1]), optical density planes and
// concentration maps (C=K, values >= 0).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> values;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), values(static_cast<size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return values[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return values[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    size_t size() const { return values.size(); }
    bool same_dims(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

class ImageError : public std::runtime_error {
public:
    explicit ImageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace stainsep
