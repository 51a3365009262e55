#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace mmasd {

/// One frame, planar channel-major (C x H x W), values nominally in [0,1].
struct Image {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> values;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
        : channels(c), height(h), width(w), values(c * h * w, fill)
    {
    }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
};

/// Video clip stored frame-major (F x C x H x W), matching the MMC1 layout.
struct Clip {
    std::size_t frames = 0, channels = 0, height = 0, width = 0;
    std::vector<float> values;

    Clip() = default;
    Clip(std::size_t f, std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
        : frames(f), channels(c), height(h), width(w), values(f * c * h * w, fill)
    {
    }

    std::size_t frame_size() const { return channels * height * width; }
    Image frame(std::size_t i) const;
    void set_frame(std::size_t i, const Image& image);
    static Clip from_frames(const std::vector<Image>& frames);

    float& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x)
    {
        return values[((f * channels + c) * height + y) * width + x];
    }
    float at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const
    {
        return values[((f * channels + c) * height + y) * width + x];
    }

    bool operator==(const Clip&) const = default;
};

namespace io {

/// "MMC1", u32 F, C, H, W, f32 payload.
void write_clip(const std::filesystem::path& path, const Clip& clip);
Clip read_clip(const std::filesystem::path& path);

}  // namespace io

}  // namespace mmasd
