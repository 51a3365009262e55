#include "mmasd/clip.hpp"

#include <algorithm>
#include <stdexcept>

#include "mmasd/binary_io.hpp"

namespace mmasd {

Image Clip::frame(std::size_t i) const
{
    Image img(channels, height, width);
    auto begin = values.begin() + static_cast<std::ptrdiff_t>(i * frame_size());
    std::copy(begin, begin + static_cast<std::ptrdiff_t>(frame_size()), img.values.begin());
    return img;
}

void Clip::set_frame(std::size_t i, const Image& image)
{
    if (image.channels != channels || image.height != height || image.width != width)
        throw std::invalid_argument("set_frame: image shape does not match clip");
    std::copy(image.values.begin(), image.values.end(),
              values.begin() + static_cast<std::ptrdiff_t>(i * frame_size()));
}

Clip Clip::from_frames(const std::vector<Image>& frames)
{
    if (frames.empty())
        throw std::invalid_argument("from_frames: no frames");
    const Image& first = frames.front();
    Clip clip(frames.size(), first.channels, first.height, first.width);
    for (std::size_t i = 0; i < frames.size(); ++i)
        clip.set_frame(i, frames[i]);
    return clip;
}

namespace io {

void write_clip(const std::filesystem::path& path, const Clip& clip)
{
    mmasd::io::BinaryWriter out(path);
    out.magic("MMC1");
    for (auto v : {clip.frames, clip.channels, clip.height, clip.width})
        out.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    out.put_all(clip.values);
}

Clip read_clip(const std::filesystem::path& path)
{
    mmasd::io::BinaryReader in(path);
    in.expect_magic("MMC1");
    Clip clip;
    clip.frames = in.get<std::uint32_t>();
    clip.channels = in.get<std::uint32_t>();
    clip.height = in.get<std::uint32_t>();
    clip.width = in.get<std::uint32_t>();
    if (clip.frames == 0 || clip.channels == 0 || clip.height == 0 || clip.width == 0)
        throw mmasd::io::IoError(path.string() + ": clip extents must be positive");
    clip.values = in.get_all<float>(clip.frames * clip.frame_size());
    in.expect_end();
    return clip;
}

}  // namespace io

}  // namespace mmasd
