#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "mmasd/clip.hpp"

namespace mmasd::flow {

/// Single-channel frame, row-major.
struct GrayFrame {
    std::size_t width = 0, height = 0;
    std::vector<double> values;

    GrayFrame() = default;
    GrayFrame(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), values(w * h, fill) {}

    double& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

/// Per-pixel quadratic model x^T A x + b^T x + c in local coordinates
/// (x to the right, y down).
struct PolyExpansion {
    std::size_t width = 0, height = 0;
    std::vector<double> a11, a12, a22, b1, b2, c;
};

struct FlowField {
    std::size_t width = 0, height = 0;
    std::vector<double> u, v;

    FlowField() = default;
    FlowField(std::size_t w, std::size_t h) : width(w), height(h), u(w * h, 0.0), v(w * h, 0.0) {}
};

struct FlowConfig {
    std::size_t pyramid_levels = 3;
    double pyramid_scale = 0.5;
    std::size_t window_size = 15;
    std::size_t iterations = 3;
    std::size_t poly_n = 5;
    double poly_sigma = 1.1;

    /// Throws ConfigError on invalid values.
    void validate() const;
};

inline constexpr std::size_t kMinPyramidExtent = 8;

/// Gaussian blur then bilinear resample to round(extent * scale).
GrayFrame downsample(const GrayFrame& frame, double scale);

PolyExpansion poly_expansion(const GrayFrame& frame, std::size_t poly_n, double poly_sigma);

/// Refines `prior` by `iterations` passes of the windowed displacement solve,
/// warping the second expansion by the current estimate each pass.
FlowField displacement_step(const PolyExpansion& e1, const PolyExpansion& e2, const FlowField& prior,
                            std::size_t window_size, std::size_t iterations);

/// Coarse-to-fine flow from f1 to f2: f2(x + d(x)) ~ f1(x).
FlowField farneback(const GrayFrame& f1, const GrayFrame& f2, const FlowConfig& cfg = {});

/// Channel-mean (or single channel) of one frame.
GrayFrame to_gray(const Image& image);
/// Bilinear resample of a flow field; displacements multiplied by `gain`.
FlowField resize_flow(const FlowField& flow, std::size_t width, std::size_t height, double gain);

/// Angle to hue, magnitude / max(max_magnitude, 1e-6) to value, saturation 1.
Image colorize(const FlowField& flow, double max_magnitude);
double max_magnitude(const FlowField& flow);

/// Flow between every consecutive pair of frames (F-1 fields). Pairs run on
/// up to `jobs` threads.
std::vector<FlowField> clip_flow(const Clip& video, const FlowConfig& cfg = {}, std::size_t jobs = 1);
/// Colorized clip with one magnitude normalization shared across all fields.
Clip colorize_clip(const std::vector<FlowField>& fields);

namespace io {

/// "MMF1", u32 width, u32 height, f32 u-plane, f32 v-plane.
void write_flow(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flow(const std::filesystem::path& path);

}  // namespace io

}  // namespace mmasd::flow
