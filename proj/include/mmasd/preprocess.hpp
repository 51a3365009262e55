#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmasd/clip.hpp"

namespace mmasd::preprocess {

/// Raised when modality data or labels violate the sample contract. The
/// message names the offending field.
class ValidationError : public std::invalid_argument {
public:
    ValidationError(std::string field, const std::string& what)
        : std::invalid_argument(field + ": " + what), field_(std::move(field))
    {
    }
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

inline constexpr std::size_t kSkeletonFrames = 180;
inline constexpr std::size_t kDefaultJoints = 33;
inline constexpr std::size_t kMeshVertices = 6890;
inline constexpr std::size_t kClipFrames = 40;
inline constexpr std::size_t kClipSize = 100;
inline constexpr std::size_t kActionClasses = 11;
inline constexpr double kAugmentAngles[] = {5.0, 10.0, -5.0, -10.0};

/// frames x joints x (x, y, z), row-major.
struct SkeletonSequence {
    std::size_t frames = 0, joints = 0;
    std::vector<double> coords;

    double& at(std::size_t f, std::size_t j, std::size_t k) { return coords[(f * joints + j) * 3 + k]; }
    double at(std::size_t f, std::size_t j, std::size_t k) const { return coords[(f * joints + j) * 3 + k]; }
    bool operator==(const SkeletonSequence&) const = default;
};

/// frames x vertices x (x, y, z), row-major.
struct MeshSequence {
    std::size_t frames = 0, vertices = 0;
    std::vector<float> coords;

    float at(std::size_t f, std::size_t v, std::size_t k) const { return coords[(f * vertices + v) * 3 + k]; }
};

struct Sample {
    std::string id;
    Clip flow_clip;  // 40 x 3 x 100 x 100
    Clip mesh_clip;  // 40 x 3 x 100 x 100
    SkeletonSequence skeleton;  // 180 x J x 3
    int action_label = 0;
    int asd_label = 0;
};

/// Truncate to 180 frames, or cycle frames 0, 1, 2, ... until 180.
SkeletonSequence standardize_skeleton(const SkeletonSequence& seq);

/// Uniform selection idx_k = floor(k * F / n).
std::vector<std::size_t> sample_indices(std::size_t frames, std::size_t n);
Clip sample_frames(const Clip& clip, std::size_t n);

/// Bilinear, half-pixel centered; output clamped to [0,1].
Image resize_frame(const Image& frame, std::size_t out_h, std::size_t out_w);
Clip resize_clip(const Clip& clip, std::size_t out_h, std::size_t out_w);

struct RasterOptions {
    std::size_t resolution = kClipSize;
    double radius_px = 1.0;
    std::size_t output_frames = kClipFrames;  // 0 keeps every frame
};

/// Orthographic XY projection with one clip-wide affine map, black vertex
/// disks on white, gray replicated to 3 channels, then sampled to 40 frames.
Clip rasterize_mesh(const MeshSequence& mesh, const RasterOptions& options = {});

/// Rotates every frame about its center; uncovered pixels take the mean of
/// the frame's border (per channel).
Clip rotate_clip(const Clip& clip, double angle_deg);
/// Rotates each joint's (x, y) about that frame's joint centroid; z unchanged.
SkeletonSequence rotate_skeleton(const SkeletonSequence& seq, double angle_deg);

/// Sample with all modalities rotated by the same angle; labels unchanged.
Sample augment(const Sample& sample, double angle_deg);

/// Samples flow/mesh to 40 frames at 100x100, standardizes the skeleton and
/// checks label ranges.
Sample build_sample(const Clip& flow_frames, const Clip& mesh_clip, const SkeletonSequence& skeleton,
                    int action_label, int asd_label, std::string id = {});
Sample build_sample(const Clip& flow_frames, const MeshSequence& mesh, const SkeletonSequence& skeleton,
                    int action_label, int asd_label, std::string id = {});

/// Shape and label checks of an assembled sample.
void validate_sample(const Sample& sample);

namespace io {

/// One row per frame with 3*J numeric columns; J is inferred.
SkeletonSequence read_skeleton_csv(const std::filesystem::path& path);
void write_skeleton_csv(const std::filesystem::path& path, const SkeletonSequence& seq);

/// "MMM1", u32 frame count, u32 vertex count (6890), f32 triples.
MeshSequence read_mesh(const std::filesystem::path& path);
void write_mesh(const std::filesystem::path& path, const MeshSequence& mesh);

struct LabelRow {
    std::string clip_id;
    int action_label;
    int asd_label;
};
/// Sidecar CSV `clip_id,action_label,asd_label` (header optional).
std::vector<LabelRow> read_labels(const std::filesystem::path& path);

}  // namespace io

}  // namespace mmasd::preprocess
