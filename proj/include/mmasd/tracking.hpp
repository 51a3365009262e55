#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mmasd/clip.hpp"

namespace mmasd::tracking {

struct BoundingBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool valid() const { return x_min < x_max && y_min < y_max; }
};

BoundingBox clamp_to_frame(const BoundingBox& box, double frame_w, double frame_h);

struct Detection {
    std::uint32_t frame_index = 0;
    BoundingBox bbox;
    double confidence = 0.0;
    std::vector<double> appearance;  // unit L2 norm
};

using StateVector = Eigen::Matrix<double, 8, 1>;
using StateMatrix = Eigen::Matrix<double, 8, 8>;

/// Constant-velocity state (cx, cy, w, h, vcx, vcy, vw, vh).
struct TrackState {
    StateVector mean = StateVector::Zero();
    StateMatrix covariance = StateMatrix::Identity();

    BoundingBox box() const;
};

enum class TrackStatus { tentative, confirmed, deleted };

struct TrackedBox {
    std::uint32_t frame_index;
    BoundingBox bbox;
    bool coasting;  // predicted only, no matching detection
};

struct Track {
    int id = 0;
    TrackState state;
    std::deque<std::vector<double>> gallery;  // most recent last, capped
    int hits = 0;
    int consecutive_hits = 0;
    int misses = 0;
    TrackStatus status = TrackStatus::tentative;
    bool was_confirmed = false;  // survives deletion
    std::vector<TrackedBox> history;

    bool live() const { return status != TrackStatus::deleted; }
};

struct TrackerConfig {
    double nms_iou_threshold = 0.5;
    double min_confidence = 0.4;
    double lambda = 0.8;  // weight of the appearance term in the association cost
    double max_cost = 0.7;
    int confirm_hits = 3;
    int max_misses = 30;
    double process_noise = 1.0;
    double measurement_noise = 1.0;
    std::size_t gallery_size = 50;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy suppression in confidence order (ties: lower input index first).
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

/// New-track state centered on a detection, velocities zero.
TrackState initiate_state(const BoundingBox& box);

/// Raises StateError if the covariance is not symmetric positive-definite.
void check_covariance(const StateMatrix& p);

TrackState kalman_predict(const TrackState& state, double q_scale);
TrackState kalman_update(const TrackState& state, const BoundingBox& measurement, double r_scale);

/// Optimal min-cost matching of size min(rows, cols).
std::vector<std::pair<std::size_t, std::size_t>> assignment(const std::vector<std::vector<double>>& cost);

struct Association {
    std::vector<std::pair<std::size_t, std::size_t>> matches;  // (track, detection)
    std::vector<std::size_t> unmatched_tracks;
    std::vector<std::size_t> unmatched_detections;
};

/// Blended appearance/overlap cost, gated at max_cost. `tracks` must hold
/// predicted states.
double association_cost(const Track& track, const Detection& det, double lambda);
Association associate(const std::vector<const Track*>& tracks, const std::vector<Detection>& dets,
                      const TrackerConfig& cfg);

class Tracker {
public:
    explicit Tracker(TrackerConfig cfg = {});

    /// Processes one frame. Frames must arrive in strictly increasing order.
    void step(std::uint32_t frame_index, const std::vector<Detection>& detections);

    const std::vector<Track>& tracks() const { return tracks_; }
    const TrackerConfig& config() const { return cfg_; }

private:
    TrackerConfig cfg_;
    std::vector<Track> tracks_;
    int next_id_ = 1;
    std::optional<std::uint32_t> last_frame_;
};

/// Covered frames of a confirmed track: from its first to its last
/// detection-backed frame, with coasting frames in between.
std::vector<TrackedBox> covered_frames(const Track& track);

struct PersonClip {
    int track_id;
    std::uint32_t first_frame;
    Clip clip;
};

/// Per-person clips for every track that reached confirmation; crops are resized to
/// out_size x out_size. Tracks without covered frames are skipped (warned
/// on `warnings` when given).
std::vector<PersonClip> crop_tracks(const Clip& video, const std::vector<Track>& tracks,
                                    std::size_t out_size = 100, std::ostream* warnings = nullptr);

namespace io {

/// JSON Lines: {"frame": u32, "bbox": [x0,y0,x1,y1], "conf": f32, "feat": [...]}.
/// Raises ParseError carrying the 1-based line number on malformed input.
std::vector<Detection> read_detections(const std::filesystem::path& path);

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line)
    {
    }
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// JSON Lines {"frame", "track_id", "bbox"} for covered frames of confirmed tracks.
void write_tracks(const std::filesystem::path& path, const std::vector<Track>& tracks);

}  // namespace io

}  // namespace mmasd::tracking
