#include "mmasd/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "json.hpp"
#include "mmasd/binary_io.hpp"
#include "mmasd/preprocess.hpp"
#include "mmasd/tensor.hpp"

namespace mmasd::tracking {

namespace {

// Deep SORT noise conventions, relative to box height.
constexpr double kStdPosition = 1.0 / 20.0;
constexpr double kStdVelocity = 1.0 / 160.0;
constexpr double kMinExtent = 1e-3;
constexpr double kVarianceFloor = 1e-9;
constexpr double kForbidden = 1e6;

using Matrix48 = Eigen::Matrix<double, 4, 8>;
using Vector4 = Eigen::Matrix<double, 4, 1>;

Vector4 to_measurement(const BoundingBox& b)
{
    Vector4 z;
    z << (b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2, b.width(), b.height();
    return z;
}

StateMatrix transition()
{
    StateMatrix f = StateMatrix::Identity();
    for (int i = 0; i < 4; ++i)
        f(i, i + 4) = 1.0;
    return f;
}

Matrix48 observation()
{
    Matrix48 h = Matrix48::Zero();
    for (int i = 0; i < 4; ++i)
        h(i, i) = 1.0;
    return h;
}

void keep_extent_positive(StateVector& mean)
{
    mean(2) = std::max(mean(2), kMinExtent);
    mean(3) = std::max(mean(3), kMinExtent);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size())
        throw DimensionError("appearance vectors differ in length: " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0)
        return 0.0;
    return dot / std::sqrt(na * nb);
}

}  // namespace

BoundingBox clamp_to_frame(const BoundingBox& box, double frame_w, double frame_h)
{
    return {std::clamp(box.x_min, 0.0, frame_w), std::clamp(box.y_min, 0.0, frame_h),
            std::clamp(box.x_max, 0.0, frame_w), std::clamp(box.y_max, 0.0, frame_h)};
}

BoundingBox TrackState::box() const
{
    double w = mean(2), h = mean(3);
    return {mean(0) - w / 2, mean(1) - h / 2, mean(0) + w / 2, mean(1) + h / 2};
}

void TrackerConfig::validate() const
{
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(nms_iou_threshold))
        throw ConfigError("tracker.nms_iou_threshold must lie in [0,1]");
    if (!unit(min_confidence))
        throw ConfigError("tracker.min_confidence must lie in [0,1]");
    if (!unit(lambda))
        throw ConfigError("tracker.lambda must lie in [0,1]");
    if (!(max_cost >= 0.0))
        throw ConfigError("tracker.max_cost must be non-negative");
    if (confirm_hits < 1)
        throw ConfigError("tracker.confirm_hits must be at least 1");
    if (max_misses < 0)
        throw ConfigError("tracker.max_misses must be non-negative");
    if (!(process_noise >= 0.0) || !(measurement_noise >= 0.0))
        throw ConfigError("tracker noise scales must be non-negative");
    if (gallery_size == 0)
        throw ConfigError("tracker.gallery_size must be positive");
}

double iou(const BoundingBox& a, const BoundingBox& b)
{
    double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0 || ih <= 0)
        return 0.0;
    double inter = iw * ih;
    double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold)
{
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });

    std::vector<Detection> kept;
    for (std::size_t i : order) {
        bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return iou(k.bbox, dets[i].bbox) > iou_threshold;
        });
        if (!suppressed)
            kept.push_back(dets[i]);
    }
    return kept;
}

TrackState initiate_state(const BoundingBox& box)
{
    TrackState s;
    s.mean.head<4>() = to_measurement(box);
    keep_extent_positive(s.mean);
    double h = s.mean(3);
    StateVector std_dev;
    std_dev << 2 * kStdPosition * h, 2 * kStdPosition * h, 2 * kStdPosition * h, 2 * kStdPosition * h,
        10 * kStdVelocity * h, 10 * kStdVelocity * h, 10 * kStdVelocity * h, 10 * kStdVelocity * h;
    s.covariance = std_dev.cwiseAbs2().asDiagonal();
    return s;
}

void check_covariance(const StateMatrix& p)
{
    if (!p.allFinite())
        throw StateError("covariance has non-finite entries");
    if ((p - p.transpose()).cwiseAbs().maxCoeff() > 1e-9)
        throw StateError("covariance is not symmetric");
    Eigen::LLT<StateMatrix> llt(p);
    if (llt.info() != Eigen::Success)
        throw StateError("covariance is not positive-definite");
}

TrackState kalman_predict(const TrackState& state, double q_scale)
{
    check_covariance(state.covariance);
    const StateMatrix f = transition();
    TrackState out;
    out.mean = f * state.mean;
    keep_extent_positive(out.mean);

    double h = std::max(state.mean(3), kMinExtent);
    StateVector q;
    for (int i = 0; i < 4; ++i) {
        q(i) = std::pow(kStdPosition * h, 2);
        q(i + 4) = std::pow(kStdVelocity * h, 2);
    }
    out.covariance = f * state.covariance * f.transpose();
    out.covariance.diagonal() += q_scale * q;
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
    return out;
}

TrackState kalman_update(const TrackState& state, const BoundingBox& measurement, double r_scale)
{
    check_covariance(state.covariance);
    const Matrix48 h = observation();
    const Vector4 z = to_measurement(measurement);

    double height = std::max(state.mean(3), kMinExtent);
    Eigen::Matrix4d r = Eigen::Matrix4d::Identity() * (r_scale * std::pow(kStdPosition * height, 2));
    Eigen::Matrix4d s = h * state.covariance * h.transpose() + r;
    Eigen::LLT<Eigen::Matrix4d> llt(s);
    if (llt.info() != Eigen::Success)
        throw StateError("innovation covariance is singular");
    // K = P H^T S^-1, solved as S K^T = H P
    Eigen::Matrix<double, 8, 4> k = llt.solve(h * state.covariance).transpose();

    TrackState out;
    out.mean = state.mean + k * (z - h * state.mean);
    keep_extent_positive(out.mean);
    out.covariance = (StateMatrix::Identity() - k * h) * state.covariance;
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
    // exact measurements collapse positional variance to zero; keep it PD
    for (int i = 0; i < 8; ++i)
        out.covariance(i, i) = std::max(out.covariance(i, i), kVarianceFloor);
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> assignment(const std::vector<std::vector<double>>& cost)
{
    const std::size_t rows = cost.size();
    if (rows == 0 || cost[0].empty())
        return {};
    const std::size_t cols = cost[0].size();
    for (const auto& row : cost)
        if (row.size() != cols)
            throw DimensionError("assignment: ragged cost matrix");

    // Shortest augmenting path (Hungarian with potentials); needs n <= m.
    const bool flip = rows > cols;
    const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
    auto a = [&](std::size_t i, std::size_t j) { return flip ? cost[j - 1][i - 1] : cost[i - 1][j - 1]; };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = inf;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j])
                    continue;
                double cur = a(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0)
            continue;
        if (flip)
            out.emplace_back(j - 1, p[j] - 1);
        else
            out.emplace_back(p[j] - 1, j - 1);
    }
    std::sort(out.begin(), out.end());
    return out;
}

double association_cost(const Track& track, const Detection& det, double lambda)
{
    double best = -1.0;
    for (const auto& g : track.gallery)
        best = std::max(best, cosine(g, det.appearance));
    if (track.gallery.empty())
        best = 0.0;
    double appearance = 1.0 - best;
    double motion = 1.0 - iou(track.state.box(), det.bbox);
    return lambda * appearance + (1.0 - lambda) * motion;
}

Association associate(const std::vector<const Track*>& tracks, const std::vector<Detection>& dets,
                      const TrackerConfig& cfg)
{
    Association result;
    std::vector<std::vector<double>> cost(tracks.size(), std::vector<double>(dets.size()));
    for (std::size_t t = 0; t < tracks.size(); ++t)
        for (std::size_t d = 0; d < dets.size(); ++d) {
            double c = association_cost(*tracks[t], dets[d], cfg.lambda);
            cost[t][d] = c > cfg.max_cost ? kForbidden : c;
        }

    std::vector<bool> track_done(tracks.size(), false), det_done(dets.size(), false);
    for (auto [t, d] : assignment(cost)) {
        if (cost[t][d] >= kForbidden)
            continue;
        result.matches.emplace_back(t, d);
        track_done[t] = true;
        det_done[d] = true;
    }
    for (std::size_t t = 0; t < tracks.size(); ++t)
        if (!track_done[t])
            result.unmatched_tracks.push_back(t);
    for (std::size_t d = 0; d < dets.size(); ++d)
        if (!det_done[d])
            result.unmatched_detections.push_back(d);
    return result;
}

Tracker::Tracker(TrackerConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
}

void Tracker::step(std::uint32_t frame_index, const std::vector<Detection>& detections)
{
    if (last_frame_ && frame_index <= *last_frame_)
        throw UsageError("tracker: frame " + std::to_string(frame_index) + " does not follow frame " +
                         std::to_string(*last_frame_));
    last_frame_ = frame_index;

    std::vector<Detection> confident;
    for (const auto& d : detections)
        if (d.confidence >= cfg_.min_confidence && d.bbox.valid())
            confident.push_back(d);
    std::vector<Detection> dets = nms(confident, cfg_.nms_iou_threshold);

    std::vector<std::size_t> live;
    std::vector<const Track*> views;
    for (std::size_t i = 0; i < tracks_.size(); ++i) {
        if (!tracks_[i].live())
            continue;
        tracks_[i].state = kalman_predict(tracks_[i].state, cfg_.process_noise);
        live.push_back(i);
        views.push_back(&tracks_[i]);
    }

    Association assoc = associate(views, dets, cfg_);

    for (auto [t, d] : assoc.matches) {
        Track& track = tracks_[live[t]];
        track.state = kalman_update(track.state, dets[d].bbox, cfg_.measurement_noise);
        ++track.hits;
        ++track.consecutive_hits;
        track.misses = 0;
        track.gallery.push_back(dets[d].appearance);
        while (track.gallery.size() > cfg_.gallery_size)
            track.gallery.pop_front();
        if (track.status == TrackStatus::tentative && track.consecutive_hits >= cfg_.confirm_hits) {
            track.status = TrackStatus::confirmed;
            track.was_confirmed = true;
        }
        track.history.push_back({frame_index, track.state.box(), false});
    }
    for (std::size_t t : assoc.unmatched_tracks) {
        Track& track = tracks_[live[t]];
        ++track.misses;
        track.consecutive_hits = 0;
        track.history.push_back({frame_index, track.state.box(), true});
        if (track.misses > cfg_.max_misses)
            track.status = TrackStatus::deleted;
    }
    for (std::size_t d : assoc.unmatched_detections) {
        Track track;
        track.id = next_id_++;
        track.state = initiate_state(dets[d].bbox);
        track.gallery.push_back(dets[d].appearance);
        track.hits = 1;
        track.consecutive_hits = 1;
        if (cfg_.confirm_hits <= 1) {
            track.status = TrackStatus::confirmed;
            track.was_confirmed = true;
        }
        track.history.push_back({frame_index, track.state.box(), false});
        tracks_.push_back(std::move(track));
    }
}

std::vector<TrackedBox> covered_frames(const Track& track)
{
    auto last = std::find_if(track.history.rbegin(), track.history.rend(),
                             [](const TrackedBox& b) { return !b.coasting; });
    if (last == track.history.rend())
        return {};
    return {track.history.begin(), last.base()};
}

std::vector<PersonClip> crop_tracks(const Clip& video, const std::vector<Track>& tracks, std::size_t out_size,
                                    std::ostream* warnings)
{
    if (out_size == 0)
        throw ConfigError("crop size must be positive");
    std::vector<PersonClip> out;
    const double fw = static_cast<double>(video.width), fh = static_cast<double>(video.height);
    for (const auto& track : tracks) {
        if (!track.was_confirmed)
            continue;
        std::vector<TrackedBox> frames = covered_frames(track);
        if (frames.empty()) {
            if (warnings)
                *warnings << "warning: track " << track.id << " has no covered frames, skipped\n";
            continue;
        }
        std::vector<Image> crops;
        crops.reserve(frames.size());
        for (const auto& tb : frames) {
            if (tb.frame_index >= video.frames)
                throw DimensionError("track " + std::to_string(track.id) + " covers frame " +
                                     std::to_string(tb.frame_index) + " beyond the video's " +
                                     std::to_string(video.frames) + " frames");
            BoundingBox b = clamp_to_frame(tb.bbox, fw, fh);
            auto x0 = static_cast<std::size_t>(std::lround(b.x_min));
            auto y0 = static_cast<std::size_t>(std::lround(b.y_min));
            auto x1 = static_cast<std::size_t>(std::lround(b.x_max));
            auto y1 = static_cast<std::size_t>(std::lround(b.y_max));
            // at least one pixel, kept inside the frame
            x0 = std::min(x0, video.width - 1);
            y0 = std::min(y0, video.height - 1);
            x1 = std::clamp(x1, x0 + 1, video.width);
            y1 = std::clamp(y1, y0 + 1, video.height);

            Image crop(video.channels, y1 - y0, x1 - x0);
            for (std::size_t c = 0; c < video.channels; ++c)
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x)
                        crop.at(c, y - y0, x - x0) = video.at(tb.frame_index, c, y, x);
            crops.push_back(preprocess::resize_frame(crop, out_size, out_size));
        }
        out.push_back({track.id, frames.front().frame_index, Clip::from_frames(crops)});
    }
    return out;
}

namespace io {

std::vector<Detection> read_detections(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw mmasd::io::IoError(path.string() + ": cannot open");
    std::vector<Detection> dets;
    std::string text;
    std::size_t line = 0;
    std::size_t dim = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error&) {
            throw ParseError(line, "invalid JSON");
        }
        try {
            Detection d;
            long long frame = j.at("frame").get<long long>();
            if (frame < 0 || frame > std::numeric_limits<std::uint32_t>::max())
                throw ParseError(line, "frame out of range");
            d.frame_index = static_cast<std::uint32_t>(frame);
            auto box = j.at("bbox").get<std::vector<double>>();
            if (box.size() != 4)
                throw ParseError(line, "bbox needs 4 numbers");
            d.bbox = {box[0], box[1], box[2], box[3]};
            if (!d.bbox.valid())
                throw ParseError(line, "bbox must satisfy x0 < x1 and y0 < y1");
            d.confidence = j.at("conf").get<double>();
            if (!(d.confidence >= 0.0 && d.confidence <= 1.0))
                throw ParseError(line, "conf must lie in [0,1]");
            d.appearance = j.at("feat").get<std::vector<double>>();
            if (d.appearance.empty())
                throw ParseError(line, "feat is empty");
            if (dim == 0)
                dim = d.appearance.size();
            else if (d.appearance.size() != dim)
                throw ParseError(line, "feat has " + std::to_string(d.appearance.size()) + " entries, expected " +
                                           std::to_string(dim));
            double norm = 0;
            for (double v : d.appearance)
                norm += v * v;
            if (std::abs(std::sqrt(norm) - 1.0) > 1e-3)
                throw ParseError(line, "feat must have unit L2 norm");
            // stored f32 loses precision; renormalize
            for (double& v : d.appearance)
                v /= std::sqrt(norm);
            dets.push_back(std::move(d));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line, e.what());
        }
    }
    return dets;
}

void write_tracks(const std::filesystem::path& path, const std::vector<Track>& tracks)
{
    std::ofstream out(path);
    if (!out)
        throw mmasd::io::IoError(path.string() + ": cannot open for writing");
    struct Row {
        std::uint32_t frame;
        int id;
        BoundingBox box;
    };
    std::vector<Row> rows;
    for (const auto& t : tracks) {
        if (!t.was_confirmed)
            continue;
        for (const auto& tb : covered_frames(t))
            rows.push_back({tb.frame_index, t.id, tb.bbox});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return a.frame != b.frame ? a.frame < b.frame : a.id < b.id;
    });
    for (const auto& r : rows) {
        nlohmann::json j = {{"frame", r.frame},
                            {"track_id", r.id},
                            {"bbox", {r.box.x_min, r.box.y_min, r.box.x_max, r.box.y_max}}};
        out << j.dump() << '\n';
    }
}

}  // namespace io

}  // namespace mmasd::tracking
