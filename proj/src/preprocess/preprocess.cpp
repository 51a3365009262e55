#include "mmasd/preprocess.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mmasd/binary_io.hpp"

namespace mmasd::preprocess {

SkeletonSequence standardize_skeleton(const SkeletonSequence& seq)
{
    if (seq.frames == 0 || seq.joints == 0)
        throw ValidationError("skeleton", "empty sequence");
    if (seq.coords.size() != seq.frames * seq.joints * 3)
        throw ValidationError("skeleton", "coordinate count does not match frames x joints x 3");
    SkeletonSequence out{kSkeletonFrames, seq.joints, {}};
    out.coords.reserve(kSkeletonFrames * seq.joints * 3);
    const std::size_t row = seq.joints * 3;
    for (std::size_t f = 0; f < kSkeletonFrames; ++f) {
        auto src = seq.coords.begin() + static_cast<std::ptrdiff_t>((f % seq.frames) * row);
        out.coords.insert(out.coords.end(), src, src + static_cast<std::ptrdiff_t>(row));
    }
    return out;
}

std::vector<std::size_t> sample_indices(std::size_t frames, std::size_t n)
{
    std::vector<std::size_t> idx(n);
    for (std::size_t k = 0; k < n; ++k)
        idx[k] = k * frames / n;
    return idx;
}

Clip sample_frames(const Clip& clip, std::size_t n)
{
    if (clip.frames == 0 || n == 0)
        throw std::invalid_argument("sample_frames: clip and target count must be non-empty");
    Clip out(n, clip.channels, clip.height, clip.width);
    auto idx = sample_indices(clip.frames, n);
    const auto fs = static_cast<std::ptrdiff_t>(clip.frame_size());
    for (std::size_t k = 0; k < n; ++k)
        std::copy(clip.values.begin() + static_cast<std::ptrdiff_t>(idx[k]) * fs,
                  clip.values.begin() + static_cast<std::ptrdiff_t>(idx[k] + 1) * fs,
                  out.values.begin() + static_cast<std::ptrdiff_t>(k) * fs);
    return out;
}

Image resize_frame(const Image& frame, std::size_t out_h, std::size_t out_w)
{
    if (out_h == 0 || out_w == 0 || frame.height == 0 || frame.width == 0)
        throw std::invalid_argument("resize_frame: extents must be positive");
    Image out(frame.channels, out_h, out_w);
    const double sy = static_cast<double>(frame.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(frame.width) / static_cast<double>(out_w);
    const double max_y = static_cast<double>(frame.height - 1);
    const double max_x = static_cast<double>(frame.width - 1);
    for (std::size_t y = 0; y < out_h; ++y) {
        double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
        auto y0 = static_cast<std::size_t>(fy);
        std::size_t y1 = std::min(y0 + 1, frame.height - 1);
        double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
            auto x0 = static_cast<std::size_t>(fx);
            std::size_t x1 = std::min(x0 + 1, frame.width - 1);
            double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < frame.channels; ++c) {
                double top = (1.0 - wx) * frame.at(c, y0, x0) + wx * frame.at(c, y0, x1);
                double bottom = (1.0 - wx) * frame.at(c, y1, x0) + wx * frame.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>(std::clamp((1.0 - wy) * top + wy * bottom, 0.0, 1.0));
            }
        }
    }
    return out;
}

Clip resize_clip(const Clip& clip, std::size_t out_h, std::size_t out_w)
{
    Clip out(clip.frames, clip.channels, out_h, out_w);
    for (std::size_t f = 0; f < clip.frames; ++f)
        out.set_frame(f, resize_frame(clip.frame(f), out_h, out_w));
    return out;
}

Clip rasterize_mesh(const MeshSequence& mesh, const RasterOptions& options)
{
    if (mesh.frames == 0 || mesh.vertices == 0)
        throw ValidationError("mesh", "empty mesh sequence");
    if (mesh.coords.size() != mesh.frames * mesh.vertices * 3)
        throw ValidationError("mesh", "coordinate count does not match frames x vertices x 3");
    const std::size_t res = options.resolution;

    double x_min = mesh.coords[0], x_max = x_min, y_min = mesh.coords[1], y_max = y_min;
    for (std::size_t i = 0; i < mesh.frames * mesh.vertices; ++i) {
        double x = mesh.coords[i * 3], y = mesh.coords[i * 3 + 1];
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
    }
    double span = std::max(x_max - x_min, y_max - y_min);
    if (!(span > 0.0))
        throw ValidationError("mesh", "degenerate bounding box (all vertices coincide in XY)");

    // Bounding-box center lands on the pixel center res/2; the longer side
    // covers 90% of the frame (5% margin each side), aspect preserved.
    const double scale = 0.9 * static_cast<double>(res - 1) / span;
    const double origin = static_cast<double>(res / 2);
    const double cx = 0.5 * (x_min + x_max), cy = 0.5 * (y_min + y_max);
    const double r = options.radius_px;
    const long last = static_cast<long>(res) - 1;

    Clip raw(mesh.frames, 3, res, res, 1.0f);
    for (std::size_t f = 0; f < mesh.frames; ++f) {
        Image gray(1, res, res, 1.0f);
        for (std::size_t v = 0; v < mesh.vertices; ++v) {
            double px = origin + (mesh.at(f, v, 0) - cx) * scale;
            double py = origin - (mesh.at(f, v, 1) - cy) * scale;
            long pc = std::clamp(std::lround(px), 0L, last);
            long pr = std::clamp(std::lround(py), 0L, last);
            gray.at(0, static_cast<std::size_t>(pr), static_cast<std::size_t>(pc)) = 0.0f;
            long r0 = std::max(0L, static_cast<long>(std::ceil(py - r)));
            long r1 = std::min(last, static_cast<long>(std::floor(py + r)));
            long c0 = std::max(0L, static_cast<long>(std::ceil(px - r)));
            long c1 = std::min(last, static_cast<long>(std::floor(px + r)));
            for (long row = r0; row <= r1; ++row)
                for (long col = c0; col <= c1; ++col) {
                    double dx = static_cast<double>(col) - px, dy = static_cast<double>(row) - py;
                    if (dx * dx + dy * dy <= r * r)
                        gray.at(0, static_cast<std::size_t>(row), static_cast<std::size_t>(col)) = 0.0f;
                }
        }
        for (std::size_t c = 0; c < 3; ++c)
            std::copy(gray.values.begin(), gray.values.end(),
                      raw.values.begin() + static_cast<std::ptrdiff_t>((f * 3 + c) * res * res));
    }
    return options.output_frames ? sample_frames(raw, options.output_frames) : raw;
}

namespace {

Image rotate_image(const Image& img, double angle_deg)
{
    const double theta = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double cx = 0.5 * static_cast<double>(img.width - 1);
    const double cy = 0.5 * static_cast<double>(img.height - 1);
    const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
    constexpr double tol = 1e-6;

    std::vector<double> fill(img.channels, 0.0);
    for (std::size_t c = 0; c < img.channels; ++c) {
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x)
                if (y == 0 || x == 0 || y + 1 == img.height || x + 1 == img.width) {
                    total += img.at(c, y, x);
                    ++count;
                }
        fill[c] = total / static_cast<double>(count);
    }

    Image out(img.channels, img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            double sx = cx + dx * cs - dy * sn;
            double sy = cy + dx * sn + dy * cs;
            if (sx < -tol || sy < -tol || sx > max_x + tol || sy > max_y + tol) {
                for (std::size_t c = 0; c < img.channels; ++c)
                    out.at(c, y, x) = static_cast<float>(fill[c]);
                continue;
            }
            sx = std::clamp(sx, 0.0, max_x);
            sy = std::clamp(sy, 0.0, max_y);
            auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
            std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
            double wx = sx - static_cast<double>(x0), wy = sy - static_cast<double>(y0);
            for (std::size_t c = 0; c < img.channels; ++c) {
                double top = (1.0 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
                double bottom = (1.0 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1.0 - wy) * top + wy * bottom);
            }
        }
    return out;
}

}  // namespace

Clip rotate_clip(const Clip& clip, double angle_deg)
{
    if (!std::isfinite(angle_deg))
        throw std::invalid_argument("rotate_clip: angle must be finite");
    if (angle_deg == 0.0)
        return clip;  // exact identity, no resampling round-off
    Clip out(clip.frames, clip.channels, clip.height, clip.width);
    for (std::size_t f = 0; f < clip.frames; ++f)
        out.set_frame(f, rotate_image(clip.frame(f), angle_deg));
    return out;
}

SkeletonSequence rotate_skeleton(const SkeletonSequence& seq, double angle_deg)
{
    if (!std::isfinite(angle_deg))
        throw std::invalid_argument("rotate_skeleton: angle must be finite");
    if (angle_deg == 0.0)
        return seq;
    const double theta = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    SkeletonSequence out = seq;
    for (std::size_t f = 0; f < seq.frames; ++f) {
        double cx = 0.0, cy = 0.0;
        for (std::size_t j = 0; j < seq.joints; ++j) {
            cx += seq.at(f, j, 0);
            cy += seq.at(f, j, 1);
        }
        cx /= static_cast<double>(seq.joints);
        cy /= static_cast<double>(seq.joints);
        for (std::size_t j = 0; j < seq.joints; ++j) {
            double dx = seq.at(f, j, 0) - cx, dy = seq.at(f, j, 1) - cy;
            out.at(f, j, 0) = cx + dx * cs - dy * sn;
            out.at(f, j, 1) = cy + dx * sn + dy * cs;
        }
    }
    return out;
}

Sample augment(const Sample& sample, double angle_deg)
{
    Sample out;
    out.id = sample.id + "@rot" + std::to_string(static_cast<int>(std::lround(angle_deg)));
    out.flow_clip = rotate_clip(sample.flow_clip, angle_deg);
    out.mesh_clip = rotate_clip(sample.mesh_clip, angle_deg);
    out.skeleton = rotate_skeleton(sample.skeleton, angle_deg);
    out.action_label = sample.action_label;
    out.asd_label = sample.asd_label;
    return out;
}

namespace {

void check_labels(int action_label, int asd_label)
{
    if (action_label < 0 || action_label >= static_cast<int>(kActionClasses))
        throw ValidationError("action_label", "must be in 0..10, got " + std::to_string(action_label));
    if (asd_label != 0 && asd_label != 1)
        throw ValidationError("asd_label", "must be 0 or 1, got " + std::to_string(asd_label));
}

Clip standardize_clip(const Clip& clip, const char* field)
{
    if (clip.frames == 0 || clip.height == 0 || clip.width == 0)
        throw ValidationError(field, "empty clip");
    if (clip.channels != 3)
        throw ValidationError(field, "expected 3 channels, got " + std::to_string(clip.channels));
    return resize_clip(sample_frames(clip, kClipFrames), kClipSize, kClipSize);
}

}  // namespace

Sample build_sample(const Clip& flow_frames, const Clip& mesh_clip, const SkeletonSequence& skeleton,
                    int action_label, int asd_label, std::string id)
{
    check_labels(action_label, asd_label);
    if (skeleton.frames == 0 || skeleton.joints == 0)
        throw ValidationError("skeleton", "empty sequence");
    Sample s;
    s.id = std::move(id);
    s.flow_clip = standardize_clip(flow_frames, "flow_clip");
    s.mesh_clip = standardize_clip(mesh_clip, "mesh_clip");
    s.skeleton = standardize_skeleton(skeleton);
    s.action_label = action_label;
    s.asd_label = asd_label;
    return s;
}

Sample build_sample(const Clip& flow_frames, const MeshSequence& mesh, const SkeletonSequence& skeleton,
                    int action_label, int asd_label, std::string id)
{
    check_labels(action_label, asd_label);
    if (mesh.vertices != kMeshVertices)
        throw ValidationError("mesh", "expected " + std::to_string(kMeshVertices) + " vertices per frame, got " +
                                          std::to_string(mesh.vertices));
    return build_sample(flow_frames, rasterize_mesh(mesh), skeleton, action_label, asd_label, std::move(id));
}

void validate_sample(const Sample& s)
{
    check_labels(s.action_label, s.asd_label);
    auto check_clip = [](const Clip& c, const char* field) {
        if (c.frames != kClipFrames || c.channels != 3 || c.height != kClipSize || c.width != kClipSize)
            throw ValidationError(field, "expected 40x3x100x100 clip");
        if (c.values.size() != c.frames * c.frame_size())
            throw ValidationError(field, "payload size mismatch");
        for (float v : c.values)
            if (!(v >= 0.0f && v <= 1.0f))
                throw ValidationError(field, "values must lie in [0,1]");
    };
    check_clip(s.flow_clip, "flow_clip");
    check_clip(s.mesh_clip, "mesh_clip");
    if (s.skeleton.frames != kSkeletonFrames || s.skeleton.joints == 0 ||
        s.skeleton.coords.size() != s.skeleton.frames * s.skeleton.joints * 3)
        throw ValidationError("skeleton", "expected 180 standardized frames");
}

// ---------------------------------------------------------------------------

namespace io {

namespace {

std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ','))
        cells.push_back(cell);
    if (!line.empty() && line.back() == ',')
        cells.emplace_back();
    return cells;
}

std::string trim(std::string s)
{
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

bool parse_double(const std::string& text, double& out)
{
    std::string t = trim(text);
    if (t.empty())
        return false;
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size() && std::isfinite(out);
}

bool parse_int(const std::string& text, int& out)
{
    std::string t = trim(text);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    return ec == std::errc() && ptr == t.data() + t.size() && !t.empty();
}

}  // namespace

SkeletonSequence read_skeleton_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw mmasd::io::IoError("cannot open " + path.string());
    SkeletonSequence seq;
    std::string line;
    std::size_t line_no = 0;
    std::size_t columns = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty())
            continue;
        auto cells = split_csv(line);
        std::vector<double> row;
        bool numeric = true;
        for (const auto& c : cells) {
            double v;
            if (!parse_double(c, v)) {
                numeric = false;
                break;
            }
            row.push_back(v);
        }
        if (!numeric) {
            if (seq.frames == 0 && columns == 0 && line_no == 1)
                continue;  // header
            throw ValidationError("skeleton", path.string() + ":" + std::to_string(line_no) + ": non-numeric cell");
        }
        if (columns == 0) {
            columns = row.size();
            if (columns % 3 != 0)
                throw ValidationError("skeleton", path.string() + ": column count " + std::to_string(columns) +
                                                      " is not divisible by 3");
        } else if (row.size() != columns) {
            throw ValidationError("skeleton", path.string() + ":" + std::to_string(line_no) + ": expected " +
                                                  std::to_string(columns) + " columns");
        }
        seq.coords.insert(seq.coords.end(), row.begin(), row.end());
        ++seq.frames;
    }
    seq.joints = columns / 3;
    if (seq.frames == 0)
        throw ValidationError("skeleton", path.string() + ": no frames");
    return seq;
}

void write_skeleton_csv(const std::filesystem::path& path, const SkeletonSequence& seq)
{
    std::ofstream out(path);
    if (!out)
        throw mmasd::io::IoError("cannot write " + path.string());
    char buf[32];
    for (std::size_t f = 0; f < seq.frames; ++f) {
        for (std::size_t i = 0; i < seq.joints * 3; ++i) {
            auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, seq.coords[f * seq.joints * 3 + i]);
            if (i)
                out << ',';
            out.write(buf, ptr - buf);
        }
        out << '\n';
    }
    if (!out)
        throw mmasd::io::IoError("write failed for " + path.string());
}

MeshSequence read_mesh(const std::filesystem::path& path)
{
    mmasd::io::BinaryReader in(path);
    in.expect_magic("MMM1");
    MeshSequence mesh;
    mesh.frames = in.get<std::uint32_t>();
    mesh.vertices = in.get<std::uint32_t>();
    if (mesh.vertices != kMeshVertices)
        throw ValidationError("mesh", path.string() + ": vertex count " + std::to_string(mesh.vertices) +
                                          ", expected " + std::to_string(kMeshVertices));
    if (mesh.frames == 0)
        throw ValidationError("mesh", path.string() + ": no frames");
    mesh.coords = in.get_all<float>(mesh.frames * mesh.vertices * 3);
    in.expect_end();
    return mesh;
}

void write_mesh(const std::filesystem::path& path, const MeshSequence& mesh)
{
    mmasd::io::BinaryWriter out(path);
    out.magic("MMM1");
    out.put<std::uint32_t>(static_cast<std::uint32_t>(mesh.frames));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(mesh.vertices));
    out.put_all(mesh.coords);
}

std::vector<LabelRow> read_labels(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw mmasd::io::IoError("cannot open " + path.string());
    std::vector<LabelRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty())
            continue;
        auto cells = split_csv(line);
        LabelRow row;
        if (cells.size() != 3 || !parse_int(cells[1], row.action_label) || !parse_int(cells[2], row.asd_label)) {
            if (line_no == 1)
                continue;  // header
            throw ValidationError("labels", path.string() + ":" + std::to_string(line_no) +
                                                ": expected clip_id,action_label,asd_label");
        }
        row.clip_id = trim(cells[0]);
        check_labels(row.action_label, row.asd_label);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace io

}  // namespace mmasd::preprocess
