#include "mmasd/flow.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <thread>

#include <Eigen/LU>

#include "mmasd/binary_io.hpp"
#include "mmasd/tensor.hpp"

namespace mmasd::flow {

namespace {

std::size_t clamp_index(long i, std::size_t n)
{
    if (i < 0)
        return 0;
    return std::min(static_cast<std::size_t>(i), n - 1);
}

// Horizontal then vertical correlation with edge replication.
std::vector<double> correlate_rows(const std::vector<double>& src, std::size_t w, std::size_t h,
                                   const std::vector<double>& kernel)
{
    long r = static_cast<long>(kernel.size() / 2);
    std::vector<double> out(w * h, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (long t = -r; t <= r; ++t)
                acc += kernel[static_cast<std::size_t>(t + r)] * src[y * w + clamp_index(static_cast<long>(x) + t, w)];
            out[y * w + x] = acc;
        }
    return out;
}

std::vector<double> correlate_cols(const std::vector<double>& src, std::size_t w, std::size_t h,
                                   const std::vector<double>& kernel)
{
    long r = static_cast<long>(kernel.size() / 2);
    std::vector<double> out(w * h, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (long t = -r; t <= r; ++t) {
            double k = kernel[static_cast<std::size_t>(t + r)];
            const double* row = &src[clamp_index(static_cast<long>(y) + t, h) * w];
            for (std::size_t x = 0; x < w; ++x)
                out[y * w + x] += k * row[x];
        }
    return out;
}

std::vector<double> box_sum(const std::vector<double>& src, std::size_t w, std::size_t h, std::size_t window)
{
    std::vector<double> ones(window, 1.0);
    return correlate_cols(correlate_rows(src, w, h, ones), w, h, ones);
}

double sample(const std::vector<double>& plane, std::size_t w, std::size_t h, double x, double y)
{
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    auto x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
    std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    double top = (1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
    double bottom = (1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
    return (1 - fy) * top + fy * bottom;
}

// Half-pixel-centered bilinear resample of one plane.
std::vector<double> resample(const std::vector<double>& plane, std::size_t w, std::size_t h, std::size_t ow,
                             std::size_t oh)
{
    std::vector<double> out(ow * oh);
    double sx = static_cast<double>(w) / static_cast<double>(ow);
    double sy = static_cast<double>(h) / static_cast<double>(oh);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
            out[y * ow + x] = sample(plane, w, h, (static_cast<double>(x) + 0.5) * sx - 0.5,
                                     (static_cast<double>(y) + 0.5) * sy - 0.5);
    return out;
}

std::vector<double> gaussian(double sigma, long radius)
{
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double s = 0;
    for (long t = -radius; t <= radius; ++t) {
        double v = std::exp(-static_cast<double>(t * t) / (2 * sigma * sigma));
        k[static_cast<std::size_t>(t + radius)] = v;
        s += v;
    }
    for (auto& v : k)
        v /= s;
    return k;
}

std::vector<double> warp(const std::vector<double>& plane, const FlowField& by)
{
    std::vector<double> out(plane.size());
    for (std::size_t y = 0; y < by.height; ++y)
        for (std::size_t x = 0; x < by.width; ++x) {
            std::size_t i = y * by.width + x;
            out[i] = sample(plane, by.width, by.height, static_cast<double>(x) + by.u[i],
                            static_cast<double>(y) + by.v[i]);
        }
    return out;
}

}  // namespace

void FlowConfig::validate() const
{
    if (pyramid_levels < 1)
        throw ConfigError("flow.pyramid_levels must be at least 1");
    if (!(pyramid_scale > 0.0 && pyramid_scale < 1.0))
        throw ConfigError("flow.pyramid_scale must lie in (0,1)");
    if (window_size < 3 || window_size % 2 == 0)
        throw ConfigError("flow.window_size must be odd and >= 3");
    if (poly_n < 3 || poly_n % 2 == 0)
        throw ConfigError("flow.poly_n must be odd and >= 3");
    if (!(poly_sigma > 0.0))
        throw ConfigError("flow.poly_sigma must be positive");
    if (iterations < 1)
        throw ConfigError("flow.iterations must be at least 1");
}

GrayFrame downsample(const GrayFrame& frame, double scale)
{
    if (!(scale > 0.0 && scale < 1.0))
        throw ConfigError("downsample: scale must lie in (0,1)");
    auto ow = static_cast<std::size_t>(std::lround(static_cast<double>(frame.width) * scale));
    auto oh = static_cast<std::size_t>(std::lround(static_cast<double>(frame.height) * scale));
    if (ow < kMinPyramidExtent || oh < kMinPyramidExtent)
        throw ConfigError("downsample: " + std::to_string(frame.width) + "x" + std::to_string(frame.height) +
                          " at scale " + std::to_string(scale) + " falls below " +
                          std::to_string(kMinPyramidExtent) + " px");
    double sigma = std::max(0.5, (1.0 / scale - 1.0) * 0.5);
    auto k = gaussian(sigma, static_cast<long>(std::ceil(3 * sigma)));
    auto blurred = correlate_cols(correlate_rows(frame.values, frame.width, frame.height, k), frame.width,
                                  frame.height, k);
    GrayFrame out(ow, oh);
    out.values = resample(blurred, frame.width, frame.height, ow, oh);
    return out;
}

PolyExpansion poly_expansion(const GrayFrame& frame, std::size_t poly_n, double poly_sigma)
{
    if (poly_n < 3 || poly_n % 2 == 0)
        throw ConfigError("poly_n must be odd and >= 3");
    if (frame.width <= poly_n || frame.height <= poly_n)
        throw DimensionError("poly_expansion: frame smaller than the neighborhood");
    const long r = static_cast<long>(poly_n / 2);
    const std::size_t w = frame.width, h = frame.height;

    std::vector<double> k0(poly_n), k1(poly_n), k2(poly_n);
    for (long t = -r; t <= r; ++t) {
        double g = std::exp(-static_cast<double>(t * t) / (2 * poly_sigma * poly_sigma));
        auto i = static_cast<std::size_t>(t + r);
        k0[i] = g;
        k1[i] = g * static_cast<double>(t);
        k2[i] = g * static_cast<double>(t * t);
    }

    // weighted Gram matrix of the basis 1, x, y, x^2, y^2, xy
    Eigen::Matrix<double, 6, 6> gram = Eigen::Matrix<double, 6, 6>::Zero();
    for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
            double x = static_cast<double>(dx), y = static_cast<double>(dy);
            double wgt = k0[static_cast<std::size_t>(dx + r)] * k0[static_cast<std::size_t>(dy + r)];
            Eigen::Matrix<double, 6, 1> basis;
            basis << 1, x, y, x * x, y * y, x * y;
            gram += wgt * basis * basis.transpose();
        }
    const Eigen::Matrix<double, 6, 6> inv = gram.inverse();

    auto h0 = correlate_rows(frame.values, w, h, k0);
    auto h1 = correlate_rows(frame.values, w, h, k1);
    auto h2 = correlate_rows(frame.values, w, h, k2);
    std::vector<double> m[6] = {correlate_cols(h0, w, h, k0), correlate_cols(h1, w, h, k0),
                                correlate_cols(h0, w, h, k1), correlate_cols(h2, w, h, k0),
                                correlate_cols(h0, w, h, k2), correlate_cols(h1, w, h, k1)};

    PolyExpansion e;
    e.width = w;
    e.height = h;
    for (auto* p : {&e.a11, &e.a12, &e.a22, &e.b1, &e.b2, &e.c})
        p->resize(w * h);
    for (std::size_t i = 0; i < w * h; ++i) {
        Eigen::Matrix<double, 6, 1> mv;
        mv << m[0][i], m[1][i], m[2][i], m[3][i], m[4][i], m[5][i];
        Eigen::Matrix<double, 6, 1> coef = inv * mv;
        e.c[i] = coef(0);
        e.b1[i] = coef(1);
        e.b2[i] = coef(2);
        e.a11[i] = coef(3);
        e.a22[i] = coef(4);
        e.a12[i] = coef(5) / 2;
    }
    return e;
}

FlowField displacement_step(const PolyExpansion& e1, const PolyExpansion& e2, const FlowField& prior,
                            std::size_t window_size, std::size_t iterations)
{
    if (e1.width != e2.width || e1.height != e2.height || prior.width != e1.width || prior.height != e1.height)
        throw DimensionError("displacement_step: expansions and prior must share extents");
    if (window_size == 0 || window_size % 2 == 0)
        throw ConfigError("window_size must be odd");
    const std::size_t w = e1.width, h = e1.height, n = w * h;
    FlowField flow = prior;
    for (std::size_t it = 0; it < iterations; ++it) {
        auto a11 = warp(e2.a11, flow), a12 = warp(e2.a12, flow), a22 = warp(e2.a22, flow);
        auto b1 = warp(e2.b1, flow), b2 = warp(e2.b2, flow);
        std::vector<double> g11(n), g12(n), g22(n), h1(n), h2(n);
        for (std::size_t i = 0; i < n; ++i) {
            double p = (e1.a11[i] + a11[i]) / 2, q = (e1.a12[i] + a12[i]) / 2, s = (e1.a22[i] + a22[i]) / 2;
            double d1 = -0.5 * (b1[i] - e1.b1[i]), d2 = -0.5 * (b2[i] - e1.b2[i]);
            g11[i] = p * p + q * q;
            g12[i] = q * (p + s);
            g22[i] = q * q + s * s;
            h1[i] = p * d1 + q * d2;
            h2[i] = q * d1 + s * d2;
        }
        g11 = box_sum(g11, w, h, window_size);
        g12 = box_sum(g12, w, h, window_size);
        g22 = box_sum(g22, w, h, window_size);
        h1 = box_sum(h1, w, h, window_size);
        h2 = box_sum(h2, w, h, window_size);
        for (std::size_t i = 0; i < n; ++i) {
            double det = g11[i] * g22[i] - g12[i] * g12[i];
            if (!(std::abs(det) >= 1e-12))
                continue;
            flow.u[i] += (g22[i] * h1[i] - g12[i] * h2[i]) / det;
            flow.v[i] += (g11[i] * h2[i] - g12[i] * h1[i]) / det;
        }
    }
    return flow;
}

FlowField resize_flow(const FlowField& flow, std::size_t width, std::size_t height, double gain)
{
    FlowField out(width, height);
    out.u = resample(flow.u, flow.width, flow.height, width, height);
    out.v = resample(flow.v, flow.width, flow.height, width, height);
    for (std::size_t i = 0; i < out.u.size(); ++i) {
        out.u[i] *= gain;
        out.v[i] *= gain;
    }
    return out;
}

FlowField farneback(const GrayFrame& f1, const GrayFrame& f2, const FlowConfig& cfg)
{
    cfg.validate();
    if (f1.width != f2.width || f1.height != f2.height)
        throw UsageError("farneback: frames differ in size");

    std::vector<GrayFrame> p1{f1}, p2{f2};
    for (std::size_t level = 1; level < cfg.pyramid_levels; ++level) {
        p1.push_back(downsample(p1.back(), cfg.pyramid_scale));
        p2.push_back(downsample(p2.back(), cfg.pyramid_scale));
    }

    FlowField flow;
    for (std::size_t k = p1.size(); k-- > 0;) {
        const GrayFrame& a = p1[k];
        if (k + 1 == p1.size())
            flow = FlowField(a.width, a.height);
        else
            flow = resize_flow(flow, a.width, a.height, 1.0 / cfg.pyramid_scale);
        auto e1 = poly_expansion(a, cfg.poly_n, cfg.poly_sigma);
        auto e2 = poly_expansion(p2[k], cfg.poly_n, cfg.poly_sigma);
        flow = displacement_step(e1, e2, flow, cfg.window_size, cfg.iterations);
    }
    return flow;
}

GrayFrame to_gray(const Image& image)
{
    GrayFrame g(image.width, image.height);
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
            double s = 0;
            for (std::size_t c = 0; c < image.channels; ++c)
                s += image.at(c, y, x);
            g.at(x, y) = s / static_cast<double>(image.channels);
        }
    return g;
}

double max_magnitude(const FlowField& flow)
{
    double m = 0;
    for (std::size_t i = 0; i < flow.u.size(); ++i)
        m = std::max(m, std::hypot(flow.u[i], flow.v[i]));
    return m;
}

Image colorize(const FlowField& flow, double max_mag)
{
    Image out(3, flow.height, flow.width);
    double norm = std::max(max_mag, 1e-6);
    for (std::size_t y = 0; y < flow.height; ++y)
        for (std::size_t x = 0; x < flow.width; ++x) {
            std::size_t i = y * flow.width + x;
            double hue = std::atan2(flow.v[i], flow.u[i]) * 180.0 / std::numbers::pi;
            if (hue < 0)
                hue += 360.0;
            double value = std::min(1.0, std::hypot(flow.u[i], flow.v[i]) / norm);
            // HSV -> RGB with saturation 1
            double hp = hue / 60.0;
            double xc = value * (1 - std::abs(std::fmod(hp, 2.0) - 1));
            double r = 0, g = 0, b = 0;
            switch (static_cast<int>(hp) % 6) {
            case 0: r = value, g = xc; break;
            case 1: r = xc, g = value; break;
            case 2: g = value, b = xc; break;
            case 3: g = xc, b = value; break;
            case 4: r = xc, b = value; break;
            default: r = value, b = xc; break;
            }
            out.at(0, y, x) = static_cast<float>(r);
            out.at(1, y, x) = static_cast<float>(g);
            out.at(2, y, x) = static_cast<float>(b);
        }
    return out;
}

std::vector<FlowField> clip_flow(const Clip& video, const FlowConfig& cfg, std::size_t jobs)
{
    cfg.validate();
    if (video.frames < 2)
        throw DimensionError("clip_flow: need at least two frames");
    std::vector<GrayFrame> gray(video.frames);
    for (std::size_t f = 0; f < video.frames; ++f)
        gray[f] = to_gray(video.frame(f));

    std::vector<FlowField> fields(video.frames - 1);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    auto worker = [&] {
        for (std::size_t i = next++; i < fields.size(); i = next++) {
            try {
                fields[i] = farneback(gray[i], gray[i + 1], cfg);
            } catch (...) {
                if (!failed.exchange(true))
                    failure = std::current_exception();
                return;
            }
        }
    };
    std::size_t n = std::clamp<std::size_t>(jobs, 1, fields.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t)
        pool.emplace_back(worker);
    worker();
    for (auto& t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
    return fields;
}

Clip colorize_clip(const std::vector<FlowField>& fields)
{
    if (fields.empty())
        throw DimensionError("colorize_clip: no flow fields");
    double m = 0;
    for (const auto& f : fields)
        m = std::max(m, max_magnitude(f));
    std::vector<Image> frames;
    frames.reserve(fields.size());
    for (const auto& f : fields)
        frames.push_back(colorize(f, m));
    return Clip::from_frames(frames);
}

namespace io {

void write_flow(const std::filesystem::path& path, const FlowField& flow)
{
    mmasd::io::BinaryWriter out(path);
    out.magic("MMF1");
    out.put<std::uint32_t>(static_cast<std::uint32_t>(flow.width));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(flow.height));
    std::vector<float> u(flow.u.begin(), flow.u.end()), v(flow.v.begin(), flow.v.end());
    out.put_all(u);
    out.put_all(v);
}

FlowField read_flow(const std::filesystem::path& path)
{
    mmasd::io::BinaryReader in(path);
    in.expect_magic("MMF1");
    std::size_t w = in.get<std::uint32_t>(), h = in.get<std::uint32_t>();
    if (w == 0 || h == 0)
        throw mmasd::io::IoError(path.string() + ": flow extents must be positive");
    FlowField flow(w, h);
    auto u = in.get_all<float>(w * h);
    auto v = in.get_all<float>(w * h);
    in.expect_end();
    flow.u.assign(u.begin(), u.end());
    flow.v.assign(v.begin(), v.end());
    return flow;
}

}  // namespace io

}  // namespace mmasd::flow
