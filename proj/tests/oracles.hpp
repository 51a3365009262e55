// Naive reference implementations used as independent test oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0)
{
    std::uniform_real_distribution<double> dist(lo, hi);
    Vec v(n);
    for (auto& x : v)
        x = dist(rng);
    return v;
}

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n)
{
    Vec c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p)
                c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

struct Dims {
    std::size_t c, d, h, w;
};

// Direct summation over every output voxel, input channel and kernel tap.
inline Vec conv3d(const Vec& x, Dims in, const Vec& wt, std::size_t co, std::size_t kd, std::size_t kh,
                  std::size_t kw, std::size_t sd, std::size_t sh, std::size_t sw, std::size_t pd, std::size_t ph,
                  std::size_t pw, Dims& out)
{
    long D = static_cast<long>(in.d), H = static_cast<long>(in.h), W = static_cast<long>(in.w);
    out = {co, (in.d + 2 * pd - kd) / sd + 1, (in.h + 2 * ph - kh) / sh + 1, (in.w + 2 * pw - kw) / sw + 1};
    Vec y(out.c * out.d * out.h * out.w, 0.0);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t od = 0; od < out.d; ++od)
            for (std::size_t oh = 0; oh < out.h; ++oh)
                for (std::size_t ow = 0; ow < out.w; ++ow) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < in.c; ++c)
                        for (std::size_t a = 0; a < kd; ++a)
                            for (std::size_t b = 0; b < kh; ++b)
                                for (std::size_t e = 0; e < kw; ++e) {
                                    long id = static_cast<long>(od * sd + a) - static_cast<long>(pd);
                                    long ih = static_cast<long>(oh * sh + b) - static_cast<long>(ph);
                                    long iw = static_cast<long>(ow * sw + e) - static_cast<long>(pw);
                                    if (id < 0 || ih < 0 || iw < 0 || id >= D || ih >= H || iw >= W)
                                        continue;
                                    double xv = x[((c * in.d + id) * in.h + ih) * in.w + iw];
                                    double wv = wt[(((o * in.c + c) * kd + a) * kh + b) * kw + e];
                                    acc += xv * wv;
                                }
                    y[((o * out.d + od) * out.h + oh) * out.w + ow] = acc;
                }
    return y;
}

inline Vec maxpool3d(const Vec& x, Dims in, std::size_t wd, std::size_t wh, std::size_t ww, std::size_t sd,
                     std::size_t sh, std::size_t sw, Dims& out)
{
    out = {in.c, (in.d - wd) / sd + 1, (in.h - wh) / sh + 1, (in.w - ww) / sw + 1};
    Vec y;
    for (std::size_t c = 0; c < in.c; ++c)
        for (std::size_t od = 0; od < out.d; ++od)
            for (std::size_t oh = 0; oh < out.h; ++oh)
                for (std::size_t ow = 0; ow < out.w; ++ow) {
                    double m = -std::numeric_limits<double>::infinity();
                    for (std::size_t a = 0; a < wd; ++a)
                        for (std::size_t b = 0; b < wh; ++b)
                            for (std::size_t e = 0; e < ww; ++e)
                                m = std::max(m, x[((c * in.d + od * sd + a) * in.h + oh * sh + b) * in.w +
                                                  ow * sw + e]);
                    y.push_back(m);
                }
    return y;
}

inline Vec avg_pool(const Vec& x, Dims in)
{
    Vec y(in.c, 0.0);
    std::size_t n = in.d * in.h * in.w;
    for (std::size_t c = 0; c < in.c; ++c) {
        for (std::size_t i = 0; i < n; ++i)
            y[c] += x[c * n + i];
        y[c] /= static_cast<double>(n);
    }
    return y;
}

// Scalar multi-head attention: q/k/v rows of length d, weights [d x d] row-major
// applied as x*W + b.
struct AttnParams {
    Vec wq, bq, wk, bk, wv, bv, wo, bo;
};

inline Vec affine_rows(const Vec& x, std::size_t rows, std::size_t d, const Vec& w, const Vec& b)
{
    Vec y(rows * d);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = b[j];
            for (std::size_t i = 0; i < d; ++i)
                acc += x[r * d + i] * w[i * d + j];
            y[r * d + j] = acc;
        }
    return y;
}

inline Vec attention(const Vec& qs, std::size_t lq, const Vec& ks, const Vec& vs, std::size_t lk, std::size_t d,
                     std::size_t heads, const AttnParams& p, std::vector<Vec>* weights_out = nullptr)
{
    Vec q = affine_rows(qs, lq, d, p.wq, p.bq);
    Vec k = affine_rows(ks, lk, d, p.wk, p.bk);
    Vec v = affine_rows(vs, lk, d, p.wv, p.bv);
    std::size_t dk = d / heads;
    Vec concat(lq * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        Vec wts(lq * lk);
        for (std::size_t i = 0; i < lq; ++i) {
            Vec score(lk);
            for (std::size_t j = 0; j < lk; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < dk; ++t)
                    s += q[i * d + h * dk + t] * k[j * d + h * dk + t];
                score[j] = s / std::sqrt(static_cast<double>(dk));
            }
            double mx = *std::max_element(score.begin(), score.end());
            double tot = 0.0;
            for (auto& s : score) {
                s = std::exp(s - mx);
                tot += s;
            }
            for (std::size_t j = 0; j < lk; ++j) {
                wts[i * lk + j] = score[j] / tot;
                for (std::size_t t = 0; t < dk; ++t)
                    concat[i * d + h * dk + t] += wts[i * lk + j] * v[j * d + h * dk + t];
            }
        }
        if (weights_out)
            weights_out->push_back(wts);
    }
    return affine_rows(concat, lq, d, p.wo, p.bo);
}

// Minimum total cost over all assignments of rows to distinct columns (m <= n).
inline double brute_force_assignment(const std::vector<std::vector<double>>& cost)
{
    std::size_t m = cost.size();
    if (m == 0)
        return 0.0;
    std::size_t n = cost[0].size();
    std::vector<std::size_t> cols(n);
    std::iota(cols.begin(), cols.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            total += cost[i][cols[i]];
        best = std::min(best, total);
    } while (std::next_permutation(cols.begin(), cols.end()));
    return best;
}

struct Box {
    double x0, y0, x1, y1;
};

inline double box_iou(const Box& a, const Box& b)
{
    double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    double inter = ix * iy;
    double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// Exhaustive suppression: full pairwise IoU table, then the fixpoint of
// "kept iff no kept higher-priority box overlaps it". Priority is confidence,
// then lower index.
inline std::vector<std::size_t> nms_keep_set(const std::vector<Box>& boxes, const std::vector<double>& conf,
                                             double thr)
{
    std::size_t n = boxes.size();
    auto beats = [&](std::size_t j, std::size_t i) { return conf[j] > conf[i] || (conf[j] == conf[i] && j < i); };
    std::vector<std::vector<bool>> sup(n, std::vector<bool>(n, false));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            sup[i][j] = i != j && beats(j, i) && box_iou(boxes[i], boxes[j]) > thr;
    std::vector<bool> keep(n, true);
    for (std::size_t round = 0; round <= n; ++round) {
        std::vector<bool> next(n);
        for (std::size_t i = 0; i < n; ++i) {
            bool hit = false;
            for (std::size_t j = 0; j < n; ++j)
                hit = hit || (keep[j] && sup[i][j]);
            next[i] = !hit;
        }
        if (next == keep)
            break;
        keep = next;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i)
        if (keep[i])
            out.push_back(i);
    return out;
}

}  // namespace oracle
