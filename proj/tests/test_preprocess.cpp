#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mmasd/binary_io.hpp"
#include "mmasd/preprocess.hpp"

using namespace mmasd;
using namespace mmasd::preprocess;

namespace {

SkeletonSequence numbered_skeleton(std::size_t frames, std::size_t joints = 2)
{
    SkeletonSequence s{frames, joints, {}};
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t i = 0; i < joints * 3; ++i)
            s.coords.push_back(static_cast<double>(f) + 0.001 * static_cast<double>(i));
    return s;
}

Clip frame_numbered_clip(std::size_t frames, std::size_t c = 1, std::size_t h = 2, std::size_t w = 2)
{
    Clip clip(frames, c, h, w);
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t i = 0; i < clip.frame_size(); ++i)
            clip.values[f * clip.frame_size() + i] = static_cast<float>(f) / static_cast<float>(frames);
    return clip;
}

Clip random_clip(std::mt19937_64& rng, std::size_t f, std::size_t c, std::size_t h, std::size_t w)
{
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Clip clip(f, c, h, w);
    for (auto& v : clip.values)
        v = dist(rng);
    return clip;
}

MeshSequence planted_mesh(std::size_t frames)
{
    // Two far corners pin the clip bounding box to [-1,1]^2 (center at the
    // origin); one vertex sits exactly on the center.
    MeshSequence m{frames, kMeshVertices, {}};
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t v = 0; v < kMeshVertices; ++v) {
            float x = v == 0 ? 0.0f : (v % 2 ? -1.0f : 1.0f);
            float y = v == 0 ? 0.0f : (v % 2 ? -1.0f : 1.0f);
            m.coords.insert(m.coords.end(), {x, y, 0.5f});
        }
    return m;
}

std::size_t dark_pixels_near(const Clip& clip, std::size_t f, std::size_t cy, std::size_t cx, std::size_t half)
{
    std::size_t n = 0;
    for (std::size_t y = cy - half; y <= cy + half; ++y)
        for (std::size_t x = cx - half; x <= cx + half; ++x)
            n += clip.at(f, 0, y, x) == 0.0f;
    return n;
}

}  // namespace

TEST_CASE("standardize_skeleton")
{
    CHECK(standardize_skeleton(numbered_skeleton(180)) == numbered_skeleton(180));

    auto truncated = standardize_skeleton(numbered_skeleton(200));
    CHECK(truncated.frames == 180);
    CHECK(truncated.at(179, 0, 0) == 179.0);

    auto padded = standardize_skeleton(numbered_skeleton(100));
    CHECK(padded.frames == 180);
    for (std::size_t f = 0; f < 180; ++f)
        CHECK(padded.at(f, 1, 2) == numbered_skeleton(100).at(f < 100 ? f : f - 100, 1, 2));

    CHECK_THROWS_AS(standardize_skeleton(SkeletonSequence{}), ValidationError);
}

TEST_CASE("sample_frames")
{
    Clip c = frame_numbered_clip(7);
    CHECK(sample_frames(c, 7) == c);

    auto idx = sample_indices(80, 40);
    for (std::size_t k = 0; k < 40; ++k)
        CHECK(idx[k] == 2 * k);

    // independent floating-point generation of floor(k * 4.5)
    auto idx180 = sample_indices(180, 40);
    for (std::size_t k = 0; k < 40; ++k)
        CHECK(idx180[k] == static_cast<std::size_t>(std::floor(static_cast<double>(k) * 4.5)));
    CHECK(idx180[1] == 4);
    CHECK(idx180[3] == 13);
    CHECK(idx180[39] == 175);

    // fewer frames than requested duplicates in order
    auto dup = sample_indices(3, 6);
    CHECK(dup == std::vector<std::size_t>{0, 0, 1, 1, 2, 2});
}

TEST_CASE("resize_frame")
{
    std::mt19937_64 rng(1);
    Clip c = random_clip(rng, 1, 3, 5, 7);
    Image same = resize_frame(c.frame(0), 5, 7);
    for (std::size_t i = 0; i < same.values.size(); ++i)
        CHECK(std::abs(same.values[i] - c.values[i]) < 1e-9);

    Image flat(1, 9, 9, 0.3f);
    for (float v : resize_frame(flat, 4, 6).values)
        CHECK(v == doctest::Approx(0.3f));

    // ramp f(x) = x / 3 on 4x4; 2x2 output samples source columns 0.5 and 2.5
    Image ramp(1, 4, 4);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            ramp.at(0, y, x) = static_cast<float>(x) / 3.0f;
    Image small = resize_frame(ramp, 2, 2);
    CHECK(small.at(0, 0, 0) == doctest::Approx(0.5 / 3.0).epsilon(1e-6));
    CHECK(small.at(0, 1, 1) == doctest::Approx(2.5 / 3.0).epsilon(1e-6));
    CHECK(small.at(0, 1, 0) == doctest::Approx(0.5 / 3.0).epsilon(1e-6));
}

TEST_CASE("rasterize_mesh")
{
    SUBCASE("disk around a centered vertex covers 13 lattice points at radius 2")
    {
        Clip clip = rasterize_mesh(planted_mesh(2), {100, 2.0, 0});
        CHECK(clip.frames == 2);
        CHECK(clip.channels == 3);
        CHECK(dark_pixels_near(clip, 0, 50, 50, 4) == 13);
        CHECK(clip.at(0, 0, 50, 50) == 0.0f);
        CHECK(clip.at(0, 0, 50, 53) == 1.0f);
        // channels replicate the gray image
        CHECK(clip.at(1, 2, 50, 52) == clip.at(1, 0, 50, 52));
    }
    SUBCASE("radius zero darkens exactly the containing pixels")
    {
        Clip clip = rasterize_mesh(planted_mesh(1), {100, 0.0, 0});
        std::size_t dark = 0;
        for (std::size_t i = 0; i < 100 * 100; ++i)
            dark += clip.values[i] == 0.0f;
        CHECK(dark == 3);  // center plus two corners
        CHECK(dark_pixels_near(clip, 0, 50, 50, 2) == 1);
    }
    SUBCASE("identical frames and determinism")
    {
        Clip clip = rasterize_mesh(planted_mesh(5));
        CHECK(clip.frames == kClipFrames);
        for (std::size_t f = 1; f < clip.frames; ++f)
            CHECK(clip.frame(f).values == clip.frame(0).values);
        CHECK(rasterize_mesh(planted_mesh(5)) == clip);
    }
    SUBCASE("degenerate bounding box")
    {
        MeshSequence m{1, kMeshVertices, std::vector<float>(kMeshVertices * 3, 0.25f)};
        CHECK_THROWS_AS(rasterize_mesh(m), ValidationError);
    }
    SUBCASE("up is up")
    {
        MeshSequence m = planted_mesh(1);
        m.coords[1] = 0.5f;  // move the center vertex upward in world space
        Clip clip = rasterize_mesh(m, {100, 0.0, 0});
        CHECK(dark_pixels_near(clip, 0, 50, 50, 2) == 0);
        std::size_t row = 50 - static_cast<std::size_t>(std::lround(0.5 * 0.9 * 99 / 2.0));
        CHECK(clip.at(0, 0, row, 50) == 0.0f);
    }
}

TEST_CASE("rotate_clip")
{
    std::mt19937_64 rng(2);
    Clip c = random_clip(rng, 2, 3, 12, 12);
    Clip same = rotate_clip(c, 0.0);
    for (std::size_t i = 0; i < c.values.size(); ++i)
        CHECK(std::abs(same.values[i] - c.values[i]) < 1e-9);

    Clip pattern(1, 1, 20, 20, 0.0f);
    for (std::size_t y = 3; y < 8; ++y)
        for (std::size_t x = 2; x < 15; ++x)
            pattern.at(0, 0, y, x) = 1.0f;
    pattern.at(0, 0, 12, 4) = 0.7f;
    Clip turned = pattern;
    for (int i = 0; i < 4; ++i)
        turned = rotate_clip(turned, 90.0);
    double diff = 0.0;
    for (std::size_t i = 0; i < pattern.values.size(); ++i)
        diff += std::abs(turned.values[i] - pattern.values[i]);
    CHECK(diff / static_cast<double>(pattern.values.size()) < 0.02);
    // one quarter turn genuinely moves the pattern
    CHECK(rotate_clip(pattern, 90.0).values != pattern.values);

    Clip flat(3, 2, 9, 11, 0.4f);
    for (double angle : {5.0, -10.0, 33.0, 180.0})
        for (float v : rotate_clip(flat, angle).values)
            CHECK(v == doctest::Approx(0.4f));
}

TEST_CASE("rotate_skeleton")
{
    SkeletonSequence s{1, 2, {1.0, 0.0, 7.0, -1.0, 0.0, 3.0}};  // centroid at origin
    auto r = rotate_skeleton(s, 90.0);
    CHECK(std::abs(r.at(0, 0, 0) - 0.0) < 1e-12);
    CHECK(std::abs(r.at(0, 0, 1) - 1.0) < 1e-12);
    CHECK(r.at(0, 0, 2) == 7.0);
    CHECK(rotate_skeleton(s, 0.0) == s);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    for (int trial = 0; trial < 20; ++trial) {
        SkeletonSequence q{3, 33, {}};
        for (std::size_t i = 0; i < 3 * 33 * 3; ++i)
            q.coords.push_back(dist(rng));
        double angle = dist(rng) * 90.0;
        auto rq = rotate_skeleton(q, angle);
        for (std::size_t f = 0; f < 3; ++f)
            for (std::size_t a = 0; a < 33; ++a)
                for (std::size_t b = a + 1; b < 33; ++b) {
                    auto dist3 = [&](const SkeletonSequence& s3) {
                        double d = 0.0;
                        for (std::size_t k = 0; k < 3; ++k)
                            d += std::pow(s3.at(f, a, k) - s3.at(f, b, k), 2);
                        return std::sqrt(d);
                    };
                    CHECK(std::abs(dist3(q) - dist3(rq)) < 1e-9);
                }
    }
}

TEST_CASE("build_sample")
{
    std::mt19937_64 rng(4);
    Clip flow = random_clip(rng, 60, 3, 50, 64);
    Clip mesh = random_clip(rng, 90, 3, 120, 80);
    auto skel = numbered_skeleton(150, 33);
    Sample s = build_sample(flow, mesh, skel, 10, 1, "c1");
    CHECK(s.flow_clip.frames == 40);
    CHECK(s.flow_clip.height == 100);
    CHECK(s.mesh_clip.width == 100);
    CHECK(s.skeleton.frames == 180);
    CHECK(s.skeleton.joints == 33);
    CHECK_NOTHROW(validate_sample(s));

    try {
        build_sample(flow, mesh, skel, 11, 0);
        FAIL("expected rejection");
    } catch (const ValidationError& e) {
        CHECK(e.field() == "action_label");
    }
    CHECK_THROWS_AS(build_sample(flow, mesh, skel, 0, 2), ValidationError);
    CHECK_THROWS_AS(build_sample(flow, mesh, SkeletonSequence{}, 0, 0), ValidationError);

    MeshSequence bad{1, 10, std::vector<float>(30, 0.0f)};
    CHECK_THROWS_AS(build_sample(flow, bad, skel, 0, 0), ValidationError);
    Sample from_mesh = build_sample(flow, planted_mesh(3), skel, 3, 0);
    CHECK(from_mesh.mesh_clip.frames == 40);
}

TEST_CASE("augmentation preserves labels and shapes")
{
    std::mt19937_64 rng(5);
    Sample s = build_sample(random_clip(rng, 40, 3, 100, 100), random_clip(rng, 40, 3, 100, 100),
                            numbered_skeleton(180, 33), 4, 1, "a");
    for (double angle : kAugmentAngles) {
        Sample r = augment(s, angle);
        CHECK(r.action_label == 4);
        CHECK(r.asd_label == 1);
        CHECK_NOTHROW(validate_sample(r));
    }
}

TEST_CASE("file formats")
{
    auto dir = std::filesystem::temp_directory_path() / "mmasd_test_pre";
    std::filesystem::create_directories(dir);

    std::mt19937_64 rng(6);
    Clip c = random_clip(rng, 3, 2, 4, 5);
    mmasd::io::write_clip(dir / "c.mmc", c);
    CHECK(mmasd::io::read_clip(dir / "c.mmc") == c);

    SkeletonSequence s{4, 33, {}};
    std::normal_distribution<double> nd;
    for (std::size_t i = 0; i < 4 * 99; ++i)
        s.coords.push_back(nd(rng));
    preprocess::io::write_skeleton_csv(dir / "s.csv", s);
    CHECK(preprocess::io::read_skeleton_csv(dir / "s.csv") == s);

    {
        std::ofstream bad(dir / "bad.csv");
        bad << "1,2,3,4\n";
    }
    CHECK_THROWS_AS(preprocess::io::read_skeleton_csv(dir / "bad.csv"), ValidationError);

    MeshSequence m = planted_mesh(2);
    preprocess::io::write_mesh(dir / "m.mmm", m);
    CHECK(preprocess::io::read_mesh(dir / "m.mmm").coords == m.coords);
    preprocess::io::write_mesh(dir / "bad.mmm", MeshSequence{1, 3, std::vector<float>(9, 0.0f)});
    CHECK_THROWS_AS(preprocess::io::read_mesh(dir / "bad.mmm"), ValidationError);

    {
        std::ofstream labels(dir / "labels.csv");
        labels << "clip_id,action_label,asd_label\nv1,3,1\nv2,10,0\n";
    }
    auto rows = preprocess::io::read_labels(dir / "labels.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].clip_id == "v2");
    CHECK(rows[1].action_label == 10);
    std::filesystem::remove_all(dir);
}
