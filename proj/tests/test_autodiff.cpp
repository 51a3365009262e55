#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "mmasd/nn.hpp"
#include "mmasd/tensor.hpp"
#include "mmasd/tensor_io.hpp"
#include "oracles.hpp"

using namespace mmasd;
using ad::Tensor;

namespace {

Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0)
{
    auto n = ad::numel(shape);
    return Tensor::from(std::move(shape), oracle::random_vec(rng, n, lo, hi));
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b)
{
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Random weighted sum of the outputs so every output coordinate matters.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    auto w = Tensor::from(y.shape(), oracle::random_vec(rng, y.size()));
    return ad::sum(ad::mul(y, w));
}

}  // namespace

TEST_CASE("matmul")
{
    std::mt19937_64 rng(1);
    SUBCASE("identity leaves the operand unchanged")
    {
        Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        Tensor a = random_tensor(rng, {3, 3});
        CHECK(max_abs_diff(ad::matmul(eye, a).data(), {a.data().begin(), a.data().end()}) == 0.0);
    }
    SUBCASE("scalar product")
    {
        CHECK(ad::matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item() == 6.0);
    }
    SUBCASE("matches triple loop")
    {
        auto a = oracle::random_vec(rng, 12), b = oracle::random_vec(rng, 15);
        Tensor c = ad::matmul(Tensor::from({4, 3}, a), Tensor::from({3, 5}, b));
        CHECK(c.shape() == ad::Shape{4, 5});
        CHECK(max_abs_diff(c.data(), oracle::matmul(a, b, 4, 3, 5)) < 1e-12);
    }
    SUBCASE("shape mismatch names both shapes")
    {
        try {
            ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
            FAIL("expected DimensionError");
        } catch (const DimensionError& e) {
            std::string msg = e.what();
            CHECK(msg.find("[2x3]") != std::string::npos);
        }
    }
    SUBCASE("gradient")
    {
        Tensor b = random_tensor(rng, {3, 5});
        Tensor a = random_tensor(rng, {4, 3});
        CHECK(ad::grad_check([&](const Tensor& x) { return weighted_sum(ad::matmul(x, b), 3); }, a) < 1e-7);
        CHECK(ad::grad_check([&](const Tensor& x) { return weighted_sum(ad::matmul(a, x), 4); }, b) < 1e-7);
    }
}

TEST_CASE("conv3d")
{
    std::mt19937_64 rng(2);
    SUBCASE("identity kernel")
    {
        Tensor x = random_tensor(rng, {1, 3, 4, 5});
        Tensor y = ad::conv3d(x, Tensor::from({1, 1, 1, 1, 1}, {1.0}), {1, 1, 1}, {0, 0, 0});
        CHECK(y.shape() == x.shape());
        CHECK(max_abs_diff(y.data(), {x.data().begin(), x.data().end()}) == 0.0);
    }
    SUBCASE("window sum")
    {
        Tensor y = ad::conv3d(Tensor::full({1, 2, 2, 2}, 1.0), Tensor::full({1, 1, 2, 2, 2}, 1.0), {1, 1, 1},
                              {0, 0, 0});
        CHECK(y.size() == 1);
        CHECK(y.item() == 8.0);
    }
    SUBCASE("matches direct summation with stride and padding")
    {
        auto x = oracle::random_vec(rng, 2 * 4 * 6 * 6);
        auto w = oracle::random_vec(rng, 3 * 2 * 27);
        oracle::Dims out{};
        auto expected = oracle::conv3d(x, {2, 4, 6, 6}, w, 3, 3, 3, 3, 1, 2, 2, 1, 1, 1, out);
        Tensor y = ad::conv3d(Tensor::from({2, 4, 6, 6}, x), Tensor::from({3, 2, 3, 3, 3}, w), {1, 2, 2}, {1, 1, 1});
        CHECK(y.shape() == ad::Shape{3, out.d, out.h, out.w});
        CHECK(y.shape() == ad::Shape{3, 4, 3, 3});
        CHECK(max_abs_diff(y.data(), expected) < 1e-10);
    }
    SUBCASE("kernel larger than padded input")
    {
        CHECK_THROWS_AS(ad::conv3d(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 1, 3, 3, 3}), {1, 1, 1},
                                   {0, 0, 0}),
                        DimensionError);
    }
    SUBCASE("gradient")
    {
        Tensor x = random_tensor(rng, {2, 3, 4, 4});
        Tensor w = random_tensor(rng, {2, 2, 2, 3, 3});
        auto f_x = [&](const Tensor& v) { return weighted_sum(ad::conv3d(v, w, {1, 2, 1}, {0, 1, 1}), 5); };
        auto f_w = [&](const Tensor& v) { return weighted_sum(ad::conv3d(x, v, {1, 2, 1}, {0, 1, 1}), 5); };
        CHECK(ad::grad_check(f_x, x) < 1e-6);
        CHECK(ad::grad_check(f_w, w) < 1e-6);
    }
}

TEST_CASE("batch_norm")
{
    std::mt19937_64 rng(3);
    Tensor gamma = Tensor::full({3}, 1.0), beta = Tensor::zeros({3});
    SUBCASE("constant channels normalize to zero")
    {
        ad::BatchNormState st;
        std::vector<double> v;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 8; ++i)
                v.push_back(c + 0.5);
        Tensor y = ad::batch_norm(Tensor::from({3, 2, 2, 2}, v), gamma, beta, ad::Mode::train, st);
        for (double x : y.data())
            CHECK(x == 0.0);
    }
    SUBCASE("zero gamma outputs beta")
    {
        ad::BatchNormState st;
        Tensor b = Tensor::from({3}, {0.5, -1.0, 2.0});
        Tensor y = ad::batch_norm(random_tensor(rng, {3, 2, 2, 2}), Tensor::zeros({3}), b, ad::Mode::train, st);
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(y[i] == b[i / 8]);
    }
    SUBCASE("output statistics by recomputation")
    {
        ad::BatchNormState st;
        Tensor x = random_tensor(rng, {3, 3, 4, 5}, -2.0, 5.0);
        Tensor y = ad::batch_norm(x, gamma, beta, ad::Mode::train, st);
        auto stats = [](std::span<const double> v, int c) {
            double m = 0.0, var = 0.0;
            for (int i = 0; i < 60; ++i)
                m += v[c * 60 + i];
            m /= 60;
            for (int i = 0; i < 60; ++i)
                var += (v[c * 60 + i] - m) * (v[c * 60 + i] - m);
            return std::pair{m, var / 60};
        };
        for (int c = 0; c < 3; ++c) {
            auto [in_mean, in_var] = stats(x.data(), c);
            auto [m, v] = stats(y.data(), c);
            CHECK(std::abs(m) < 1e-9);
            CHECK(std::abs(v - in_var / (in_var + 1e-5)) < 1e-6);
            CHECK(std::abs(v - 1.0) < 1e-4);
            CHECK(st.running_mean[c] == doctest::Approx(in_mean).epsilon(1e-12));
        }
    }
    SUBCASE("running statistics and eval mode")
    {
        ad::BatchNormState st;
        CHECK_THROWS_AS(ad::batch_norm(random_tensor(rng, {3, 1, 2, 2}), gamma, beta, ad::Mode::eval, st),
                        StateError);
        Tensor x = random_tensor(rng, {3, 1, 2, 2});
        ad::batch_norm(x, gamma, beta, ad::Mode::train, st);
        CHECK(st.initialized);
        auto first = st.running_mean;
        ad::batch_norm(Tensor::full({3, 1, 2, 2}, 1.0), gamma, beta, ad::Mode::train, st);
        for (int c = 0; c < 3; ++c)
            CHECK(st.running_mean[c] == doctest::Approx(0.9 * first[c] + 0.1));
        Tensor y = ad::batch_norm(Tensor::full({3, 1, 1, 1}, 1.0), gamma, beta, ad::Mode::eval, st);
        for (int c = 0; c < 3; ++c)
            CHECK(y[c] == doctest::Approx((1.0 - st.running_mean[c]) / std::sqrt(st.running_var[c] + 1e-5)));
    }
    SUBCASE("train mode needs two elements per channel")
    {
        ad::BatchNormState st;
        CHECK_THROWS_AS(ad::batch_norm(Tensor::zeros({3, 1, 1, 1}), gamma, beta, ad::Mode::train, st),
                        DimensionError);
    }
    SUBCASE("gradient through batch statistics, pooled over two inputs")
    {
        Tensor other = random_tensor(rng, {3, 1, 2, 3});
        Tensor g = random_tensor(rng, {3}, 0.5, 1.5), b = random_tensor(rng, {3});
        auto f = [&](const Tensor& x) {
            ad::BatchNormState st;
            auto ys = ad::batch_norm({x, other}, g, b, ad::Mode::train, st);
            return ad::add(weighted_sum(ys[0], 7), weighted_sum(ys[1], 8));
        };
        CHECK(ad::grad_check(f, random_tensor(rng, {3, 2, 1, 2})) < 1e-5);
    }
}

TEST_CASE("maxpool3d")
{
    std::mt19937_64 rng(4);
    SUBCASE("global window gives per-channel max")
    {
        Tensor x = random_tensor(rng, {2, 2, 3, 3});
        Tensor y = ad::maxpool3d(x, {2, 3, 3}, {1, 1, 1});
        CHECK(y.size() == 2);
        for (int c = 0; c < 2; ++c)
            CHECK(y[c] == *std::max_element(x.data().begin() + c * 18, x.data().begin() + (c + 1) * 18));
    }
    SUBCASE("monotone ramp selects last element of each window")
    {
        std::vector<double> ramp(64);
        std::iota(ramp.begin(), ramp.end(), 0.0);
        Tensor y = ad::maxpool3d(Tensor::from({1, 4, 4, 4}, ramp), {2, 2, 2}, {2, 2, 2});
        CHECK(y.shape() == ad::Shape{1, 2, 2, 2});
        // window origin (d,h,w) -> last element (d+1, h+1, w+1)
        CHECK(y[0] == 1 * 16 + 1 * 4 + 1);
        CHECK(y[7] == 3 * 16 + 3 * 4 + 3);
    }
    SUBCASE("matches window scan")
    {
        for (int trial = 0; trial < 10; ++trial) {
            std::uniform_int_distribution<std::size_t> ext(2, 8);
            oracle::Dims in{ext(rng) % 3 + 1, ext(rng), ext(rng), ext(rng)};
            auto x = oracle::random_vec(rng, in.c * in.d * in.h * in.w);
            oracle::Dims out{};
            auto expected = oracle::maxpool3d(x, in, 2, 2, 1, 2, 1, 1, out);
            Tensor y = ad::maxpool3d(Tensor::from({in.c, in.d, in.h, in.w}, x), {2, 2, 1}, {2, 1, 1});
            CHECK(max_abs_diff(y.data(), expected) == 0.0);
        }
    }
    SUBCASE("ties route the gradient to the first maximum")
    {
        Tensor x = Tensor::full({1, 2, 1, 1}, 3.0, true);
        ad::backward(ad::sum(ad::maxpool3d(x, {2, 1, 1}, {1, 1, 1})));
        CHECK(x.grad()[0] == 1.0);
        CHECK(x.grad()[1] == 0.0);
    }
    SUBCASE("window larger than input")
    {
        CHECK_THROWS_AS(ad::maxpool3d(Tensor::zeros({1, 1, 2, 2}), {2, 2, 2}, {1, 1, 1}), DimensionError);
    }
}

TEST_CASE("global_avg_pool")
{
    CHECK(ad::global_avg_pool(Tensor::full({2, 2, 3, 1}, 4.25))[1] == 4.25);
    CHECK(ad::global_avg_pool(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5);
    std::mt19937_64 rng(5);
    auto x = oracle::random_vec(rng, 3 * 2 * 3 * 4);
    Tensor y = ad::global_avg_pool(Tensor::from({3, 2, 3, 4}, x));
    CHECK(max_abs_diff(y.data(), oracle::avg_pool(x, {3, 2, 3, 4})) < 1e-12);
}

TEST_CASE("activations")
{
    CHECK(ad::relu(Tensor::scalar(-1.0)).item() == 0.0);
    CHECK(ad::relu(Tensor::scalar(2.0)).item() == 2.0);
    CHECK(ad::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(ad::tanh(Tensor::scalar(0.0)).item() == 0.0);
    for (auto kind : {ad::Activation::relu, ad::Activation::sigmoid, ad::Activation::tanh}) {
        Tensor x = Tensor::scalar(0.3, true);
        ad::backward(ad::activation(x, kind));
        const double h = 1e-5;
        double numeric =
            (ad::activation(Tensor::scalar(0.3 + h), kind).item() - ad::activation(Tensor::scalar(0.3 - h), kind).item()) /
            (2 * h);
        CHECK(std::abs(x.grad()[0] - numeric) < 1e-7);
    }
    Tensor zero = Tensor::scalar(0.0, true);
    ad::backward(ad::relu(zero));
    CHECK(zero.grad()[0] == 0.0);
}

TEST_CASE("softmax")
{
    CHECK(ad::softmax(Tensor::from({1}, {7.0}), 0).item() == 1.0);
    Tensor u = ad::softmax(Tensor::full({5}, 0.3), 0);
    for (double v : u.data())
        CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
    Tensor p = ad::softmax(Tensor::from({2}, {0.0, std::log(2.0)}), 0);
    CHECK(std::abs(p[0] - 1.0 / 3.0) < 1e-15);
    CHECK(std::abs(p[1] - 2.0 / 3.0) < 1e-15);

    std::mt19937_64 rng(6);
    Tensor x = random_tensor(rng, {3, 4, 2}, -5, 5);
    Tensor y = ad::softmax(x, 1);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t c = 0; c < 2; ++c) {
            double s = 0.0;
            for (std::size_t b = 0; b < 4; ++b) {
                double v = y[(a * 4 + b) * 2 + c];
                CHECK(v > 0.0);
                CHECK(v <= 1.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    CHECK(ad::softmax(Tensor::from({2}, {1000.0, 0.0}), 0)[0] == 1.0);
    CHECK(ad::grad_check([](const Tensor& v) { return weighted_sum(ad::softmax(v, 1), 9); }, x) < 1e-6);
}

TEST_CASE("linear")
{
    Tensor x = Tensor::from({2}, {1, 2});
    CHECK(ad::linear(x, Tensor::from({2, 1}, {1, 1}), Tensor::from({1}, {0.5})).item() == 3.5);
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor y = ad::linear(x, eye, Tensor::zeros({2}));
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 2.0);

    std::mt19937_64 rng(7);
    auto xs = oracle::random_vec(rng, 3 * 4), ws = oracle::random_vec(rng, 4 * 2), bs = oracle::random_vec(rng, 2);
    Tensor out = ad::linear(Tensor::from({3, 4}, xs), Tensor::from({4, 2}, ws), Tensor::from({2}, bs));
    auto expected = oracle::matmul(xs, ws, 3, 4, 2);
    for (std::size_t i = 0; i < expected.size(); ++i)
        expected[i] += bs[i % 2];
    CHECK(max_abs_diff(out.data(), expected) < 1e-14);
    CHECK_THROWS_AS(ad::linear(Tensor::zeros({3}), eye, Tensor::zeros({2})), DimensionError);
}

TEST_CASE("lstm_step")
{
    const std::size_t d_in = 3, d_h = 2;
    ad::LstmWeights zero{Tensor::zeros({d_in, 4 * d_h}), Tensor::zeros({d_h, 4 * d_h}), Tensor::zeros({4 * d_h})};
    SUBCASE("zero weights closed form")
    {
        Tensor c_prev = Tensor::from({d_h}, {0.8, -2.0});
        auto s = ad::lstm_step(Tensor::from({d_in}, {1, 2, 3}), {Tensor::from({d_h}, {0.3, 0.1}), c_prev}, zero);
        for (std::size_t j = 0; j < d_h; ++j) {
            CHECK(s.c[j] == doctest::Approx(0.5 * c_prev[j]).epsilon(1e-15));
            CHECK(s.h[j] == doctest::Approx(0.5 * std::tanh(0.5 * c_prev[j])).epsilon(1e-15));
        }
    }
    SUBCASE("saturated forget gate discards history")
    {
        std::mt19937_64 rng(8);
        ad::LstmWeights w{random_tensor(rng, {d_in, 4 * d_h}), random_tensor(rng, {d_h, 4 * d_h}),
                          random_tensor(rng, {4 * d_h})};
        for (std::size_t j = d_h; j < 2 * d_h; ++j)
            w.bias.data()[j] = -10.0;
        // zero the forget-gate columns so its pre-activation is exactly the bias
        for (std::size_t r = 0; r < d_in; ++r)
            for (std::size_t j = d_h; j < 2 * d_h; ++j)
                w.input_weight.data()[r * 4 * d_h + j] = 0.0;
        for (std::size_t r = 0; r < d_h; ++r)
            for (std::size_t j = d_h; j < 2 * d_h; ++j)
                w.recurrent_weight.data()[r * 4 * d_h + j] = 0.0;
        Tensor x = Tensor::from({d_in}, {0.2, -0.4, 0.9});
        Tensor h = Tensor::from({d_h}, {0.1, 0.2});
        auto a = ad::lstm_step(x, {h, Tensor::zeros({d_h})}, w);
        auto b = ad::lstm_step(x, {h, Tensor::from({d_h}, {5.0, -5.0})}, w);
        for (std::size_t j = 0; j < d_h; ++j)
            CHECK(std::abs(a.c[j] - b.c[j]) < 5.0 * 1e-4);
    }
    SUBCASE("gradients for every weight block")
    {
        std::mt19937_64 rng(9);
        ad::LstmWeights w{random_tensor(rng, {d_in, 4 * d_h}), random_tensor(rng, {d_h, 4 * d_h}),
                          random_tensor(rng, {4 * d_h})};
        Tensor x = random_tensor(rng, {d_in}), h = random_tensor(rng, {d_h}), c = random_tensor(rng, {d_h});
        auto loss = [&](const ad::LstmCellState& s) { return ad::add(weighted_sum(s.h, 1), weighted_sum(s.c, 2)); };
        CHECK(ad::grad_check(
                  [&](const Tensor& v) {
                      auto ww = w;
                      ww.input_weight = v;
                      return loss(ad::lstm_step(x, {h, c}, ww));
                  },
                  w.input_weight) < 1e-5);
        CHECK(ad::grad_check(
                  [&](const Tensor& v) {
                      auto ww = w;
                      ww.recurrent_weight = v;
                      return loss(ad::lstm_step(x, {h, c}, ww));
                  },
                  w.recurrent_weight) < 1e-5);
        CHECK(ad::grad_check([&](const Tensor& v) { return loss(ad::lstm_step(v, {h, c}, w)); }, x) < 1e-5);
        CHECK(ad::grad_check([&](const Tensor& v) { return loss(ad::lstm_step(x, {h, v}, w)); }, c) < 1e-5);
    }
    CHECK_THROWS_AS(ad::lstm_step(Tensor::zeros({4}), {Tensor::zeros({d_h}), Tensor::zeros({d_h})}, zero),
                    DimensionError);
}

namespace {

ad::AttentionWeights to_weights(const oracle::AttnParams& p, std::size_t d)
{
    return {Tensor::from({d, d}, p.wq), Tensor::from({d}, p.bq), Tensor::from({d, d}, p.wk),
            Tensor::from({d}, p.bk), Tensor::from({d, d}, p.wv), Tensor::from({d}, p.bv),
            Tensor::from({d, d}, p.wo), Tensor::from({d}, p.bo)};
}

oracle::AttnParams random_params(std::mt19937_64& rng, std::size_t d)
{
    auto m = [&] { return oracle::random_vec(rng, d * d); };
    auto v = [&] { return oracle::random_vec(rng, d); };
    return {m(), v(), m(), v(), m(), v(), m(), v()};
}

}  // namespace

TEST_CASE("multi_head_attention")
{
    std::mt19937_64 rng(10);
    const std::size_t d = 4;
    auto p = random_params(rng, d);
    auto w = to_weights(p, d);
    SUBCASE("single key")
    {
        Tensor q = random_tensor(rng, {3, d}), kv = random_tensor(rng, {1, d});
        auto r = ad::multi_head_attention(q, kv, kv, 2, w);
        for (const auto& wt : r.weights)
            for (double a : wt.data())
                CHECK(a == 1.0);
        // every query row sees the same projected value
        for (std::size_t i = 1; i < 3; ++i)
            for (std::size_t j = 0; j < d; ++j)
                CHECK(r.output[i * d + j] == doctest::Approx(r.output[j]).epsilon(1e-14));
    }
    SUBCASE("identical keys give uniform weights")
    {
        Tensor q = random_tensor(rng, {2, d});
        Tensor row = random_tensor(rng, {1, d});
        Tensor k = ad::concat_rows({row, row, row});
        auto r = ad::multi_head_attention(q, k, random_tensor(rng, {3, d}), 2, w);
        for (const auto& wt : r.weights)
            for (double a : wt.data())
                CHECK(std::abs(a - 1.0 / 3.0) < 1e-15);
    }
    SUBCASE("hand-set heads=2 matches scalar walkthrough")
    {
        oracle::AttnParams hp;
        for (std::size_t i = 0; i < d * d; ++i) {
            hp.wq.push_back(0.1 * static_cast<double>(i % 5) - 0.2);
            hp.wk.push_back(0.05 * static_cast<double>(i % 7) - 0.1);
            hp.wv.push_back(0.2 * static_cast<double>((i * 3) % 4) - 0.3);
            hp.wo.push_back(i % (d + 1) == 0 ? 1.0 : 0.1);
        }
        hp.bq = {0.1, 0.0, -0.1, 0.2};
        hp.bk = {0.0, 0.3, 0.0, -0.2};
        hp.bv = {0.5, 0.0, 0.0, 0.1};
        hp.bo = {0.0, 0.0, 0.25, 0.0};
        std::vector<double> q = {1.0, 0.5, -0.5, 2.0, 0.0, 1.0, 1.0, -1.0};
        std::vector<double> k = {0.5, -1.0, 1.5, 0.0, 2.0, 0.5, 0.0, 1.0};
        std::vector<double> v = {1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.5};
        std::vector<oracle::Vec> ref_weights;
        auto expected = oracle::attention(q, 2, k, v, 2, d, 2, hp, &ref_weights);
        auto r = ad::multi_head_attention(Tensor::from({2, d}, q), Tensor::from({2, d}, k), Tensor::from({2, d}, v),
                                          2, to_weights(hp, d));
        CHECK(max_abs_diff(r.output.data(), expected) < 1e-10);
        for (int h = 0; h < 2; ++h)
            CHECK(max_abs_diff(r.weights[h].data(), ref_weights[h]) < 1e-12);
    }
    SUBCASE("indivisible head count")
    {
        CHECK_THROWS_AS(ad::multi_head_attention(Tensor::zeros({1, d}), Tensor::zeros({1, d}), Tensor::zeros({1, d}),
                                                 3, w),
                        ConfigError);
    }
    SUBCASE("gradient")
    {
        Tensor k = random_tensor(rng, {3, d}), v = random_tensor(rng, {3, d});
        auto f = [&](const Tensor& q) { return weighted_sum(ad::multi_head_attention(q, k, v, 2, w).output, 11); };
        CHECK(ad::grad_check(f, random_tensor(rng, {2, d})) < 1e-6);
        auto g = [&](const Tensor& wq) {
            auto ww = w;
            ww.wk = wq;
            return weighted_sum(ad::multi_head_attention(k, k, v, 2, ww).output, 12);
        };
        CHECK(ad::grad_check(g, w.wk) < 1e-6);
    }
}

TEST_CASE("cross_entropy")
{
    CHECK(ad::cross_entropy(Tensor::full({11}, 0.7), 3).item() == doctest::Approx(std::log(11.0)).epsilon(1e-14));
    CHECK(ad::cross_entropy(Tensor::from({3}, {1000.0, 0.0, -3.0}), 0).item() < 1e-12);
    CHECK(ad::cross_entropy(Tensor::from({3}, {1, 2, 3}), 0).item() == doctest::Approx(2.40760596).epsilon(1e-8));
    CHECK_THROWS_AS(ad::cross_entropy(Tensor::zeros({3}), 3), std::out_of_range);
}

TEST_CASE("layer_norm gradient")
{
    std::mt19937_64 rng(13);
    Tensor g = random_tensor(rng, {5}), b = random_tensor(rng, {5});
    CHECK(ad::grad_check([&](const Tensor& x) { return weighted_sum(ad::layer_norm(x, g, b), 14); },
                         random_tensor(rng, {3, 5})) < 1e-5);
}

TEST_CASE("backward")
{
    SUBCASE("square")
    {
        Tensor x = Tensor::scalar(3.0, true);
        ad::backward(ad::mul(x, x));
        CHECK(x.grad()[0] == 6.0);
    }
    SUBCASE("constant loss")
    {
        Tensor x = Tensor::scalar(3.0, true);
        Tensor c = Tensor::scalar(2.0);
        ad::backward(ad::add(c, ad::scale(x, 0.0)));
        CHECK(x.grad()[0] == 0.0);
    }
    SUBCASE("non-scalar loss")
    {
        CHECK_THROWS_AS(ad::backward(Tensor::zeros({2}, true)), UsageError);
    }
    SUBCASE("tensor feeding two consumers gets the sum of both paths")
    {
        Tensor x = Tensor::from({2}, {0.5, -1.5}, true);
        Tensor a = Tensor::from({2}, {2.0, 3.0});
        ad::backward(ad::add(ad::sum(ad::mul(x, a)), ad::sum(ad::mul(x, x))));
        // d/dx (a.x + x.x) = a + 2x
        CHECK(x.grad()[0] == 2.0 + 1.0);
        CHECK(x.grad()[1] == 3.0 - 3.0);
    }
    SUBCASE("composed graph matches finite differences")
    {
        std::mt19937_64 rng(15);
        Tensor w = random_tensor(rng, {4, 6}), b = random_tensor(rng, {6});
        auto f = [&](const Tensor& x) {
            Tensor probs = ad::softmax(ad::relu(ad::linear(x, w, b)), 0);
            return ad::cross_entropy(ad::scale(probs, 3.0), 2);
        };
        CHECK(ad::grad_check(f, random_tensor(rng, {4})) < 1e-4);
    }
    SUBCASE("graph is released and no-grad records nothing")
    {
        Tensor x = Tensor::scalar(2.0, true);
        Tensor y = ad::mul(x, x);
        CHECK(y.get()->node != nullptr);
        ad::backward(y);
        CHECK(y.get()->node == nullptr);
        ad::NoGradGuard guard;
        CHECK_FALSE(ad::mul(x, x).requires_grad());
    }
}

TEST_CASE("grad_check")
{
    std::mt19937_64 rng(16);
    auto sq = [](const Tensor& x) { return ad::sum(ad::mul(x, x)); };
    CHECK(ad::grad_check(sq, random_tensor(rng, {7})) < 1e-9);
    CHECK_THROWS(ad::grad_check(sq, random_tensor(rng, {7}), 0.0));
}

TEST_CASE("directional grad_check")
{
    // near zero a cube has curvature large against its slope; plain central
    // differences are off by h^2 / 3x^2 = 3e-3 here, the extrapolated ones not
    auto x = Tensor::full({5}, 1e-4, true);
    auto cube = [&] { return ad::sum(ad::mul(x, ad::mul(x, x))); };
    auto dir = Tensor::full({5}, 1.0);
    auto e = ad::grad_check_direction(cube, {x}, {dir});
    REQUIRE(e.has_value());
    CHECK(*e < 1e-6);

    // a relu whose stencil straddles 0 is reported, not scored
    auto y = Tensor::from({3}, {0.5, 3e-6, -0.7}, true);
    auto r = [&] { return ad::sum(ad::activation(y, ad::Activation::relu)); };
    CHECK_FALSE(ad::grad_check_direction(r, {y}, {Tensor::full({3}, 1.0)}).has_value());
    y.data()[1] = 0.2;
    auto ok = ad::grad_check_direction(r, {y}, {Tensor::full({3}, 1.0)});
    REQUIRE(ok.has_value());
    CHECK(*ok < 1e-9);

    // so is a max-pool whose winner changes
    auto v = Tensor::from({1, 1, 1, 2}, {1.0, 1.0 + 1e-6}, true);
    auto mp = [&] { return ad::sum(ad::maxpool3d(v, {1, 1, 2}, {1, 1, 2})); };
    CHECK_FALSE(ad::grad_check_direction(mp, {v}, {Tensor::from({1, 1, 1, 2}, {1.0, -1.0})}).has_value());

    CHECK_THROWS_AS(ad::grad_check_direction(cube, {x}, {Tensor::full({4}, 1.0)}), DimensionError);
    CHECK_THROWS_AS(ad::grad_check_direction(cube, {x}, {}), DimensionError);
}

TEST_CASE("branch recorder")
{
    auto a = Tensor::from({3}, {0.5, -0.1, 0.2});
    ad::BranchRecorder rec;
    ad::activation(a, ad::Activation::relu);
    auto s1 = rec.take();
    ad::activation(a, ad::Activation::relu);
    CHECK(rec.take() == s1);
    a.data()[1] = 0.1;
    ad::activation(a, ad::Activation::relu);
    CHECK(rec.take() != s1);
    ad::activation(a, ad::Activation::tanh);  // smooth, not recorded
    CHECK(rec.take() == 0);
}

TEST_CASE("forward passes are deterministic")
{
    std::mt19937_64 rng(17);
    Tensor x = random_tensor(rng, {2, 3, 5, 5});
    Tensor w = random_tensor(rng, {4, 2, 3, 3, 3});
    Tensor a = ad::conv3d(x, w, {1, 1, 1}, {1, 1, 1});
    Tensor b = ad::conv3d(x, w, {1, 1, 1}, {1, 1, 1});
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("tensor file round trip and checkpoint")
{
    auto dir = std::filesystem::temp_directory_path() / "mmasd_test_ckpt";
    std::filesystem::remove_all(dir);
    nn::ParameterStore store(3);
    nn::Linear lin(store, "head", 3, 2);
    std::vector<double> stats = {1.5, 2.5};
    io::save_checkpoint(dir, store, {{"bn.mean", &stats}}, {{"seed", 3}});

    std::ifstream raw(dir / "head.weight.mmt", std::ios::binary);
    char magic[4];
    raw.read(magic, 4);
    CHECK(std::string(magic, 4) == "MMT1");

    nn::ParameterStore other(99);
    nn::Linear lin2(other, "head", 3, 2);
    std::vector<double> stats2;
    auto meta = io::load_checkpoint(dir, other, {{"bn.mean", &stats2}});
    CHECK(meta["seed"] == 3);
    CHECK(std::equal(lin.weight.data().begin(), lin.weight.data().end(), lin2.weight.data().begin()));
    CHECK(stats2 == stats);

    nn::ParameterStore wrong(1);
    nn::Linear bad(wrong, "head", 4, 2);
    CHECK_THROWS_AS(io::load_checkpoint(dir, wrong, {}), io::IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("parameter names are unique")
{
    nn::ParameterStore store;
    store.zeros("a", {1});
    CHECK_THROWS_AS(store.zeros("a", {2}), ConfigError);
}
