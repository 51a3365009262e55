#include "mmasd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace mmasd::ad {

namespace {

thread_local bool g_no_grad = false;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

#ifndef NDEBUG
bool all_finite(std::span<const double> values)
{
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}
#endif

// Creates the output of an operation and, when any input participates in
// differentiation, records the node that will propagate its gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn)
{
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
#ifndef NDEBUG
    if (!all_finite(impl->data)) {
        bool inputs_finite = std::all_of(inputs.begin(), inputs.end(),
                                         [](const Tensor& t) { return all_finite(t.data()); });
        if (inputs_finite)
            throw std::domain_error("non-finite value produced from finite inputs");
    }
#endif
    bool needs_grad = !g_no_grad && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                          return t.requires_grad();
                      });
    if (needs_grad) {
        impl->requires_grad = true;
        auto node = std::make_shared<Node>();
        for (auto& t : inputs)
            node->inputs.push_back(t.impl());
        node->backward = std::move(backward_fn);
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

// Gradient buffer of an input, or nullptr when it takes no gradient.
double* grad_of(const Tensor& t)
{
    TensorImpl* impl = t.get();
    if (!impl->requires_grad)
        return nullptr;
    impl->ensure_grad();
    return impl->grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op)
{
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
}

}  // namespace

std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

void TensorImpl::ensure_grad()
{
    if (grad.size() != data.size())
        grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad)
{
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad)
{
    std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad)
{
    for (auto extent : shape)
        if (extent == 0)
            throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (numel(shape) != values.size())
        throw DimensionError("tensor " + shape_str(shape) + " cannot hold " +
                             std::to_string(values.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    if (requires_grad)
        impl->ensure_grad();
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad)
{
    return from({1}, {value}, requires_grad);
}

std::span<double> Tensor::grad()
{
    impl_->ensure_grad();
    return impl_->grad;
}

std::span<const double> Tensor::grad() const
{
    impl_->ensure_grad();
    return impl_->grad;
}

double Tensor::item() const
{
    if (size() != 1)
        throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool flag)
{
    impl_->requires_grad = flag;
    if (flag)
        impl_->ensure_grad();
    else
        impl_->grad.clear();
}

void Tensor::zero_grad()
{
    if (!impl_->grad.empty())
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const
{
    return from(shape(), impl_->data, false);
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] + b[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& o) {
        for (const Tensor* t : {&a, &b})
            if (double* g = grad_of(*t))
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    g[i] += o.grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] - b[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] += o.grad[i];
        if (double* g = grad_of(b))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] -= o.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] * b[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] += o.grad[i] * b[i];
        if (double* g = grad_of(b))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] += o.grad[i] * a[i];
    });
}

Tensor scale(const Tensor& a, double factor)
{
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] * factor;
    return make_result(a.shape(), std::move(out), {a}, [a, factor](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] += o.grad[i] * factor;
    });
}

Tensor add_bias(const Tensor& a, const Tensor& bias)
{
    std::size_t n = bias.size();
    if (bias.rank() != 1 || a.shape().back() != n)
        throw DimensionError("add_bias: trailing extent of " + shape_str(a.shape()) +
                             " does not match bias " + shape_str(bias.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] + bias[i % n];
    return make_result(a.shape(), std::move(out), {a, bias}, [a, bias, n](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] += o.grad[i];
        if (double* g = grad_of(bias))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i % n] += o.grad[i];
    });
}

Tensor reshape(const Tensor& a, Shape shape)
{
    if (numel(shape) != a.size())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a}, [a](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[i] += o.grad[i];
    });
}

Tensor transpose(const Tensor& a)
{
    require_rank(a, 2, "transpose");
    std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[j * m + i] = a[i * n + j];
    return make_result({n, m}, std::move(out), {a}, [a, m, n](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    g[i * n + j] += o.grad[j * m + i];
    });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end)
{
    require_rank(a, 2, "slice_cols");
    std::size_t m = a.dim(0), n = a.dim(1);
    if (begin >= end || end > n)
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    std::size_t w = end - begin;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
            out[i * w + j] = a[i * n + begin + j];
    return make_result({m, w}, std::move(out), {a}, [a, m, n, w, begin](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    g[i * n + begin + j] += o.grad[i * w + j];
    });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end)
{
    std::size_t rows = a.dim(0);
    if (begin >= end || end > rows)
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    std::size_t stride = a.size() / rows;
    Shape shape = a.shape();
    shape[0] = end - begin;
    std::vector<double> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
    return make_result(std::move(shape), std::move(out), {a}, [a, begin, stride](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                g[begin * stride + i] += o.grad[i];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts)
{
    if (parts.empty())
        throw DimensionError("concat_cols: no inputs");
    std::size_t m = parts[0].dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != m)
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        n += p.dim(1);
    }
    std::vector<double> out(m * n);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out[i * n + offset + j] = p[i * w + j];
        offset += w;
    }
    return make_result({m, n}, std::move(out), parts, [parts, m, n](TensorImpl& o) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            std::size_t w = p.dim(1);
            if (double* g = grad_of(p))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        g[i * w + j] += o.grad[i * n + offset + j];
            offset += w;
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts)
{
    if (parts.empty())
        throw DimensionError("concat_rows: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
            throw DimensionError("concat_rows: trailing extents differ " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Shape shape = parts[0].shape();
    shape[0] = rows;
    return make_result(std::move(shape), std::move(out), parts, [parts](TensorImpl& o) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            if (double* g = grad_of(p))
                for (std::size_t i = 0; i < p.size(); ++i)
                    g[i] += o.grad[offset + i];
            offset += p.size();
        }
    });
}

Tensor sum(const Tensor& a)
{
    double total = 0.0;
    for (double v : a.data())
        total += v;
    return make_result({1}, {total}, {a}, [a](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < a.size(); ++i)
                g[i] += o.grad[0];
    });
}

Tensor mean(const Tensor& a)
{
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_rows(const Tensor& a)
{
    require_rank(a, 2, "mean_rows");
    std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[j] += a[i * n + j];
    for (auto& v : out)
        v /= static_cast<double>(m);
    return make_result({n}, std::move(out), {a}, [a, m, n](TensorImpl& o) {
        if (double* g = grad_of(a))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    g[i * n + j] += o.grad[j] / static_cast<double>(m);
    });
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    RowMap(out.data(), m, n).noalias() = ConstRowMap(a.data().data(), m, k) * ConstRowMap(b.data().data(), k, n);
    return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](TensorImpl& o) {
        ConstRowMap dC(o.grad.data(), m, n);
        if (double* g = grad_of(a))
            RowMap(g, m, k).noalias() += dC * ConstRowMap(b.data().data(), k, n).transpose();
        if (double* g = grad_of(b))
            RowMap(g, k, n).noalias() += ConstRowMap(a.data().data(), m, k).transpose() * dC;
    });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias)
{
    if (weight.rank() != 2 || input.shape().back() != weight.dim(0))
        throw DimensionError("linear: input " + shape_str(input.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    std::size_t d_in = weight.dim(0), d_out = weight.dim(1);
    std::size_t rows = input.size() / d_in;
    Tensor flat = input.rank() == 2 ? input : reshape(input, {rows, d_in});
    Tensor out = add_bias(matmul(flat, weight), bias);
    if (input.rank() == 2)
        return out;
    Shape shape = input.shape();
    shape.back() = d_out;
    return reshape(out, std::move(shape));
}

namespace {

thread_local int recorder_depth = 0;
thread_local std::uint64_t branch_hash = 0;

inline void note_branch(std::uint64_t v)
{
    // splitmix-style mixing, order sensitive
    branch_hash ^= v + 0x9e3779b97f4a7c15ULL + (branch_hash << 6) + (branch_hash >> 2);
}

}  // namespace

BranchRecorder::BranchRecorder()
{
    if (recorder_depth++ == 0)
        branch_hash = 0;
}

BranchRecorder::~BranchRecorder()
{
    --recorder_depth;
}

std::uint64_t BranchRecorder::take()
{
    std::uint64_t h = branch_hash;
    branch_hash = 0;
    return h;
}

Tensor activation(const Tensor& input, Activation kind)
{
    if (kind == Activation::relu && recorder_depth > 0)
        for (std::size_t i = 0; i < input.size(); ++i)
            note_branch(input[i] > 0.0);
    std::vector<double> out(input.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = input[i];
        switch (kind) {
        case Activation::relu:
            out[i] = x > 0.0 ? x : 0.0;
            break;
        case Activation::sigmoid:
            out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            break;
        case Activation::tanh:
            out[i] = std::tanh(x);
            break;
        }
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return make_result(input.shape(), std::move(out), {input}, [input, kind, y](TensorImpl& o) {
        double* g = grad_of(input);
        if (!g)
            return;
        const auto& Y = *y;
        for (std::size_t i = 0; i < Y.size(); ++i) {
            double d = 0.0;
            switch (kind) {
            case Activation::relu:
                d = input[i] > 0.0 ? 1.0 : 0.0;
                break;
            case Activation::sigmoid:
                d = Y[i] * (1.0 - Y[i]);
                break;
            case Activation::tanh:
                d = 1.0 - Y[i] * Y[i];
                break;
            }
            g[i] += o.grad[i] * d;
        }
    });
}

Tensor softmax(const Tensor& input, std::size_t axis)
{
    if (axis >= input.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(input.shape()));
    const auto& s = input.shape();
    std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
    std::size_t len = s[axis];
    std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
    std::vector<double> out(input.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * len * inner + in;
            double mx = input[base];
            for (std::size_t k = 1; k < len; ++k)
                mx = std::max(mx, input[base + k * inner]);
            double total = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                double e = std::exp(input[base + k * inner] - mx);
                out[base + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < len; ++k)
                out[base + k * inner] /= total;
        }
    auto y = std::make_shared<std::vector<double>>(out);
    return make_result(s, std::move(out), {input}, [input, y, outer, len, inner](TensorImpl& o) {
        double* g = grad_of(input);
        if (!g)
            return;
        const auto& Y = *y;
        for (std::size_t a = 0; a < outer; ++a)
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t base = a * len * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < len; ++k)
                    dot += o.grad[base + k * inner] * Y[base + k * inner];
                for (std::size_t k = 0; k < len; ++k) {
                    std::size_t idx = base + k * inner;
                    g[idx] += Y[idx] * (o.grad[idx] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps)
{
    std::size_t d = input.shape().back();
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layer_norm: scale/shift length does not match " + shape_str(input.shape()));
    std::size_t rows = input.size() / d;
    std::vector<double> out(input.size());
    auto xhat = std::make_shared<std::vector<double>>(input.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            mu += input[r * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = input[r * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (input[r * d + j] - mu) * is;
            (*xhat)[r * d + j] = xh;
            out[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    return make_result(input.shape(), std::move(out), {input, gamma, beta},
                       [input, gamma, beta, xhat, inv_std, rows, d](TensorImpl& o) {
                           const auto& XH = *xhat;
                           const double* dy = o.grad.data();
                           if (double* g = grad_of(gamma))
                               for (std::size_t i = 0; i < XH.size(); ++i)
                                   g[i % d] += dy[i] * XH[i];
                           if (double* g = grad_of(beta))
                               for (std::size_t i = 0; i < XH.size(); ++i)
                                   g[i % d] += dy[i];
                           double* g = grad_of(input);
                           if (!g)
                               return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   double dxh = dy[r * d + j] * gamma[j];
                                   m1 += dxh;
                                   m2 += dxh * XH[r * d + j];
                               }
                               m1 /= static_cast<double>(d);
                               m2 /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   double dxh = dy[r * d + j] * gamma[j];
                                   g[r * d + j] += (*inv_std)[r] * (dxh - m1 - XH[r * d + j] * m2);
                               }
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::size_t target)
{
    std::size_t n = logits.size();
    if (target >= n)
        throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside " +
                                std::to_string(n) + " classes");
    double mx = *std::max_element(logits.data().begin(), logits.data().end());
    double total = 0.0;
    for (double v : logits.data())
        total += std::exp(v - mx);
    double lse = mx + std::log(total);
    return make_result({1}, {lse - logits[target]}, {logits}, [logits, target, lse](TensorImpl& o) {
        if (double* g = grad_of(logits))
            for (std::size_t i = 0; i < logits.size(); ++i)
                g[i] += o.grad[0] * (std::exp(logits[i] - lse) - (i == target ? 1.0 : 0.0));
    });
}

// ---------------------------------------------------------------------------

namespace {

struct Volume {
    std::size_t c, d, h, w;
};

Volume volume_of(const Tensor& t, const char* op)
{
    if (t.rank() != 4)
        throw DimensionError(std::string(op) + ": expected C x D x H x W input, got " + shape_str(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

// Output positions o in [lo, hi) for which o*stride - pad + k lands inside [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t stride,
                                                std::size_t pad, std::size_t k)
{
    // need o*stride + k >= pad  and  o*stride + k < extent + pad
    std::size_t lo = 0;
    if (k < pad)
        lo = (pad - k + stride - 1) / stride;
    std::size_t hi = 0;
    if (extent + pad > k)
        hi = std::min(out, (extent + pad - k + stride - 1) / stride);
    return {std::min(lo, hi), hi};
}

struct ConvGeometry {
    Volume in;
    std::size_t out_channels;
    Triple kernel, out, stride, padding;
};

// Visits every (weight, output row, input row) combination that contributes;
// fn receives the valid output-column range [w0, w1).
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn)
{
    const auto& in = g.in;
    const auto& k = g.kernel;
    const auto& out = g.out;
    const std::size_t out_plane = out[1] * out[2];
    const std::size_t in_plane = in.h * in.w;
    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
        for (std::size_t ic = 0; ic < in.c; ++ic)
            for (std::size_t kd = 0; kd < k[0]; ++kd) {
                auto [d0, d1] = valid_range(out[0], in.d, g.stride[0], g.padding[0], kd);
                for (std::size_t kh = 0; kh < k[1]; ++kh) {
                    auto [h0, h1] = valid_range(out[1], in.h, g.stride[1], g.padding[1], kh);
                    for (std::size_t kw = 0; kw < k[2]; ++kw) {
                        auto [w0, w1] = valid_range(out[2], in.w, g.stride[2], g.padding[2], kw);
                        std::size_t widx = (((oc * in.c + ic) * k[0] + kd) * k[1] + kh) * k[2] + kw;
                        for (std::size_t od = d0; od < d1; ++od) {
                            std::size_t id = od * g.stride[0] + kd - g.padding[0];
                            for (std::size_t oh = h0; oh < h1; ++oh) {
                                std::size_t ih = oh * g.stride[1] + kh - g.padding[1];
                                std::size_t obase = oc * out[0] * out_plane + od * out_plane + oh * out[2];
                                std::size_t ibase = ic * in.d * in_plane + id * in_plane + ih * in.w;
                                fn(widx, obase, ibase, w0, w1);
                            }
                        }
                    }
                }
            }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, Triple stride, Triple padding)
{
    Volume in = volume_of(input, "conv3d");
    if (weight.rank() != 5 || weight.dim(1) != in.c)
        throw DimensionError("conv3d: weight " + shape_str(weight.shape()) + " does not match input " +
                             shape_str(input.shape()));
    for (auto s : stride)
        if (s == 0)
            throw DimensionError("conv3d: stride components must be >= 1");
    std::size_t co = weight.dim(0);
    Triple k{weight.dim(2), weight.dim(3), weight.dim(4)};
    Triple extent{in.d, in.h, in.w};
    Triple out{};
    for (int a = 0; a < 3; ++a) {
        if (k[a] > extent[a] + 2 * padding[a])
            throw DimensionError("conv3d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                                 shape_str(input.shape()));
        out[a] = (extent[a] + 2 * padding[a] - k[a]) / stride[a] + 1;
    }
    ConvGeometry geo{in, co, k, out, stride, padding};
    std::vector<double> result(co * out[0] * out[1] * out[2], 0.0);
    auto X = input.data();
    auto W = weight.data();
    for_each_tap(geo, [&](std::size_t widx, std::size_t obase, std::size_t ibase, std::size_t w0, std::size_t w1) {
        double wv = W[widx];
        std::size_t kw = widx % k[2];
        for (std::size_t ow = w0; ow < w1; ++ow)
            result[obase + ow] += wv * X[ibase + ow * stride[2] + kw - padding[2]];
    });

    return make_result({co, out[0], out[1], out[2]}, std::move(result), {input, weight},
                       [input, weight, geo](TensorImpl& o) {
                           double* gx = grad_of(input);
                           double* gw = grad_of(weight);
                           auto X = input.data();
                           auto W = weight.data();
                           const double* dy = o.grad.data();
                           for_each_tap(geo, [&](std::size_t widx, std::size_t obase, std::size_t ibase,
                                                 std::size_t w0, std::size_t w1) {
                               std::size_t kw = widx % geo.kernel[2];
                               double wv = W[widx];
                               double acc = 0.0;
                               for (std::size_t ow = w0; ow < w1; ++ow) {
                                   std::size_t xi = ibase + ow * geo.stride[2] + kw - geo.padding[2];
                                   double g = dy[obase + ow];
                                   if (gx)
                                       gx[xi] += g * wv;
                                   acc += g * X[xi];
                               }
                               if (gw)
                                   gw[widx] += acc;
                           });
                       });
}

Tensor maxpool3d(const Tensor& input, Triple window, Triple stride)
{
    Volume in = volume_of(input, "maxpool3d");
    Triple extent{in.d, in.h, in.w};
    Triple out{};
    for (int a = 0; a < 3; ++a) {
        if (window[a] == 0 || stride[a] == 0 || window[a] > extent[a])
            throw DimensionError("maxpool3d: window does not fit input " + shape_str(input.shape()));
        out[a] = (extent[a] - window[a]) / stride[a] + 1;
    }
    std::size_t n_out = in.c * out[0] * out[1] * out[2];
    std::vector<double> result(n_out);
    auto argmax = std::make_shared<std::vector<std::size_t>>(n_out);
    auto X = input.data();
    std::size_t idx = 0;
    for (std::size_t c = 0; c < in.c; ++c)
        for (std::size_t od = 0; od < out[0]; ++od)
            for (std::size_t oh = 0; oh < out[1]; ++oh)
                for (std::size_t ow = 0; ow < out[2]; ++ow, ++idx) {
                    std::size_t best = 0;
                    double best_v = 0.0;
                    bool first = true;
                    for (std::size_t a = 0; a < window[0]; ++a)
                        for (std::size_t b = 0; b < window[1]; ++b)
                            for (std::size_t e = 0; e < window[2]; ++e) {
                                std::size_t xi = ((c * in.d + od * stride[0] + a) * in.h + oh * stride[1] + b) *
                                                     in.w +
                                                 ow * stride[2] + e;
                                if (first || X[xi] > best_v) {
                                    best = xi;
                                    best_v = X[xi];
                                    first = false;
                                }
                            }
                    result[idx] = best_v;
                    (*argmax)[idx] = best;
                    if (recorder_depth > 0)
                        note_branch(best);
                }
    return make_result({in.c, out[0], out[1], out[2]}, std::move(result), {input}, [input, argmax](TensorImpl& o) {
        if (double* g = grad_of(input))
            for (std::size_t i = 0; i < argmax->size(); ++i)
                g[(*argmax)[i]] += o.grad[i];
    });
}

Tensor global_avg_pool(const Tensor& input)
{
    Volume in = volume_of(input, "global_avg_pool");
    std::size_t spatial = in.d * in.h * in.w;
    std::vector<double> out(in.c, 0.0);
    for (std::size_t c = 0; c < in.c; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < spatial; ++i)
            total += input[c * spatial + i];
        out[c] = total / static_cast<double>(spatial);
    }
    return make_result({in.c}, std::move(out), {input}, [input, spatial](TensorImpl& o) {
        if (double* g = grad_of(input))
            for (std::size_t i = 0; i < input.size(); ++i)
                g[i] += o.grad[i / spatial] / static_cast<double>(spatial);
    });
}

namespace {

// Batch norm over a [C x N] matrix whose rows are channels.
Tensor batch_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                       BatchNormState& state, const BatchNormOptions& opt)
{
    std::size_t c = x.dim(0), n = x.dim(1);
    std::vector<double> mu(c), inv_std(c);
    if (mode == Mode::train) {
        if (n < 2)
            throw DimensionError("batch_norm: train mode needs >= 2 elements per channel, got " +
                                 std::to_string(n));
        std::vector<double> var(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                m += x[ch * n + i];
            m /= static_cast<double>(n);
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double d = x[ch * n + i] - m;
                v += d * d;
            }
            v /= static_cast<double>(n);
            mu[ch] = m;
            var[ch] = v;
            inv_std[ch] = 1.0 / std::sqrt(v + opt.eps);
        }
        if (!state.initialized) {
            state.running_mean = mu;
            state.running_var = var;
            state.initialized = true;
        } else {
            for (std::size_t ch = 0; ch < c; ++ch) {
                state.running_mean[ch] = (1.0 - opt.momentum) * state.running_mean[ch] + opt.momentum * mu[ch];
                state.running_var[ch] = (1.0 - opt.momentum) * state.running_var[ch] + opt.momentum * var[ch];
            }
        }
    } else {
        if (!state.initialized)
            throw StateError("batch_norm: eval mode requires running statistics from a train pass");
        if (state.running_mean.size() != c)
            throw DimensionError("batch_norm: running statistics have " + std::to_string(state.running_mean.size()) +
                                 " channels, input has " + std::to_string(c));
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = state.running_mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + opt.eps);
        }
    }
    std::vector<double> out(c * n);
    auto xhat = std::make_shared<std::vector<double>>(c * n);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < n; ++i) {
            double xh = (x[ch * n + i] - mu[ch]) * inv_std[ch];
            (*xhat)[ch * n + i] = xh;
            out[ch * n + i] = xh * gamma[ch] + beta[ch];
        }
    bool batch_stats = mode == Mode::train;
    return make_result({c, n}, std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat, inv_std, c, n, batch_stats](TensorImpl& o) {
                           const auto& XH = *xhat;
                           const double* dy = o.grad.data();
                           double* gg = grad_of(gamma);
                           double* gb = grad_of(beta);
                           double* gx = grad_of(x);
                           for (std::size_t ch = 0; ch < c; ++ch) {
                               double sum_dy = 0.0, sum_dy_xh = 0.0;
                               for (std::size_t i = 0; i < n; ++i) {
                                   sum_dy += dy[ch * n + i];
                                   sum_dy_xh += dy[ch * n + i] * XH[ch * n + i];
                               }
                               if (gg)
                                   gg[ch] += sum_dy_xh;
                               if (gb)
                                   gb[ch] += sum_dy;
                               if (!gx)
                                   continue;
                               double scale = gamma[ch] * inv_std[ch];
                               double m1 = sum_dy / static_cast<double>(n);
                               double m2 = sum_dy_xh / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                   double d = dy[ch * n + i];
                                   if (batch_stats)
                                       d -= m1 + XH[ch * n + i] * m2;
                                   gx[ch * n + i] += scale * d;
                               }
                           }
                       });
}

}  // namespace

std::vector<Tensor> batch_norm(const std::vector<Tensor>& batch, const Tensor& gamma, const Tensor& beta,
                               Mode mode, BatchNormState& state, BatchNormOptions options)
{
    if (batch.empty())
        throw DimensionError("batch_norm: empty batch");
    std::size_t c = batch[0].dim(0);
    if (gamma.size() != c || beta.size() != c)
        throw DimensionError("batch_norm: gamma/beta length does not match channel extent of " +
                             shape_str(batch[0].shape()));
    std::vector<Tensor> rows;
    rows.reserve(batch.size());
    for (const auto& t : batch) {
        if (t.dim(0) != c)
            throw DimensionError("batch_norm: channel mismatch " + shape_str(t.shape()));
        rows.push_back(reshape(t, {c, t.size() / c}));
    }
    Tensor joined = rows.size() == 1 ? rows[0] : concat_cols(rows);
    Tensor normed = batch_norm_rows(joined, gamma, beta, mode, state, options);
    std::vector<Tensor> result;
    result.reserve(batch.size());
    std::size_t offset = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::size_t w = rows[i].dim(1);
        Tensor part = rows.size() == 1 ? normed : slice_cols(normed, offset, offset + w);
        result.push_back(reshape(part, batch[i].shape()));
        offset += w;
    }
    return result;
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode,
                  BatchNormState& state, BatchNormOptions options)
{
    return batch_norm(std::vector<Tensor>{input}, gamma, beta, mode, state, options).front();
}

// ---------------------------------------------------------------------------

LstmCellState lstm_step(const Tensor& x, const LstmCellState& prev, const LstmWeights& w)
{
    std::size_t d_in = x.size();
    std::size_t d_h = prev.h.size();
    if (w.input_weight.rank() != 2 || w.input_weight.dim(0) != d_in || w.input_weight.dim(1) != 4 * d_h ||
        w.recurrent_weight.rank() != 2 || w.recurrent_weight.dim(0) != d_h ||
        w.recurrent_weight.dim(1) != 4 * d_h || w.bias.size() != 4 * d_h || prev.c.size() != d_h)
        throw DimensionError("lstm_step: weights " + shape_str(w.input_weight.shape()) + "/" +
                             shape_str(w.recurrent_weight.shape()) + " inconsistent with d_in=" +
                             std::to_string(d_in) + ", d_h=" + std::to_string(d_h));
    return lstm_step_projected(matmul(reshape(x, {1, d_in}), w.input_weight), prev, w);
}

LstmCellState lstm_step_projected(const Tensor& input_gates, const LstmCellState& prev, const LstmWeights& w)
{
    std::size_t d_h = prev.h.size();
    if (input_gates.size() != 4 * d_h || w.recurrent_weight.rank() != 2 || w.recurrent_weight.dim(0) != d_h ||
        w.recurrent_weight.dim(1) != 4 * d_h || w.bias.size() != 4 * d_h || prev.c.size() != d_h)
        throw DimensionError("lstm_step: gates " + shape_str(input_gates.shape()) + " / recurrent weight " +
                             shape_str(w.recurrent_weight.shape()) + " inconsistent with d_h=" + std::to_string(d_h));
    Tensor xg = input_gates.rank() == 2 ? input_gates : reshape(input_gates, {1, 4 * d_h});
    Tensor gates = add_bias(add(xg, matmul(reshape(prev.h, {1, d_h}), w.recurrent_weight)), w.bias);
    // Fused gate nonlinearities: one node per step instead of a dozen.
    std::vector<double> out(2 * d_h);
    std::vector<double> act(4 * d_h);
    for (std::size_t j = 0; j < d_h; ++j) {
        double i = 1.0 / (1.0 + std::exp(-gates[j]));
        double f = 1.0 / (1.0 + std::exp(-gates[d_h + j]));
        double g = std::tanh(gates[2 * d_h + j]);
        double o = 1.0 / (1.0 + std::exp(-gates[3 * d_h + j]));
        double c = f * prev.c[j] + i * g;
        act[j] = i, act[d_h + j] = f, act[2 * d_h + j] = g, act[3 * d_h + j] = o;
        out[d_h + j] = c;
        out[j] = o * std::tanh(c);
    }
    Tensor c_prev = prev.c;
    Tensor hc = make_result({2 * d_h}, std::move(out), {gates, c_prev},
                            [gates, c_prev, act = std::move(act), d_h](TensorImpl& r) {
        double* gg = grad_of(gates);
        double* gc = grad_of(c_prev);
        for (std::size_t j = 0; j < d_h; ++j) {
            double i = act[j], f = act[d_h + j], g = act[2 * d_h + j], o = act[3 * d_h + j];
            double tc = std::tanh(r.data[d_h + j]);
            double dh = r.grad[j];
            double dc = r.grad[d_h + j] + dh * o * (1.0 - tc * tc);
            if (gg) {
                gg[j] += dc * g * i * (1.0 - i);
                gg[d_h + j] += dc * c_prev[j] * f * (1.0 - f);
                gg[2 * d_h + j] += dc * i * (1.0 - g * g);
                gg[3 * d_h + j] += dh * tc * o * (1.0 - o);
            }
            if (gc)
                gc[j] += dc * f;
        }
    });
    Tensor h = slice_rows(hc, 0, d_h);
    Tensor c = slice_rows(hc, d_h, 2 * d_h);
    return {reshape(h, {d_h}), reshape(c, {d_h})};
}

AttentionResult multi_head_attention(const Tensor& q_seq, const Tensor& k_seq, const Tensor& v_seq,
                                     std::size_t heads, const AttentionWeights& w)
{
    if (q_seq.rank() != 2 || k_seq.rank() != 2 || v_seq.rank() != 2)
        throw DimensionError("multi_head_attention: sequences must be rank 2");
    std::size_t d = q_seq.dim(1);
    if (heads == 0 || d % heads != 0)
        throw ConfigError("multi_head_attention: model dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    if (k_seq.dim(1) != d || v_seq.dim(1) != d || k_seq.dim(0) != v_seq.dim(0))
        throw DimensionError("multi_head_attention: key/value shapes " + shape_str(k_seq.shape()) + ", " +
                             shape_str(v_seq.shape()) + " do not match query dim " + std::to_string(d));
    std::size_t dk = d / heads;
    Tensor q = linear(q_seq, w.wq, w.bq);
    Tensor k = linear(k_seq, w.wk, w.bk);
    Tensor v = linear(v_seq, w.wv, w.bv);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    AttentionResult result;
    std::vector<Tensor> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
        Tensor weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
        head_out.push_back(matmul(weights, vh));
        result.weights.push_back(weights);
    }
    Tensor joined = heads == 1 ? head_out[0] : concat_cols(head_out);
    result.output = linear(joined, w.wo, w.bo);
    return result;
}

// ---------------------------------------------------------------------------

void backward(const Tensor& loss)
{
    if (!loss.defined() || loss.size() != 1)
        throw UsageError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad())
        return;

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.get(), 0}};
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        if (impl->node && next < impl->node->inputs.size()) {
            TensorImpl* child = impl->node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second)
                stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }

    for (TensorImpl* impl : order)
        if (impl->node)
            impl->grad.assign(impl->data.size(), 0.0);
    loss.get()->ensure_grad();
    loss.get()->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->node)
            (*it)->node->backward(**it);

    for (TensorImpl* impl : order)
        impl->node.reset();
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h)
{
    if (!(h > 0.0))
        throw std::invalid_argument("grad_check: step must be positive");
    Tensor x = point.clone();
    x.set_requires_grad(true);
    backward(f(x));
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double saved = x.data()[i];
        x.data()[i] = saved + h;
        double plus = f(x).item();
        x.data()[i] = saved - h;
        double minus = f(x).item();
        x.data()[i] = saved;
        double numeric = (plus - minus) / (2.0 * h);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

double grad_check_probes(const std::function<Tensor()>& f, const std::vector<GradProbe>& probes, double h)
{
    if (!(h > 0.0))
        throw std::invalid_argument("grad_check: step must be positive");
    for (const auto& p : probes) {
        Tensor t = p.tensor;
        if (!t.requires_grad())
            throw UsageError("grad_check_probes: probed tensor does not require grad");
        t.zero_grad();
    }
    backward(f());
    std::vector<double> analytic;
    for (const auto& p : probes)
        analytic.push_back(p.tensor.grad()[p.index]);
    NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t k = 0; k < probes.size(); ++k) {
        Tensor t = probes[k].tensor;
        std::size_t i = probes[k].index;
        double saved = t.data()[i];
        t.data()[i] = saved + h;
        double plus = f().item();
        t.data()[i] = saved - h;
        double minus = f().item();
        t.data()[i] = saved;
        double numeric = (plus - minus) / (2.0 * h);
        double denom = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
    }
    return worst;
}

std::optional<double> grad_check_direction(const std::function<Tensor()>& f, const std::vector<Tensor>& tensors,
                                           const std::vector<Tensor>& directions, double h)
{
    if (!(h > 0.0))
        throw std::invalid_argument("grad_check: step must be positive");
    if (tensors.size() != directions.size())
        throw DimensionError("grad_check_direction: one direction per tensor");
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        Tensor t = tensors[k];
        if (t.shape() != directions[k].shape())
            throw DimensionError("grad_check_direction: direction shape " + shape_str(directions[k].shape()) +
                                 " vs tensor " + shape_str(t.shape()));
        if (!t.requires_grad())
            throw UsageError("grad_check_direction: tensor does not require grad");
        t.zero_grad();
    }
    BranchRecorder rec;
    backward(f());
    std::uint64_t base = rec.take();
    double analytic = 0.0;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        auto g = tensors[k].grad();
        auto d = directions[k].data();
        for (std::size_t i = 0; i < g.size(); ++i)
            analytic += g[i] * d[i];
    }
    NoGradGuard guard;
    auto shift = [&](double s) {
        for (std::size_t k = 0; k < tensors.size(); ++k) {
            Tensor t = tensors[k];
            auto d = directions[k].data();
            for (std::size_t i = 0; i < d.size(); ++i)
                t.data()[i] += s * d[i];
        }
    };
    std::vector<std::vector<double>> saved;
    for (const auto& t : tensors)
        saved.emplace_back(t.data().begin(), t.data().end());
    bool crossed = false;
    auto eval_at = [&](double s) {
        shift(s);
        double v = f().item();
        crossed = crossed || rec.take() != base;
        for (std::size_t k = 0; k < tensors.size(); ++k) {
            Tensor t = tensors[k];
            std::copy(saved[k].begin(), saved[k].end(), t.data().begin());
        }
        return v;
    };
    double d1 = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    double d2 = (eval_at(2.0 * h) - eval_at(-2.0 * h)) / (4.0 * h);
    if (crossed)
        return std::nullopt;
    // Richardson: cancels the h^2 term, which batch-norm curvature makes large
    double numeric = (4.0 * d1 - d2) / 3.0;
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace mmasd::ad
