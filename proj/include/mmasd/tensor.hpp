#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmasd {

/// Raised when tensor extents do not fit an operation.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation is called on an object in the wrong state
/// (eval-mode batch norm without statistics, non-PD covariance, ...).
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when an API is called outside its contract (non-scalar loss, ...).
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised for invalid hyperparameters or layer configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace mmasd

namespace mmasd::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// One recorded operation. backward() reads the output gradient and
// accumulates into the gradients of its inputs.
struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;
    std::shared_ptr<Node> node;  // null for leaves

    void ensure_grad();
};

/// Dense row-major float64 tensor with an optional gradient.
///
/// Tensor is a cheap handle: copies alias the same storage, which is what the
/// recorded graph relies on. Use clone() for an independent copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    std::span<double> grad();
    std::span<const double> grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }

    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag);
    void zero_grad();

    /// Deep copy of the values; the copy is a graph leaf.
    Tensor clone() const;
    /// Leaf sharing nothing with the graph that produced this tensor.
    Tensor detach() const { return clone(); }

    TensorImpl* get() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// While alive on a thread, operations on that thread record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool active();

private:
    bool previous_;
};

// --- elementwise and structural ---------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a + bias, bias broadcast over the trailing axis of a.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank-2 only
/// Columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// Rows [begin, end) along axis 0 (any rank).
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Concatenation along axis 0; trailing extents must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over axis 0 of a rank-2 tensor: [n x d] -> [d].
Tensor mean_rows(const Tensor& a);

// --- dense algebra ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// input [..., d_in] x weight [d_in, d_out] + bias [d_out]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class Activation { relu, sigmoid, tanh };
Tensor activation(const Tensor& input, Activation kind);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }

Tensor softmax(const Tensor& input, std::size_t axis);
/// Per-row standardization over the trailing axis with learned scale/shift.
Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// -log softmax(logits)[target] for a rank-1 logits vector.
Tensor cross_entropy(const Tensor& logits, std::size_t target);

// --- volumetric ops (channel-first C x D x H x W) ---------------------

using Triple = std::array<std::size_t, 3>;

Tensor conv3d(const Tensor& input, const Tensor& weight, Triple stride, Triple padding);
Tensor maxpool3d(const Tensor& input, Triple window, Triple stride);
Tensor global_avg_pool(const Tensor& input);

enum class Mode { train, eval };

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;
};

struct BatchNormOptions {
    double eps = 1e-5;
    double momentum = 0.1;
};

/// Batch normalization over channel axis 0. In train mode the statistics
/// are pooled over every spatio-temporal element of every input in the
/// batch; the running statistics are seeded by the first batch and then
/// follow an exponential moving average.
std::vector<Tensor> batch_norm(const std::vector<Tensor>& batch, const Tensor& gamma,
                               const Tensor& beta, Mode mode, BatchNormState& state,
                               BatchNormOptions options = {});
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode,
                  BatchNormState& state, BatchNormOptions options = {});

// --- recurrent and attention blocks -----------------------------------

/// Gate order along the 4*d_h axis is (input, forget, cell, output).
struct LstmWeights {
    Tensor input_weight;      // [d_in x 4 d_h]
    Tensor recurrent_weight;  // [d_h x 4 d_h]
    Tensor bias;              // [4 d_h]
};

struct LstmCellState {
    Tensor h;  // [d_h]
    Tensor c;  // [d_h]
};

LstmCellState lstm_step(const Tensor& x, const LstmCellState& prev, const LstmWeights& w);
/// Same step with x * input_weight already computed ([4 d_h] or [1 x 4 d_h]);
/// lets a layer project its whole input sequence in one product.
LstmCellState lstm_step_projected(const Tensor& input_gates, const LstmCellState& prev, const LstmWeights& w);

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [d x d] / [d]
};

struct AttentionResult {
    Tensor output;                 // [L_q x d]
    std::vector<Tensor> weights;   // per head, [L_q x L_k]
};

AttentionResult multi_head_attention(const Tensor& q_seq, const Tensor& k_seq, const Tensor& v_seq,
                                     std::size_t heads, const AttentionWeights& w);

// --- differentiation --------------------------------------------------

/// Reverse-mode accumulation from a scalar loss. Leaf gradients accumulate
/// across calls; the recorded graph is released afterwards.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// using central differences with step h.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h = 1e-5);

/// Same check, restricted to selected coordinates of tensors that f closes
/// over (used for model parameters).
struct GradProbe {
    Tensor tensor;
    std::size_t index;
};
double grad_check_probes(const std::function<Tensor()>& f, const std::vector<GradProbe>& probes,
                         double h = 1e-5);

/// While alive, relu signs and max-pool winners on this thread are hashed
/// into a signature. Two evaluations with equal signatures took the same
/// branch everywhere, so f is smooth on the segment between them.
class BranchRecorder {
public:
    BranchRecorder();
    ~BranchRecorder();
    BranchRecorder(const BranchRecorder&) = delete;
    BranchRecorder& operator=(const BranchRecorder&) = delete;
    std::uint64_t take();  // signature since the last take, then reset
};

/// Directional check along d (one entry per tensor, same shapes): compares
/// the analytic sum(g . d) with central differences at h and 2h combined by
/// Richardson extrapolation, same relative error as above. Empty when the
/// stencil crosses a relu or max-pool branch point, where a difference
/// quotient says nothing about the gradient.
std::optional<double> grad_check_direction(const std::function<Tensor()>& f, const std::vector<Tensor>& tensors,
                                           const std::vector<Tensor>& directions, double h = 1e-5);

}  // namespace mmasd::ad
