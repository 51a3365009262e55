#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mmasd/tensor.hpp"

namespace mmasd::nn {

struct Parameter {
    std::string name;
    ad::Tensor tensor;
};

/// Owns the named parameters of a model. Names are unique; insertion order
/// is the canonical order used by optimizers and checkpoints.
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

    /// Weight with entries uniform in +-sqrt(1/fan_in).
    ad::Tensor uniform(const std::string& name, ad::Shape shape, std::size_t fan_in);
    ad::Tensor zeros(const std::string& name, ad::Shape shape);
    ad::Tensor constant(const std::string& name, ad::Shape shape, double value);
    ad::Tensor normal(const std::string& name, ad::Shape shape, double stddev);

    const std::vector<Parameter>& all() const { return params_; }
    const Parameter& find(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t count() const;  // total scalar parameters
    void zero_grad();

private:
    ad::Tensor add(const std::string& name, ad::Tensor tensor);

    std::mt19937_64 rng_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

struct Linear {
    ad::Tensor weight;  // [d_in x d_out]
    ad::Tensor bias;    // [d_out]

    Linear() = default;
    Linear(ParameterStore& store, const std::string& name, std::size_t d_in, std::size_t d_out);
    ad::Tensor operator()(const ad::Tensor& x) const { return ad::linear(x, weight, bias); }
};

struct LayerNorm {
    ad::Tensor gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim);
    ad::Tensor operator()(const ad::Tensor& x) const { return ad::layer_norm(x, gamma, beta); }
};

struct Attention {
    ad::AttentionWeights w;
    std::size_t heads = 1;

    Attention() = default;
    Attention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads);
    ad::AttentionResult operator()(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v) const
    {
        return ad::multi_head_attention(q, k, v, heads, w);
    }
};

/// Bias-free 3-D convolution (batch norm supplies the shift).
struct Conv3d {
    ad::Tensor weight;
    ad::Triple stride{1, 1, 1};
    ad::Triple padding{0, 0, 0};

    Conv3d() = default;
    Conv3d(ParameterStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
           ad::Triple kernel, ad::Triple stride, ad::Triple padding);
    ad::Tensor operator()(const ad::Tensor& x) const { return ad::conv3d(x, weight, stride, padding); }
};

/// Train mode updates the running statistics even through a const
/// reference; eval mode only reads them, so eval calls may run concurrently.
struct BatchNorm {
    ad::Tensor gamma, beta;
    mutable ad::BatchNormState state;

    BatchNorm() = default;
    BatchNorm(ParameterStore& store, const std::string& name, std::size_t channels);
    std::vector<ad::Tensor> operator()(const std::vector<ad::Tensor>& batch, ad::Mode mode) const
    {
        return ad::batch_norm(batch, gamma, beta, mode, state);
    }
};

struct LstmLayer {
    ad::LstmWeights w;
    std::size_t hidden = 0;

    LstmLayer() = default;
    LstmLayer(ParameterStore& store, const std::string& name, std::size_t d_in, std::size_t hidden);
    /// Runs the layer over a sequence of [d_in] inputs and returns the hidden states.
    std::vector<ad::Tensor> operator()(const std::vector<ad::Tensor>& sequence) const;
    /// Sequence as rows: [T x d_in] -> hidden states [T x hidden].
    ad::Tensor run(const ad::Tensor& sequence) const;
};

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over every parameter of a store, in store order.
class Adam {
public:
    Adam(const ParameterStore& store, AdamOptions options);
    void step();
    std::size_t steps() const { return t_; }

private:
    std::vector<ad::Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamOptions opt_;
    std::size_t t_ = 0;
};

}  // namespace mmasd::nn
