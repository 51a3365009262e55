#include "mmasd/nn.hpp"

#include <cmath>

namespace mmasd::nn {

ad::Tensor ParameterStore::add(const std::string& name, ad::Tensor tensor)
{
    if (index_.count(name))
        throw ConfigError("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, tensor});
    return tensor;
}

ad::Tensor ParameterStore::uniform(const std::string& name, ad::Shape shape, std::size_t fan_in)
{
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(ad::numel(shape));
    for (auto& v : values)
        v = dist(rng_);
    return add(name, ad::Tensor::from(std::move(shape), std::move(values)));
}

ad::Tensor ParameterStore::zeros(const std::string& name, ad::Shape shape)
{
    return add(name, ad::Tensor::zeros(std::move(shape)));
}

ad::Tensor ParameterStore::constant(const std::string& name, ad::Shape shape, double value)
{
    return add(name, ad::Tensor::full(std::move(shape), value));
}

ad::Tensor ParameterStore::normal(const std::string& name, ad::Shape shape, double stddev)
{
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(ad::numel(shape));
    for (auto& v : values)
        v = dist(rng_);
    return add(name, ad::Tensor::from(std::move(shape), std::move(values)));
}

const Parameter& ParameterStore::find(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::out_of_range("no parameter named '" + name + "'");
    return params_[it->second];
}

std::size_t ParameterStore::count() const
{
    std::size_t n = 0;
    for (const auto& p : params_)
        n += p.tensor.size();
    return n;
}

void ParameterStore::zero_grad()
{
    for (auto& p : params_) {
        ad::Tensor t = p.tensor;
        t.zero_grad();
    }
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t d_in, std::size_t d_out)
    : weight(store.uniform(name + ".weight", {d_in, d_out}, d_in)),
      bias(store.zeros(name + ".bias", {d_out}))
{
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim)
    : gamma(store.constant(name + ".gamma", {dim}, 1.0)), beta(store.zeros(name + ".beta", {dim}))
{
}

Attention::Attention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads_)
    : heads(heads_)
{
    if (heads == 0 || dim % heads != 0)
        throw ConfigError(name + ": dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                          " heads");
    w.wq = store.uniform(name + ".wq", {dim, dim}, dim);
    w.bq = store.zeros(name + ".bq", {dim});
    w.wk = store.uniform(name + ".wk", {dim, dim}, dim);
    w.bk = store.zeros(name + ".bk", {dim});
    w.wv = store.uniform(name + ".wv", {dim, dim}, dim);
    w.bv = store.zeros(name + ".bv", {dim});
    w.wo = store.uniform(name + ".wo", {dim, dim}, dim);
    w.bo = store.zeros(name + ".bo", {dim});
}

Conv3d::Conv3d(ParameterStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
               ad::Triple kernel, ad::Triple stride_, ad::Triple padding_)
    : weight(store.uniform(name + ".weight", {c_out, c_in, kernel[0], kernel[1], kernel[2]},
                           c_in * kernel[0] * kernel[1] * kernel[2])),
      stride(stride_),
      padding(padding_)
{
}

BatchNorm::BatchNorm(ParameterStore& store, const std::string& name, std::size_t channels)
    : gamma(store.constant(name + ".gamma", {channels}, 1.0)), beta(store.zeros(name + ".beta", {channels}))
{
}

LstmLayer::LstmLayer(ParameterStore& store, const std::string& name, std::size_t d_in, std::size_t hidden_)
    : hidden(hidden_)
{
    w.input_weight = store.uniform(name + ".w_input", {d_in, 4 * hidden}, d_in);
    w.recurrent_weight = store.uniform(name + ".w_recurrent", {hidden, 4 * hidden}, hidden);
    w.bias = store.zeros(name + ".bias", {4 * hidden});
}

std::vector<ad::Tensor> LstmLayer::operator()(const std::vector<ad::Tensor>& sequence) const
{
    std::vector<ad::Tensor> rows;
    rows.reserve(sequence.size());
    for (const auto& x : sequence)
        rows.push_back(ad::reshape(x, {1, x.size()}));
    ad::Tensor hs = run(ad::concat_rows(rows));
    std::vector<ad::Tensor> outputs;
    outputs.reserve(sequence.size());
    for (std::size_t t = 0; t < sequence.size(); ++t)
        outputs.push_back(ad::reshape(ad::slice_rows(hs, t, t + 1), {hidden}));
    return outputs;
}

ad::Tensor LstmLayer::run(const ad::Tensor& sequence) const
{
    if (sequence.rank() != 2)
        throw DimensionError("LstmLayer: sequence must be [T x d_in], got " + ad::shape_str(sequence.shape()));
    ad::Tensor projected = ad::matmul(sequence, w.input_weight);
    ad::LstmCellState state{ad::Tensor::zeros({hidden}), ad::Tensor::zeros({hidden})};
    std::vector<ad::Tensor> outputs;
    outputs.reserve(sequence.dim(0));
    for (std::size_t t = 0; t < sequence.dim(0); ++t) {
        state = ad::lstm_step_projected(ad::slice_rows(projected, t, t + 1), state, w);
        outputs.push_back(ad::reshape(state.h, {1, hidden}));
    }
    return ad::concat_rows(outputs);
}

Adam::Adam(const ParameterStore& store, AdamOptions options) : opt_(options)
{
    for (const auto& p : store.all()) {
        params_.push_back(p.tensor);
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
    }
}

void Adam::step()
{
    ++t_;
    double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (!p.has_grad())
            continue;
        auto data = p.data();
        auto grad = p.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < data.size(); ++i) {
            double g = grad[i];
            m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
            v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
            data[i] -= opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
        }
    }
}

}  // namespace mmasd::nn
