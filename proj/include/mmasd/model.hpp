#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmasd/nn.hpp"
#include "mmasd/preprocess.hpp"
#include "mmasd/tensor.hpp"
#include "mmasd/tensor_io.hpp"

namespace mmasd::model {

struct VivitConfig {
    std::size_t tubelet = 2;
    std::size_t patch = 10;
    std::size_t dim = 192;
    std::size_t heads = 12;
    std::size_t blocks = 4;
    std::size_t mlp_ratio = 2;
    std::size_t frames = 20;
    std::size_t size = 100;  // input H = W
};

struct Cnn3dConfig {
    std::size_t stem = 16;
    std::array<std::size_t, 4> stages{16, 32, 64, 128};
    std::size_t blocks_per_stage = 1;
    std::size_t frames = 40;
    std::size_t size = 100;
};

struct LstmConfig {
    std::size_t layers = 4;
    std::size_t hidden = 64;
    std::size_t joints = preprocess::kDefaultJoints;
    std::size_t frames = preprocess::kSkeletonFrames;
};

struct FusionConfig {
    std::size_t dim = 128;
    std::size_t heads = 8;
    double w_action = 0.5;
    double w_asd = 0.5;
};

struct ModelConfig {
    VivitConfig vivit;
    Cnn3dConfig cnn;
    LstmConfig lstm;
    FusionConfig fusion;
    std::size_t channels = 3;
    std::size_t action_classes = preprocess::kActionClasses;

    /// Full-size geometry (20-frame mesh and 40-frame flow clips at 100x100).
    static ModelConfig full();
    /// Desk-scale geometry: 4/8 frames at 20x20, d = 24, d_f = 16.
    static ModelConfig micro();

    /// Throws ConfigError naming the failing field.
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct ModelOutput {
    ad::Tensor action_logits;  // [11]
    ad::Tensor asd_logits;     // [2]
    ad::Tensor fused;          // [2 d_f]
};

/// Branch inputs in the model's own geometry.
struct ModelInput {
    ad::Tensor mesh;      // C x F_vivit x S x S
    ad::Tensor flow;      // C x F_cnn x S x S
    ad::Tensor skeleton;  // frames x (joints * 3)
};

/// Clip (F x C x H x W) -> tensor C x F x H x W.
ad::Tensor clip_tensor(const Clip& clip);

struct FusionResult {
    ad::Tensor fused;
    std::vector<ad::Tensor> weights;  // per head, [2 x 2]
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    nn::ParameterStore& parameters() { return store_; }
    const nn::ParameterStore& parameters() const { return store_; }

    /// Samples and resizes a sample's clips to the branch geometries.
    ModelInput prepare(const preprocess::Sample& sample) const;

    /// [N x d] tokens, N = (F/T)(H/P)(W/P), positional table added.
    ad::Tensor tubelet_embed(const ad::Tensor& clip) const;
    /// Attention weights of every block and head are appended to `attn` when given.
    ad::Tensor vivit_encode(const ad::Tensor& clip, std::vector<ad::Tensor>* attn = nullptr) const;
    /// Batched because batch norm pools statistics over the batch in train mode.
    std::vector<ad::Tensor> cnn3d_encode(const std::vector<ad::Tensor>& clips, ad::Mode mode);
    std::vector<ad::Tensor> cnn3d_encode(const std::vector<ad::Tensor>& clips) const;  // eval mode
    ad::Tensor lstm_encode(const ad::Tensor& skeleton) const;
    FusionResult fuse(const ad::Tensor& f_vivit, const ad::Tensor& f_cnn, const ad::Tensor& f_lstm) const;
    ModelOutput classify(const ad::Tensor& fused) const;

    std::vector<ModelOutput> forward(const std::vector<ModelInput>& batch, ad::Mode mode);
    ModelOutput forward(const ModelInput& input, ad::Mode mode);
    /// Eval-mode forward; safe to call from several threads at once.
    ModelOutput infer(const ModelInput& input) const;

    /// Parameter names per head (for separation checks).
    std::vector<std::string> head_parameters(bool action) const;

    std::vector<io::NamedBuffer> buffers();
    void save(const std::filesystem::path& dir, const nlohmann::json& extra_meta = {});
    static std::unique_ptr<Model> load(const std::filesystem::path& dir);

    // Exposed for white-box tests.
    struct EncoderBlock {
        nn::LayerNorm norm1, norm2;
        nn::Attention attn;
        nn::Linear fc1, fc2;
    };
    struct ResBlock {
        nn::Conv3d conv1, conv2, shortcut;
        nn::BatchNorm bn1, bn2;
        bool project = false;
    };
    struct Fusion {
        nn::Linear proj_q, proj_k1, proj_k2;
        nn::Attention attn;
    };

    ad::Tensor positional;
    nn::Conv3d patch_embed;
    ad::Tensor patch_bias;
    std::vector<EncoderBlock> encoder;
    nn::Linear vivit_out;

    nn::Conv3d stem;
    nn::BatchNorm stem_bn;
    std::vector<ResBlock> stages;
    nn::Linear cnn_out;

    std::vector<nn::LstmLayer> lstm;
    nn::Linear lstm_out;

    Fusion fusion;
    nn::Linear action_head, asd_head;

private:
    std::vector<ad::Tensor> run_cnn(const std::vector<ad::Tensor>& clips, ad::Mode mode) const;

    ModelConfig cfg_;
    std::uint64_t seed_;
    nn::ParameterStore store_;
};

/// w_action * CE(action) + w_asd * CE(asd). Raises ValidationError on
/// out-of-range labels.
ad::Tensor combined_loss(const ModelOutput& out, int action_label, int asd_label, double w_action, double w_asd);

}  // namespace mmasd::model
