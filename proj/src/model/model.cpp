#include "mmasd/model.hpp"

#include <cmath>

namespace mmasd::model {

using ad::Tensor;

namespace {

std::string join(const std::string& a, std::size_t i)
{
    return a + std::to_string(i);
}

void require(bool ok, const std::string& what)
{
    if (!ok)
        throw ConfigError(what);
}

}  // namespace

ModelConfig ModelConfig::full()
{
    return {};
}

ModelConfig ModelConfig::micro()
{
    ModelConfig c;
    c.vivit.frames = 4;
    c.vivit.size = 20;
    c.vivit.dim = 24;
    c.vivit.heads = 4;
    c.vivit.blocks = 2;
    c.cnn.frames = 8;
    c.cnn.size = 20;
    c.cnn.stem = 8;
    c.cnn.stages = {8, 8, 16, 16};
    c.fusion.dim = 16;
    return c;
}

void ModelConfig::validate() const
{
    require(vivit.tubelet > 0 && vivit.frames % vivit.tubelet == 0,
            "vivit.frames (" + std::to_string(vivit.frames) + ") must be divisible by vivit.tubelet (" +
                std::to_string(vivit.tubelet) + ")");
    require(vivit.patch > 0 && vivit.size % vivit.patch == 0,
            "vivit.size (" + std::to_string(vivit.size) + ") must be divisible by vivit.patch (" +
                std::to_string(vivit.patch) + ")");
    require(vivit.heads > 0 && vivit.dim % vivit.heads == 0, "vivit.dim must be divisible by vivit.heads");
    require(vivit.blocks > 0 && vivit.mlp_ratio > 0, "vivit.blocks and vivit.mlp_ratio must be positive");
    require(cnn.stem > 0 && cnn.blocks_per_stage > 0, "cnn.stem and cnn.blocks_per_stage must be positive");
    for (auto s : cnn.stages)
        require(s > 0, "cnn.stages entries must be positive");
    require(cnn.frames >= 2 && cnn.size >= 4, "cnn.frames must be >= 2 and cnn.size >= 4");
    require(lstm.layers > 0 && lstm.hidden > 0 && lstm.joints > 0 && lstm.frames > 0,
            "lstm fields must be positive");
    require(fusion.heads > 0 && fusion.dim % fusion.heads == 0, "fusion.dim must be divisible by fusion.heads");
    require(fusion.w_action >= 0 && fusion.w_asd >= 0, "fusion loss weights must be non-negative");
    require(channels > 0 && action_classes >= 2, "channels and action_classes must be positive");
}

nlohmann::json ModelConfig::to_json() const
{
    return {
        {"vivit",
         {{"tubelet", vivit.tubelet},
          {"patch", vivit.patch},
          {"dim", vivit.dim},
          {"heads", vivit.heads},
          {"blocks", vivit.blocks},
          {"mlp_ratio", vivit.mlp_ratio},
          {"frames", vivit.frames},
          {"size", vivit.size}}},
        {"cnn",
         {{"stem", cnn.stem},
          {"stages", cnn.stages},
          {"blocks_per_stage", cnn.blocks_per_stage},
          {"frames", cnn.frames},
          {"size", cnn.size}}},
        {"lstm", {{"layers", lstm.layers}, {"hidden", lstm.hidden}, {"joints", lstm.joints}, {"frames", lstm.frames}}},
        {"fusion", {{"dim", fusion.dim}, {"heads", fusion.heads}, {"w_action", fusion.w_action}, {"w_asd", fusion.w_asd}}},
        {"channels", channels},
        {"action_classes", action_classes},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j)
{
    ModelConfig c;
    const auto& v = j.at("vivit");
    c.vivit = {v.at("tubelet"), v.at("patch"), v.at("dim"), v.at("heads"),
               v.at("blocks"),  v.at("mlp_ratio"), v.at("frames"), v.at("size")};
    const auto& n = j.at("cnn");
    c.cnn = {n.at("stem"), n.at("stages"), n.at("blocks_per_stage"), n.at("frames"), n.at("size")};
    const auto& l = j.at("lstm");
    c.lstm = {l.at("layers"), l.at("hidden"), l.at("joints"), l.at("frames")};
    const auto& f = j.at("fusion");
    c.fusion = {f.at("dim"), f.at("heads"), f.at("w_action"), f.at("w_asd")};
    c.channels = j.at("channels");
    c.action_classes = j.at("action_classes");
    c.validate();
    return c;
}

Tensor clip_tensor(const Clip& clip)
{
    std::vector<double> v(clip.values.size());
    for (std::size_t f = 0; f < clip.frames; ++f)
        for (std::size_t c = 0; c < clip.channels; ++c)
            for (std::size_t y = 0; y < clip.height; ++y)
                for (std::size_t x = 0; x < clip.width; ++x)
                    v[((c * clip.frames + f) * clip.height + y) * clip.width + x] = clip.at(f, c, y, x);
    return Tensor::from({clip.channels, clip.frames, clip.height, clip.width}, std::move(v));
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed), store_(seed)
{
    cfg_.validate();
    const auto& vc = cfg_.vivit;
    const std::size_t d = vc.dim, df = cfg_.fusion.dim, ch = cfg_.channels;
    const std::size_t tokens = (vc.frames / vc.tubelet) * (vc.size / vc.patch) * (vc.size / vc.patch);

    // ViViT branch
    patch_embed = nn::Conv3d(store_, "vivit.patch", ch, d, {vc.tubelet, vc.patch, vc.patch},
                             {vc.tubelet, vc.patch, vc.patch}, {0, 0, 0});
    patch_bias = store_.zeros("vivit.patch.bias", {d});
    positional = store_.normal("vivit.positional", {tokens, d}, 0.02);
    for (std::size_t b = 0; b < vc.blocks; ++b) {
        std::string p = join("vivit.block", b);
        EncoderBlock blk;
        blk.norm1 = nn::LayerNorm(store_, p + ".norm1", d);
        blk.attn = nn::Attention(store_, p + ".attn", d, vc.heads);
        blk.norm2 = nn::LayerNorm(store_, p + ".norm2", d);
        blk.fc1 = nn::Linear(store_, p + ".fc1", d, d * vc.mlp_ratio);
        blk.fc2 = nn::Linear(store_, p + ".fc2", d * vc.mlp_ratio, d);
        encoder.push_back(std::move(blk));
    }
    vivit_out = nn::Linear(store_, "vivit.out", d, df);

    // 3D-CNN branch
    const auto& cc = cfg_.cnn;
    stem = nn::Conv3d(store_, "cnn.stem", ch, cc.stem, {3, 3, 3}, {1, 2, 2}, {1, 1, 1});
    stem_bn = nn::BatchNorm(store_, "cnn.stem.bn", cc.stem);
    std::size_t c_in = cc.stem;
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t b = 0; b < cc.blocks_per_stage; ++b) {
            std::string p = join("cnn.stage", s) + join(".block", b);
            std::size_t c_out = cc.stages[s];
            std::size_t st = b == 0 ? 2 : 1;
            ResBlock blk;
            blk.conv1 = nn::Conv3d(store_, p + ".conv1", c_in, c_out, {3, 3, 3}, {st, st, st}, {1, 1, 1});
            blk.bn1 = nn::BatchNorm(store_, p + ".bn1", c_out);
            blk.conv2 = nn::Conv3d(store_, p + ".conv2", c_out, c_out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
            blk.bn2 = nn::BatchNorm(store_, p + ".bn2", c_out);
            blk.project = st != 1 || c_in != c_out;
            if (blk.project)
                blk.shortcut = nn::Conv3d(store_, p + ".shortcut", c_in, c_out, {1, 1, 1}, {st, st, st}, {0, 0, 0});
            stages.push_back(std::move(blk));
            c_in = c_out;
        }
    cnn_out = nn::Linear(store_, "cnn.out", c_in, df);

    // LSTM branch
    std::size_t d_in = cfg_.lstm.joints * 3;
    for (std::size_t l = 0; l < cfg_.lstm.layers; ++l) {
        lstm.emplace_back(store_, join("lstm.layer", l), d_in, cfg_.lstm.hidden);
        d_in = cfg_.lstm.hidden;
    }
    lstm_out = nn::Linear(store_, "lstm.out", cfg_.lstm.hidden, df);

    // fusion and heads
    fusion.proj_q = nn::Linear(store_, "fusion.proj_q", df, df);
    fusion.proj_k1 = nn::Linear(store_, "fusion.proj_k1", df, df);
    fusion.proj_k2 = nn::Linear(store_, "fusion.proj_k2", df, df);
    fusion.attn = nn::Attention(store_, "fusion.attn", df, cfg_.fusion.heads);
    action_head = nn::Linear(store_, "head.action", 2 * df, cfg_.action_classes);
    asd_head = nn::Linear(store_, "head.asd", 2 * df, 2);
}

ModelInput Model::prepare(const preprocess::Sample& sample) const
{
    auto fit = [](const Clip& clip, std::size_t frames, std::size_t size) {
        Clip c = preprocess::sample_frames(clip, frames);
        if (c.height != size || c.width != size)
            c = preprocess::resize_clip(c, size, size);
        return clip_tensor(c);
    };
    if (sample.mesh_clip.channels != cfg_.channels || sample.flow_clip.channels != cfg_.channels)
        throw DimensionError("prepare: clips must have " + std::to_string(cfg_.channels) + " channels");
    const auto& sk = sample.skeleton;
    if (sk.frames != cfg_.lstm.frames || sk.joints != cfg_.lstm.joints)
        throw DimensionError("prepare: skeleton is " + std::to_string(sk.frames) + "x" + std::to_string(sk.joints) +
                             ", model expects " + std::to_string(cfg_.lstm.frames) + "x" +
                             std::to_string(cfg_.lstm.joints));
    ModelInput in;
    in.mesh = fit(sample.mesh_clip, cfg_.vivit.frames, cfg_.vivit.size);
    in.flow = fit(sample.flow_clip, cfg_.cnn.frames, cfg_.cnn.size);
    in.skeleton = Tensor::from({sk.frames, sk.joints * 3}, sk.coords);
    return in;
}

Tensor Model::tubelet_embed(const Tensor& clip) const
{
    const auto& vc = cfg_.vivit;
    if (clip.rank() != 4 || clip.dim(0) != cfg_.channels)
        throw DimensionError("tubelet_embed: expected a " + std::to_string(cfg_.channels) + "-channel C x F x H x W clip, got " +
                             ad::shape_str(clip.shape()));
    const char* axes[] = {"frames", "height", "width"};
    const std::size_t div[] = {vc.tubelet, vc.patch, vc.patch};
    const std::size_t want[] = {vc.frames, vc.size, vc.size};
    for (int a = 0; a < 3; ++a) {
        if (clip.dim(a + 1) % div[a] != 0)
            throw ConfigError(std::string("tubelet_embed: ") + axes[a] + " " + std::to_string(clip.dim(a + 1)) +
                              " not divisible by " + std::to_string(div[a]));
        if (clip.dim(a + 1) != want[a])
            throw DimensionError(std::string("tubelet_embed: ") + axes[a] + " " + std::to_string(clip.dim(a + 1)) +
                                 ", model expects " + std::to_string(want[a]));
    }
    // a stride = kernel convolution is the linear projection of flattened tubelets
    Tensor maps = patch_embed(clip);  // d x F/T x H/P x W/P
    std::size_t n = maps.size() / vc.dim;
    Tensor tokens = ad::transpose(ad::reshape(maps, {vc.dim, n}));
    return ad::add(ad::add_bias(tokens, patch_bias), positional);
}

Tensor Model::vivit_encode(const Tensor& clip, std::vector<Tensor>* attn) const
{
    Tensor x = tubelet_embed(clip);
    for (const auto& blk : encoder) {
        Tensor h = blk.norm1(x);
        auto a = blk.attn(h, h, h);
        if (attn)
            attn->insert(attn->end(), a.weights.begin(), a.weights.end());
        x = ad::add(x, a.output);
        Tensor m = blk.fc2(ad::relu(blk.fc1(blk.norm2(x))));
        x = ad::add(x, m);
    }
    return vivit_out(ad::mean_rows(x));
}

std::vector<Tensor> Model::cnn3d_encode(const std::vector<Tensor>& clips, ad::Mode mode)
{
    return run_cnn(clips, mode);
}

std::vector<Tensor> Model::cnn3d_encode(const std::vector<Tensor>& clips) const
{
    return run_cnn(clips, ad::Mode::eval);
}

// Batch norm in train mode writes its running statistics; callers holding a
// const model only reach this in eval mode.
std::vector<Tensor> Model::run_cnn(const std::vector<Tensor>& clips, ad::Mode mode) const
{
    const auto& cc = cfg_.cnn;
    for (const auto& c : clips)
        if (c.rank() != 4 || c.dim(0) != cfg_.channels || c.dim(1) != cc.frames || c.dim(2) != cc.size ||
            c.dim(3) != cc.size)
            throw DimensionError("cnn3d_encode: expected " + std::to_string(cfg_.channels) + "x" +
                                 std::to_string(cc.frames) + "x" + std::to_string(cc.size) + "x" +
                                 std::to_string(cc.size) + ", got " + ad::shape_str(c.shape()));
    auto map = [](const std::vector<Tensor>& xs, auto fn) {
        std::vector<Tensor> out;
        out.reserve(xs.size());
        for (const auto& x : xs)
            out.push_back(fn(x));
        return out;
    };
    auto relu_all = [&](const std::vector<Tensor>& xs) { return map(xs, [](const Tensor& t) { return ad::relu(t); }); };

    std::vector<Tensor> x = map(clips, [&](const Tensor& c) { return stem(c); });
    x = relu_all(stem_bn(x, mode));
    x = map(x, [](const Tensor& t) { return ad::maxpool3d(t, {2, 2, 2}, {2, 2, 2}); });
    for (const auto& blk : stages) {
        auto y = relu_all(blk.bn1(map(x, [&](const Tensor& t) { return blk.conv1(t); }), mode));
        y = blk.bn2(map(y, [&](const Tensor& t) { return blk.conv2(t); }), mode);
        std::vector<Tensor> next;
        for (std::size_t i = 0; i < x.size(); ++i) {
            Tensor skip = blk.project ? blk.shortcut(x[i]) : x[i];
            next.push_back(ad::relu(ad::add(y[i], skip)));
        }
        x = std::move(next);
    }
    return map(x, [&](const Tensor& t) { return cnn_out(ad::global_avg_pool(t)); });
}

Tensor Model::lstm_encode(const Tensor& skeleton) const
{
    const auto& lc = cfg_.lstm;
    if (skeleton.rank() != 2 || skeleton.dim(0) != lc.frames || skeleton.dim(1) != lc.joints * 3)
        throw DimensionError("lstm_encode: expected " + std::to_string(lc.frames) + " x " +
                             std::to_string(lc.joints * 3) + " skeleton, got " + ad::shape_str(skeleton.shape()));
    Tensor seq = skeleton;
    for (const auto& layer : lstm)
        seq = layer.run(seq);
    return lstm_out(ad::reshape(ad::slice_rows(seq, lc.frames - 1, lc.frames), {lc.hidden}));
}

FusionResult Model::fuse(const Tensor& f_vivit, const Tensor& f_cnn, const Tensor& f_lstm) const
{
    const std::size_t df = cfg_.fusion.dim;
    for (const Tensor* t : {&f_vivit, &f_cnn, &f_lstm})
        if (t->rank() != 1 || t->dim(0) != df)
            throw DimensionError("fuse: branch features must be [" + std::to_string(df) + "], got " +
                                 ad::shape_str(t->shape()));
    auto row = [df](const Tensor& v) { return ad::reshape(v, {1, df}); };
    Tensor qv = ad::concat_rows({row(fusion.proj_q(f_vivit)), row(fusion.proj_q(f_cnn))});
    Tensor k = ad::concat_rows({row(fusion.proj_k1(f_lstm)), row(fusion.proj_k2(f_lstm))});
    auto a = fusion.attn(qv, k, qv);
    return {ad::reshape(a.output, {2 * df}), std::move(a.weights)};
}

ModelOutput Model::classify(const Tensor& fused) const
{
    if (fused.rank() != 1 || fused.dim(0) != 2 * cfg_.fusion.dim)
        throw DimensionError("classify: fused vector must be [" + std::to_string(2 * cfg_.fusion.dim) + "]");
    return {action_head(fused), asd_head(fused), fused};
}

std::vector<ModelOutput> Model::forward(const std::vector<ModelInput>& batch, ad::Mode mode)
{
    std::vector<Tensor> flows;
    flows.reserve(batch.size());
    for (const auto& in : batch)
        flows.push_back(in.flow);
    std::vector<Tensor> f_cnn = cnn3d_encode(flows, mode);
    std::vector<ModelOutput> out;
    out.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor f_vivit = vivit_encode(batch[i].mesh);
        Tensor f_lstm = lstm_encode(batch[i].skeleton);
        out.push_back(classify(fuse(f_vivit, f_cnn[i], f_lstm).fused));
    }
    return out;
}

ModelOutput Model::forward(const ModelInput& input, ad::Mode mode)
{
    return forward(std::vector<ModelInput>{input}, mode).front();
}

ModelOutput Model::infer(const ModelInput& input) const
{
    Tensor f_cnn = cnn3d_encode(std::vector<Tensor>{input.flow}).front();
    return classify(fuse(vivit_encode(input.mesh), f_cnn, lstm_encode(input.skeleton)).fused);
}

std::vector<std::string> Model::head_parameters(bool action) const
{
    std::string prefix = action ? "head.action." : "head.asd.";
    std::vector<std::string> names;
    for (const auto& p : store_.all())
        if (p.name.rfind(prefix, 0) == 0)
            names.push_back(p.name);
    return names;
}

std::vector<io::NamedBuffer> Model::buffers()
{
    std::vector<io::NamedBuffer> out;
    auto add = [&](const std::string& name, nn::BatchNorm& bn) {
        out.push_back({name + ".running_mean", &bn.state.running_mean});
        out.push_back({name + ".running_var", &bn.state.running_var});
    };
    add("cnn.stem.bn", stem_bn);
    for (std::size_t i = 0; i < stages.size(); ++i) {
        add(join("cnn.res", i) + ".bn1", stages[i].bn1);
        add(join("cnn.res", i) + ".bn2", stages[i].bn2);
    }
    return out;
}

void Model::save(const std::filesystem::path& dir, const nlohmann::json& extra_meta)
{
    nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
    meta["config"] = cfg_.to_json();
    meta["seed"] = seed_;
    io::save_checkpoint(dir, store_, buffers(), meta);
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& dir)
{
    auto manifest = io::read_manifest(dir);
    const auto& meta = manifest.at("meta");
    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_json(meta.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw io::IoError(dir.string() + ": bad model config in manifest: " + e.what());
    }
    auto model = std::make_unique<Model>(cfg, meta.value("seed", std::uint64_t{0}));
    io::load_checkpoint(dir, model->store_, model->buffers());
    auto mark = [](nn::BatchNorm& bn) { bn.state.initialized = !bn.state.running_mean.empty(); };
    mark(model->stem_bn);
    for (auto& s : model->stages) {
        mark(s.bn1);
        mark(s.bn2);
    }
    return model;
}

Tensor combined_loss(const ModelOutput& out, int action_label, int asd_label, double w_action, double w_asd)
{
    auto n_action = static_cast<int>(out.action_logits.size());
    if (action_label < 0 || action_label >= n_action)
        throw preprocess::ValidationError("action_label", std::to_string(action_label) + " outside [0, " +
                                                              std::to_string(n_action) + ")");
    if (asd_label < 0 || asd_label > 1)
        throw preprocess::ValidationError("asd_label", std::to_string(asd_label) + " outside {0, 1}");
    Tensor la = ad::cross_entropy(out.action_logits, static_cast<std::size_t>(action_label));
    Tensor ls = ad::cross_entropy(out.asd_logits, static_cast<std::size_t>(asd_label));
    return ad::add(ad::scale(la, w_action), ad::scale(ls, w_asd));
}

}  // namespace mmasd::model
