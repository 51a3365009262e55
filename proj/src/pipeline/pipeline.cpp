#include "mmasd/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "mmasd/binary_io.hpp"
#include "mmasd/flow.hpp"
#include "mmasd/nn.hpp"

namespace mmasd::pipeline {

using ad::Tensor;
using preprocess::Sample;

std::vector<std::size_t> Dataset::class_counts() const
{
    std::vector<std::size_t> counts(preprocess::kActionClasses, 0);
    for (const auto& s : samples)
        ++counts.at(static_cast<std::size_t>(s.action_label));
    return counts;
}

// ---------------------------------------------------------------------------
// synthetic data

namespace {

constexpr std::size_t kSynthFrames = preprocess::kClipFrames;
constexpr std::uint64_t kTemplateSeed = 0x5eed;

struct Motion {
    double dir_x, dir_y;  // oscillation axis
    double cycles;        // per clip
    double phase;
    double gain;          // 1 or asd_gain

    // unit-amplitude position and per-unit-time velocity at t in [0, 1)
    double pos(double t) const { return gain * std::sin(2 * std::numbers::pi * cycles * t + phase); }
    double vel(double t) const
    {
        return gain * 2 * std::numbers::pi * cycles * std::cos(2 * std::numbers::pi * cycles * t + phase);
    }
};

// Colorized flow of an elliptical body moving with the motion. The color
// scale is fixed across samples so amplitude stays visible.
Clip synth_flow(const Motion& mo, const SynthOptions& opt, double cx, double cy)
{
    const std::size_t n = preprocess::kClipSize;
    const double rx = 12, ry = 22;
    const double max_speed = opt.amplitude_px * opt.asd_gain * 2 * std::numbers::pi * 3 / kSynthFrames;
    std::vector<Image> frames;
    for (std::size_t f = 0; f < kSynthFrames; ++f) {
        double t = static_cast<double>(f) / kSynthFrames;
        double d = opt.amplitude_px * mo.pos(t);
        double speed = opt.amplitude_px * mo.vel(t) / kSynthFrames;  // px per frame
        double bx = cx + d * mo.dir_x, by = cy + d * mo.dir_y;
        flow::FlowField field(n, n);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                double ex = (static_cast<double>(x) - bx) / rx, ey = (static_cast<double>(y) - by) / ry;
                if (ex * ex + ey * ey <= 1.0) {
                    field.u[y * n + x] = speed * mo.dir_x;
                    field.v[y * n + x] = speed * mo.dir_y;
                }
            }
        frames.push_back(flow::colorize(field, max_speed));
    }
    return Clip::from_frames(frames);
}

// Ellipsoid body surface translated along the motion axis.
preprocess::MeshSequence synth_mesh(const Motion& mo, const std::vector<double>& body, double amplitude)
{
    preprocess::MeshSequence mesh;
    mesh.frames = kSynthFrames;
    mesh.vertices = preprocess::kMeshVertices;
    mesh.coords.resize(mesh.frames * mesh.vertices * 3);
    for (std::size_t f = 0; f < kSynthFrames; ++f) {
        double d = amplitude * mo.pos(static_cast<double>(f) / kSynthFrames);
        for (std::size_t v = 0; v < mesh.vertices; ++v) {
            std::size_t i = (f * mesh.vertices + v) * 3;
            // image y grows downward, world y upward
            mesh.coords[i] = static_cast<float>(body[v * 3] + d * mo.dir_x);
            mesh.coords[i + 1] = static_cast<float>(body[v * 3 + 1] - d * mo.dir_y);
            mesh.coords[i + 2] = static_cast<float>(body[v * 3 + 2]);
        }
    }
    return mesh;
}

std::vector<double> body_template()
{
    std::mt19937_64 rng(kTemplateSeed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(preprocess::kMeshVertices * 3);
    for (std::size_t i = 0; i < preprocess::kMeshVertices; ++i) {
        double x = g(rng), y = g(rng), z = g(rng);
        double r = std::sqrt(x * x + y * y + z * z);
        v[i * 3] = 0.25 * x / r;
        v[i * 3 + 1] = 0.5 * y / r;
        v[i * 3 + 2] = 0.15 * z / r;
    }
    return v;
}

std::vector<double> pose_template(std::size_t joints)
{
    std::mt19937_64 rng(kTemplateSeed + 1);
    std::uniform_real_distribution<double> ux(0.4, 0.6), uy(0.2, 0.8), uz(-0.1, 0.1);
    std::vector<double> v(joints * 3);
    for (std::size_t j = 0; j < joints; ++j) {
        v[j * 3] = ux(rng);
        v[j * 3 + 1] = uy(rng);
        v[j * 3 + 2] = uz(rng);
    }
    return v;
}

}  // namespace

Dataset synth_dataset(std::size_t n_per_class, std::uint64_t seed, const SynthOptions& opt)
{
    if (n_per_class < 2)
        throw ConfigError("synth: per-class count must be >= 2, got " + std::to_string(n_per_class));
    const auto body = body_template();
    const auto pose = pose_template(opt.joints);
    Dataset ds;
    ds.provenance = "synthetic";
    for (std::size_t a = 0; a < preprocess::kActionClasses; ++a)
        for (std::size_t i = 0; i < n_per_class; ++i) {
            std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                             static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(i)};
            std::mt19937_64 rng(ss);
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            std::normal_distribution<double> noise(0.0, opt.skel_noise);
            int asd = static_cast<int>(i % 2);
            double theta = 2 * std::numbers::pi * static_cast<double>(a) / preprocess::kActionClasses;
            Motion mo{std::cos(theta), std::sin(theta), 1.0 + static_cast<double>(a % 3),
                      opt.phase_jitter * u(rng), asd ? opt.asd_gain : 1.0};

            double cx = 50 + 4 * u(rng), cy = 50 + 4 * u(rng);
            Clip flow_clip = synth_flow(mo, opt, cx, cy);
            auto mesh = synth_mesh(mo, body, 0.25);

            preprocess::SkeletonSequence sk;
            sk.frames = preprocess::kSkeletonFrames;
            sk.joints = opt.joints;
            sk.coords.resize(sk.frames * sk.joints * 3);
            double ox = 0.02 * u(rng), oy = 0.02 * u(rng);
            for (std::size_t f = 0; f < sk.frames; ++f) {
                double d = opt.amplitude_skel * mo.pos(static_cast<double>(f) / sk.frames);
                for (std::size_t j = 0; j < sk.joints; ++j) {
                    double w = 0.6 + 0.1 * static_cast<double>(j % 5);  // limbs swing further
                    sk.at(f, j, 0) = pose[j * 3] + ox + w * d * mo.dir_x + noise(rng);
                    sk.at(f, j, 1) = pose[j * 3 + 1] + oy + w * d * mo.dir_y + noise(rng);
                    sk.at(f, j, 2) = pose[j * 3 + 2] + noise(rng);
                }
            }
            std::ostringstream id;
            id << "syn_a" << (a < 10 ? "0" : "") << a << "_" << i;
            ds.samples.push_back(
                preprocess::build_sample(flow_clip, mesh, sk, static_cast<int>(a), asd, id.str()));
        }
    return ds;
}

// ---------------------------------------------------------------------------
// split

std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
stratified_split_indices(const std::vector<std::pair<int, int>>& labels, double ratio, std::uint64_t seed,
                         std::vector<std::string>* warnings)
{
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ConfigError("split ratio must lie in (0, 1), got " + std::to_string(ratio));
    std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < labels.size(); ++i)
        strata[labels[i]].push_back(i);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> train, test;
    for (auto& [key, idx] : strata) {
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(idx.size())));
        if (idx.size() == 1) {
            n_train = 1;
            if (warnings)
                warnings->push_back("stratum (action " + std::to_string(key.first) + ", asd " +
                                    std::to_string(key.second) + ") has a single sample; placed in train");
        }
        train.insert(train.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
        test.insert(test.end(), idx.begin() + static_cast<long>(n_train), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

Split stratified_split(const Dataset& ds, double ratio, std::uint64_t seed)
{
    std::vector<std::pair<int, int>> labels;
    for (const auto& s : ds.samples)
        labels.emplace_back(s.action_label, s.asd_label);
    Split out;
    auto [tr, te] = stratified_split_indices(labels, ratio, seed, &out.warnings);
    out.train.provenance = out.test.provenance = ds.provenance;
    for (auto i : tr)
        out.train.samples.push_back(ds.samples[i]);
    for (auto i : te)
        out.test.samples.push_back(ds.samples[i]);
    auto counts = out.train.class_counts();
    for (std::size_t a = 0; a < counts.size(); ++a)
        if (counts[a] == 0)
            out.warnings.push_back("action class " + std::to_string(a) + " is absent from the training split");
    return out;
}

// ---------------------------------------------------------------------------
// training

void TrainConfig::validate() const
{
    auto require = [](bool ok, const std::string& what) {
        if (!ok)
            throw ConfigError(what);
    };
    require(epochs > 0, "train.epochs must be positive");
    require(batch_size > 0, "train.batch_size must be positive");
    require(lr >= 0 && std::isfinite(lr), "train.lr must be a finite non-negative number");
    require(beta1 >= 0 && beta1 < 1, "train.beta1 must lie in [0, 1)");
    require(beta2 >= 0 && beta2 < 1, "train.beta2 must lie in [0, 1)");
    require(eps > 0, "train.eps must be positive");
}

nlohmann::json TrainConfig::to_json() const
{
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},     {"beta1", beta1},
            {"beta2", beta2},   {"eps", eps},               {"seed", seed}, {"augment", augment}};
}

nlohmann::json History::to_json() const
{
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& e : epochs)
        eps.push_back({{"epoch", e.epoch},
                       {"loss", e.loss},
                       {"action_accuracy", e.action_accuracy},
                       {"asd_accuracy", e.asd_accuracy}});
    return {{"initial_loss", initial_loss}, {"epochs", eps}};
}

DivergenceError::DivergenceError(std::size_t epoch, std::size_t batch, double loss)
    : std::runtime_error("training diverged: loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch)),
      epoch_(epoch), batch_(batch)
{
}

namespace {

std::size_t argmax(const Tensor& t)
{
    auto d = t.data();
    return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

std::vector<ad::BatchNormState> norm_states(const model::Model& m)
{
    std::vector<ad::BatchNormState> s{m.stem_bn.state};
    for (const auto& blk : m.stages) {
        s.push_back(blk.bn1.state);
        s.push_back(blk.bn2.state);
    }
    return s;
}

void restore_norm_states(const model::Model& m, const std::vector<ad::BatchNormState>& s)
{
    std::size_t k = 0;
    m.stem_bn.state = s[k++];
    for (const auto& blk : m.stages) {
        blk.bn1.state = s[k++];
        blk.bn2.state = s[k++];
    }
}

// Contiguous batches; a trailing singleton joins the previous batch because
// train-mode batch norm needs more than one sample for meaningful statistics.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch)
{
    std::vector<std::pair<std::size_t, std::size_t>> r;
    for (std::size_t b = 0; b < n; b += batch)
        r.emplace_back(b, std::min(n, b + batch));
    if (r.size() > 1 && r.back().second - r.back().first == 1) {
        r.pop_back();
        r.back().second = n;
    }
    return r;
}

struct Prepared {
    model::ModelInput input;
    int action, asd;
};

}  // namespace

History train_loop(model::Model& m, const Dataset& train, const TrainConfig& cfg, std::ostream* log)
{
    cfg.validate();
    if (train.empty())
        throw preprocess::ValidationError("train", "empty training set");
    const double wa = m.config().fusion.w_action, ws = m.config().fusion.w_asd;

    // Inputs are prepared once; augmented copies are built and reduced to
    // model geometry one at a time so full-size rotations never pile up.
    std::vector<Prepared> data;
    for (const auto& s : train.samples) {
        data.push_back({m.prepare(s), s.action_label, s.asd_label});
        if (cfg.augment)
            for (double angle : preprocess::kAugmentAngles)
                data.push_back({m.prepare(preprocess::augment(s, angle)), s.action_label, s.asd_label});
    }

    auto batch_loss = [&](const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi,
                          std::vector<model::ModelOutput>& outs) {
        std::vector<model::ModelInput> inputs;
        for (std::size_t k = lo; k < hi; ++k)
            inputs.push_back(data[idx[k]].input);
        outs = m.forward(inputs, ad::Mode::train);
        Tensor total;
        for (std::size_t k = lo; k < hi; ++k) {
            const auto& d = data[idx[k]];
            Tensor l = model::combined_loss(outs[k - lo], d.action, d.asd, wa, ws);
            total = total.defined() ? ad::add(total, l) : l;
        }
        return total;
    };

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    auto ranges = batch_ranges(data.size(), cfg.batch_size);

    History hist;
    {
        // loss before any update, leaving the running statistics untouched
        auto saved = norm_states(m);
        ad::NoGradGuard guard;
        double sum = 0;
        std::vector<model::ModelOutput> outs;
        for (auto [lo, hi] : ranges)
            sum += batch_loss(order, lo, hi, outs).item();
        hist.initial_loss = sum / static_cast<double>(data.size());
        restore_norm_states(m, saved);
    }
    if (log)
        *log << "training on " << data.size() << " samples (" << train.size() << " before augmentation), initial loss "
             << hist.initial_loss << "\n";

    nn::Adam adam(m.parameters(), {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps});
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0;
        std::size_t hit_action = 0, hit_asd = 0;
        for (std::size_t b = 0; b < ranges.size(); ++b) {
            auto [lo, hi] = ranges[b];
            m.parameters().zero_grad();
            std::vector<model::ModelOutput> outs;
            Tensor total = batch_loss(order, lo, hi, outs);
            double value = total.item();
            if (!std::isfinite(value))
                throw DivergenceError(epoch, b + 1, value);
            ad::backward(ad::scale(total, 1.0 / static_cast<double>(hi - lo)));
            adam.step();
            sum += value;
            for (std::size_t k = lo; k < hi; ++k) {
                hit_action += argmax(outs[k - lo].action_logits) == static_cast<std::size_t>(data[order[k]].action);
                hit_asd += argmax(outs[k - lo].asd_logits) == static_cast<std::size_t>(data[order[k]].asd);
            }
        }
        double n = static_cast<double>(data.size());
        hist.epochs.push_back({epoch, sum / n, static_cast<double>(hit_action) / n, static_cast<double>(hit_asd) / n});
        if (log)
            *log << "epoch " << epoch << "/" << cfg.epochs << " loss " << sum / n << " action_acc "
                 << hist.epochs.back().action_accuracy << " asd_acc " << hist.epochs.back().asd_accuracy << "\n";
    }
    return hist;
}

// ---------------------------------------------------------------------------
// metrics and evaluation

Metrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes)
{
    if (truth.size() != predicted.size())
        throw DimensionError("metrics: " + std::to_string(truth.size()) + " labels vs " +
                             std::to_string(predicted.size()) + " predictions");
    Metrics m;
    m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || predicted[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes ||
            static_cast<std::size_t>(predicted[i]) >= classes)
            throw preprocess::ValidationError("label", "outside [0, " + std::to_string(classes) + ")");
        ++m.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
    }
    std::size_t correct = 0;
    double f1_sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t tp = m.confusion[c][c], row = 0, col = 0;
        for (std::size_t k = 0; k < classes; ++k) {
            row += m.confusion[c][k];
            col += m.confusion[k][c];
        }
        correct += tp;
        if (row == 0 && col == 0)
            continue;
        ++present;
        double p = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
        double r = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        f1_sum += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    m.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
    m.macro_f1 = present ? f1_sum / static_cast<double>(present) : 0.0;
    return m;
}

nlohmann::json Metrics::to_json() const
{
    return {{"accuracy", accuracy}, {"macro_f1", macro_f1}, {"confusion", confusion}};
}

std::string Metrics::confusion_csv() const
{
    std::ostringstream os;
    os << "true\\pred";
    for (std::size_t c = 0; c < confusion.size(); ++c)
        os << "," << c;
    os << "\n";
    for (std::size_t r = 0; r < confusion.size(); ++r) {
        os << r;
        for (auto v : confusion[r])
            os << "," << v;
        os << "\n";
    }
    return os.str();
}

nlohmann::json Evaluation::to_json() const
{
    return {{"action", action.to_json()}, {"asd", asd.to_json()}};
}

Evaluation evaluate(const model::Model& m, const Dataset& test, std::size_t jobs)
{
    if (test.empty())
        throw preprocess::ValidationError("test", "empty evaluation set");
    std::vector<Prediction> preds(test.size());
    auto softmax = [](const Tensor& t) {
        auto d = t.data();
        double mx = *std::max_element(d.begin(), d.end()), tot = 0;
        std::vector<double> p(d.size());
        for (std::size_t i = 0; i < d.size(); ++i)
            tot += p[i] = std::exp(d[i] - mx);
        for (auto& v : p)
            v /= tot;
        return p;
    };
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        ad::NoGradGuard guard;
        for (std::size_t i; (i = next++) < test.size();) {
            try {
                const auto& s = test.samples[i];
                auto out = m.infer(m.prepare(s));
                preds[i] = {s.id, static_cast<int>(argmax(out.action_logits)), static_cast<int>(argmax(out.asd_logits)),
                            softmax(out.action_logits), softmax(out.asd_logits)};
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                    failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::max<std::size_t>(1, jobs); ++t)
        pool.emplace_back(worker);
    worker();
    for (auto& th : pool)
        th.join();
    if (failure)
        std::rethrow_exception(failure);

    std::vector<int> ta, pa, ts, ps;
    for (std::size_t i = 0; i < test.size(); ++i) {
        ta.push_back(test.samples[i].action_label);
        ts.push_back(test.samples[i].asd_label);
        pa.push_back(preds[i].action);
        ps.push_back(preds[i].asd);
    }
    Evaluation ev;
    ev.action = compute_metrics(ta, pa, m.config().action_classes);
    ev.asd = compute_metrics(ts, ps, 2);
    ev.predictions = std::move(preds);
    return ev;
}

nlohmann::json IndependentResult::to_json() const
{
    return {{"action", {{"metrics", action_eval.action.to_json()}, {"history", action_history.to_json()}}},
            {"asd", {{"metrics", asd_eval.asd.to_json()}, {"history", asd_history.to_json()}}}};
}

IndependentResult independent_mode(const model::ModelConfig& cfg, std::uint64_t model_seed, const Dataset& train,
                                   const Dataset& test, const TrainConfig& tc, std::ostream* log)
{
    IndependentResult r;
    auto run = [&](double wa, double ws, History& h, Evaluation& e) {
        model::ModelConfig c = cfg;
        c.fusion.w_action = wa;
        c.fusion.w_asd = ws;
        model::Model m(c, model_seed);
        h = train_loop(m, train, tc, log);
        e = evaluate(m, test);
    };
    if (log)
        *log << "independent mode: action model\n";
    run(cfg.fusion.w_action + cfg.fusion.w_asd, 0.0, r.action_history, r.action_eval);
    if (log)
        *log << "independent mode: ASD model\n";
    run(0.0, cfg.fusion.w_action + cfg.fusion.w_asd, r.asd_history, r.asd_eval);
    return r;
}

std::uint64_t dataset_hash(const Dataset& ds)
{
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        auto b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& s : ds.samples) {
        mix(s.id.data(), s.id.size());
        mix(&s.action_label, sizeof s.action_label);
        mix(&s.asd_label, sizeof s.asd_label);
        mix(s.flow_clip.values.data(), s.flow_clip.values.size() * sizeof(float));
        mix(s.mesh_clip.values.data(), s.mesh_clip.values.size() * sizeof(float));
        mix(s.skeleton.coords.data(), s.skeleton.coords.size() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------------------

namespace io {

void write_json(const std::filesystem::path& path, const nlohmann::json& j)
{
    std::ofstream out(path);
    if (!out)
        throw mmasd::io::IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
    if (!out)
        throw mmasd::io::IoError("write failed: " + path.string());
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds)
{
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.csv");
    if (!manifest)
        throw mmasd::io::IoError("cannot write " + (dir / "manifest.csv").string());
    manifest << "clip_id,flow_path,mesh_path,skeleton_path,action_label,asd_label\n";
    for (const auto& s : ds.samples) {
        if (s.id.empty() || s.id.find_first_of(",/\\\n") != std::string::npos)
            throw preprocess::ValidationError("clip_id", "'" + s.id + "' cannot name a sample directory");
        std::filesystem::create_directories(dir / s.id);
        mmasd::io::write_clip(dir / s.id / "flow.mmc", s.flow_clip);
        mmasd::io::write_clip(dir / s.id / "mesh.mmc", s.mesh_clip);
        preprocess::io::write_skeleton_csv(dir / s.id / "skeleton.csv", s.skeleton);
        manifest << s.id << "," << s.id << "/flow.mmc," << s.id << "/mesh.mmc," << s.id << "/skeleton.csv,"
                 << s.action_label << "," << s.asd_label << "\n";
    }
    manifest << "# provenance=" << ds.provenance << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir)
{
    auto path = std::filesystem::is_directory(dir) ? dir / "manifest.csv" : dir;
    std::ifstream in(path);
    if (!in)
        throw mmasd::io::IoError("cannot open dataset manifest " + path.string());
    auto base = path.parent_path();
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        if (line.rfind("# provenance=", 0) == 0) {
            ds.provenance = line.substr(13);
            continue;
        }
        if (lineno == 1 && line.rfind("clip_id", 0) == 0)
            continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');)
            cells.push_back(c);
        if (cells.size() != 6)
            throw preprocess::ValidationError("manifest", path.string() + ":" + std::to_string(lineno) +
                                                              ": expected 6 columns, got " +
                                                              std::to_string(cells.size()));
        Sample s;
        s.id = cells[0];
        try {
            s.action_label = std::stoi(cells[4]);
            s.asd_label = std::stoi(cells[5]);
        } catch (const std::exception&) {
            throw preprocess::ValidationError("manifest", path.string() + ":" + std::to_string(lineno) +
                                                              ": labels must be integers");
        }
        s.flow_clip = mmasd::io::read_clip(base / cells[1]);
        s.mesh_clip = mmasd::io::read_clip(base / cells[2]);
        s.skeleton = preprocess::io::read_skeleton_csv(base / cells[3]);
        preprocess::validate_sample(s);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace io

}  // namespace mmasd::pipeline
