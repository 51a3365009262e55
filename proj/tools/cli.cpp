#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "mmasd/binary_io.hpp"
#include "mmasd/clip.hpp"
#include "mmasd/flow.hpp"
#include "mmasd/model.hpp"
#include "mmasd/pipeline.hpp"
#include "mmasd/preprocess.hpp"
#include "mmasd/tensor_io.hpp"
#include "mmasd/tracking.hpp"
#include "run_config.hpp"

namespace mmasd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& action_names()
{
    static const std::vector<std::string> names = {
        "Arm Swing",  "Body Swing", "Chest Expansion", "Drumming",  "Sing and Clap",         "Twist Pose",
        "Tree Pose",  "Frog Pose",  "Squat Pose",      "Marcas Forward Shaking", "Marcas Shaking",
    };
    return names;
}

namespace {

// Options shared by every subcommand.
struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string out;
};

void add_common(CLI::App* sub, Common& c, bool needs_out = true)
{
    sub->add_option("--config", c.config_path, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", c.sets, "override one config key (key=value), repeatable");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
    auto* o = sub->add_option("--out", c.out, "output directory");
    if (needs_out)
        o->required();
}

struct Context {
    RunConfig cfg;
    std::ostream& out;
    std::ostream& err;
};

RunConfig resolve_common(const Common& c, std::vector<Assignment> extra)
{
    std::vector<Assignment> file;
    if (!c.config_path.empty())
        file = read_config_file(c.config_path);
    std::vector<Assignment> flags;
    for (const auto& s : c.sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + s + "'");
        auto parsed = parse_config_text(s.substr(0, eq) + " = " + s.substr(eq + 1), "--set");
        flags.insert(flags.end(), parsed.begin(), parsed.end());
    }
    if (c.seed)
        flags.push_back({"seed", std::to_string(*c.seed), "--seed"});
    for (auto& a : extra)
        flags.push_back(std::move(a));
    return resolve(file, flags);
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream f(path);
    if (!f)
        throw io::IoError("cannot open " + path.string() + " for writing");
    f << text;
    if (!f)
        throw io::IoError("write failed for " + path.string());
}

void prepare_out(const fs::path& dir, const RunConfig& cfg, std::ostream& log)
{
    fs::create_directories(dir);
    write_text(dir / "config.resolved", cfg.dump());
    log << "resolved config:\n" << cfg.dump();
}

json with_provenance(json j, const pipeline::Dataset& ds)
{
    j["provenance"] = ds.provenance;
    return j;
}

// ---- track ----

int cmd_track(Context& ctx, const std::string& detections_path, const std::string& video_path, const fs::path& out)
{
    auto dets = tracking::io::read_detections(detections_path);
    Clip video = io::read_clip(video_path);
    std::map<std::uint32_t, std::vector<tracking::Detection>> by_frame;
    for (auto& d : dets)
        by_frame[d.frame_index].push_back(std::move(d));
    std::uint32_t last = video.frames == 0 ? 0 : static_cast<std::uint32_t>(video.frames - 1);
    if (!by_frame.empty())
        last = std::max(last, by_frame.rbegin()->first);

    tracking::Tracker tracker(ctx.cfg.tracker);
    // every frame is stepped so misses accumulate on empty frames too
    for (std::uint32_t f = 0; f <= last; ++f) {
        auto it = by_frame.find(f);
        tracker.step(f, it == by_frame.end() ? std::vector<tracking::Detection>{} : it->second);
    }
    tracking::io::write_tracks(out / "tracks.jsonl", tracker.tracks());
    auto clips = tracking::crop_tracks(video, tracker.tracks(), ctx.cfg.crop_size, &ctx.err);
    for (const auto& p : clips) {
        std::ostringstream name;
        name << "person_" << p.track_id << ".mmc";
        io::write_clip(out / name.str(), p.clip);
    }
    ctx.out << "tracks: " << tracker.tracks().size() << ", person clips: " << clips.size() << "\n";
    return 0;
}

// ---- flow ----

int cmd_flow(Context& ctx, const std::string& video_path, const fs::path& out, std::size_t jobs)
{
    Clip video = io::read_clip(video_path);
    auto fields = flow::clip_flow(video, ctx.cfg.flow, jobs);
    for (std::size_t i = 0; i < fields.size(); ++i) {
        std::ostringstream name;
        name << "flow_" << std::setw(4) << std::setfill('0') << i << ".mmf";
        flow::io::write_flow(out / name.str(), fields[i]);
    }
    io::write_clip(out / "flow.mmc", flow::colorize_clip(fields));
    ctx.out << "flow fields: " << fields.size() << "\n";
    return 0;
}

// ---- rasterize ----

int cmd_rasterize(Context& ctx, const std::string& mesh_path, const fs::path& out)
{
    auto mesh = preprocess::io::read_mesh(mesh_path);
    preprocess::RasterOptions opt;
    opt.radius_px = ctx.cfg.raster_radius;
    Clip clip = preprocess::rasterize_mesh(mesh, opt);
    io::write_clip(out / "mesh.mmc", clip);
    ctx.out << "mesh clip: " << clip.frames << " frames\n";
    return 0;
}

// ---- preprocess ----

preprocess::Sample load_raw_sample(const fs::path& dir, const RunConfig& cfg, int action, int asd, const std::string& id)
{
    Clip flow_clip = io::read_clip(dir / "flow.mmc");
    auto skel = preprocess::io::read_skeleton_csv(dir / "skeleton.csv");
    if (fs::exists(dir / "mesh.mmm")) {
        preprocess::RasterOptions opt;
        opt.radius_px = cfg.raster_radius;
        Clip mesh_clip = preprocess::rasterize_mesh(preprocess::io::read_mesh(dir / "mesh.mmm"), opt);
        return preprocess::build_sample(flow_clip, mesh_clip, skel, action, asd, id);
    }
    return preprocess::build_sample(flow_clip, io::read_clip(dir / "mesh.mmc"), skel, action, asd, id);
}

int cmd_preprocess(Context& ctx, const std::string& labels_path, const fs::path& root, const fs::path& out)
{
    auto rows = preprocess::io::read_labels(labels_path);
    pipeline::Dataset ds;
    for (const auto& r : rows)
        ds.samples.push_back(load_raw_sample(root / r.clip_id, ctx.cfg, r.action_label, r.asd_label, r.clip_id));
    pipeline::io::write_dataset(out, ds);
    ctx.out << "samples: " << ds.size() << "\n";
    return 0;
}

// ---- augment ----

std::string angle_tag(double a)
{
    std::ostringstream os;
    os << "_rot" << (a < 0 ? "m" : "") << std::abs(a);
    return os.str();
}

int cmd_augment(Context& ctx, const fs::path& data, const fs::path& out)
{
    auto ds = pipeline::io::read_dataset(data);
    pipeline::Dataset aug;
    aug.provenance = ds.provenance;
    for (const auto& s : ds.samples) {
        aug.samples.push_back(s);
        for (double a : preprocess::kAugmentAngles) {
            auto r = preprocess::augment(s, a);
            r.id = s.id + angle_tag(a);
            aug.samples.push_back(std::move(r));
        }
    }
    pipeline::io::write_dataset(out, aug);
    ctx.out << "samples: " << ds.size() << " -> " << aug.size() << "\n";
    return 0;
}

// ---- synth ----

int cmd_synth(Context& ctx, std::size_t per_class, const fs::path& out)
{
    pipeline::SynthOptions opt;
    opt.joints = ctx.cfg.model.lstm.joints;
    auto ds = pipeline::synth_dataset(per_class, ctx.cfg.seed, opt);
    pipeline::io::write_dataset(out, ds);
    ctx.out << "synthetic samples: " << ds.size() << "\n";
    return 0;
}

// ---- train / eval ----

void write_evaluation(const fs::path& out, const std::string& stem, const pipeline::Evaluation& ev,
                      const pipeline::Dataset& ds)
{
    pipeline::io::write_json(out / (stem + ".json"), with_provenance(ev.to_json(), ds));
}

json predictions_json(const pipeline::Evaluation& ev)
{
    json arr = json::array();
    for (const auto& p : ev.predictions)
        arr.push_back({{"id", p.id},
                       {"action", p.action},
                       {"action_name", action_names().at(static_cast<std::size_t>(p.action))},
                       {"asd", p.asd},
                       {"action_prob", p.action_prob},
                       {"asd_prob", p.asd_prob}});
    return arr;
}

json split_json(const pipeline::Split& sp)
{
    json j;
    j["train"] = json::array();
    j["test"] = json::array();
    for (const auto& s : sp.train.samples)
        j["train"].push_back(s.id);
    for (const auto& s : sp.test.samples)
        j["test"].push_back(s.id);
    j["warnings"] = sp.warnings;
    return j;
}

int cmd_train(Context& ctx, const fs::path& data, const fs::path& out, const std::string& mode, std::size_t jobs)
{
    const auto& cfg = ctx.cfg;
    auto ds = pipeline::io::read_dataset(data);
    auto sp = pipeline::stratified_split(ds, cfg.split_ratio, cfg.seed);
    for (const auto& w : sp.warnings)
        ctx.err << "warning: " << w << "\n";
    if (sp.train.empty())
        throw preprocess::ValidationError("dataset", "training split is empty");
    pipeline::io::write_json(out / "split.json", split_json(sp));
    ctx.out << "data: " << ds.size() << " samples (" << ds.provenance << "), train " << sp.train.size() << ", test "
            << sp.test.size() << "\n";

    if (mode == "independent") {
        auto r = pipeline::independent_mode(cfg.model, cfg.seed, sp.train, sp.test, cfg.train, &ctx.out);
        pipeline::io::write_json(out / "metrics.json", with_provenance(r.to_json(), ds));
        ctx.out << "independent: action acc " << r.action_eval.action.accuracy << ", asd acc "
                << r.asd_eval.asd.accuracy << "\n";
        return 0;
    }

    model::Model m(cfg.model, cfg.seed);
    auto history = pipeline::train_loop(m, sp.train, cfg.train, &ctx.out);
    pipeline::io::write_json(out / "history.json", history.to_json());

    json meta;
    meta["split"] = {{"seed", cfg.seed}, {"ratio", cfg.split_ratio}};
    meta["train"] = cfg.train.to_json();
    meta["data_hash"] = pipeline::dataset_hash(ds);
    meta["provenance"] = ds.provenance;
    m.save(out / "checkpoint", meta);

    auto train_ev = pipeline::evaluate(m, sp.train, jobs);
    write_evaluation(out, "train_metrics", train_ev, ds);
    if (!sp.test.empty()) {
        auto test_ev = pipeline::evaluate(m, sp.test, jobs);
        write_evaluation(out, "metrics", test_ev, ds);
        write_text(out / "confusion_action.csv", test_ev.action.confusion_csv());
        write_text(out / "confusion_asd.csv", test_ev.asd.confusion_csv());
        pipeline::io::write_json(out / "predictions.json", predictions_json(test_ev));
        ctx.out << "test: action acc " << test_ev.action.accuracy << " f1 " << test_ev.action.macro_f1
                << ", asd acc " << test_ev.asd.accuracy << " f1 " << test_ev.asd.macro_f1 << "\n";
    } else {
        ctx.err << "warning: test split is empty, no test metrics written\n";
    }
    ctx.out << "train: action acc " << train_ev.action.accuracy << ", asd acc " << train_ev.asd.accuracy << "\n";
    return 0;
}

int cmd_eval(Context& ctx, const fs::path& data, const fs::path& ckpt, const fs::path& out, std::size_t jobs)
{
    auto m = model::Model::load(ckpt);
    auto meta = io::read_manifest(ckpt).at("meta");
    auto ds = pipeline::io::read_dataset(data);
    pipeline::Dataset test = ds;
    if (meta.contains("split")) {
        // same split as training, so the numbers are comparable
        auto seed = meta["split"].at("seed").get<std::uint64_t>();
        auto ratio = meta["split"].at("ratio").get<double>();
        if (meta.contains("data_hash") && meta["data_hash"].get<std::uint64_t>() != pipeline::dataset_hash(ds))
            ctx.err << "warning: dataset differs from the one used in training\n";
        test = pipeline::stratified_split(ds, ratio, seed).test;
    }
    auto ev = pipeline::evaluate(*m, test, jobs);
    write_evaluation(out, "metrics", ev, ds);
    write_text(out / "confusion_action.csv", ev.action.confusion_csv());
    write_text(out / "confusion_asd.csv", ev.asd.confusion_csv());
    pipeline::io::write_json(out / "predictions.json", predictions_json(ev));
    ctx.out << "eval on " << test.size() << " samples: action acc " << ev.action.accuracy << ", asd acc "
            << ev.asd.accuracy << "\n";
    return 0;
}

// ---- predict ----

int cmd_predict(Context& ctx, const fs::path& sample_dir, const fs::path& ckpt, const std::string& out)
{
    auto m = model::Model::load(ckpt);
    preprocess::Sample s = load_raw_sample(sample_dir, ctx.cfg, 0, 0, sample_dir.filename().string());
    auto o = m->infer(m->prepare(s));
    auto probs = [](const ad::Tensor& logits) {
        auto v = logits.data();
        std::vector<double> p(v.begin(), v.end());
        double mx = *std::max_element(p.begin(), p.end()), sum = 0;
        for (auto& x : p)
            sum += (x = std::exp(x - mx));
        for (auto& x : p)
            x /= sum;
        return p;
    };
    auto pa = probs(o.action_logits), ps = probs(o.asd_logits);
    auto action = static_cast<std::size_t>(std::max_element(pa.begin(), pa.end()) - pa.begin());
    int asd = ps[1] > ps[0] ? 1 : 0;
    json j = {{"id", s.id},
              {"action", action},
              {"action_name", action_names().at(action)},
              {"asd", asd},
              {"action_prob", pa},
              {"asd_prob", ps}};
    ctx.out << "action: " << action_names().at(action) << " (" << action << ", p=" << pa[action] << ")\n"
            << "asd: " << (asd ? "yes" : "no") << " (p=" << ps[1] << ")\n";
    if (!out.empty()) {
        fs::create_directories(out);
        pipeline::io::write_json(fs::path(out) / "prediction.json", j);
    }
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multimodal action and ASD classification toolkit", "mmasd"};
    app.require_subcommand(1);

    Common c_track, c_flow, c_raster, c_pre, c_aug, c_synth, c_train, c_eval, c_pred;
    std::string detections, video, video_flow, mesh, labels, root, aug_data, train_data, eval_data, ckpt, pred_ckpt,
        sample, mode = "joint";
    std::size_t per_class = 8;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<double> lr, ratio;
    bool no_augment = false;

    auto* track = app.add_subcommand("track", "detections + video -> tracks and per-person clips");
    add_common(track, c_track);
    track->add_option("--detections", detections, "detections JSONL")->required();
    track->add_option("--video", video, "video clip (.mmc)")->required();

    auto* flw = app.add_subcommand("flow", "dense optical flow of a clip");
    add_common(flw, c_flow);
    flw->add_option("--video", video_flow, "clip (.mmc)")->required();

    auto* ras = app.add_subcommand("rasterize", "mesh sequence -> mesh clip");
    add_common(ras, c_raster);
    ras->add_option("--mesh", mesh, "mesh sequence (.mmm)")->required();

    auto* pre = app.add_subcommand("preprocess", "raw per-clip files + labels -> dataset");
    add_common(pre, c_pre);
    pre->add_option("--labels", labels, "clip_id,action_label,asd_label CSV")->required();
    pre->add_option("--root", root, "directory holding <clip_id>/ folders")->required();

    auto* aug = app.add_subcommand("augment", "dataset -> dataset plus rotated copies");
    add_common(aug, c_aug);
    aug->add_option("--data", aug_data, "dataset directory")->required();

    auto* syn = app.add_subcommand("synth", "generate a labelled synthetic dataset");
    add_common(syn, c_synth);
    syn->add_option("--per-class", per_class, "samples per action class")->check(CLI::PositiveNumber);

    auto* trn = app.add_subcommand("train", "split, train, checkpoint and score");
    add_common(trn, c_train);
    trn->add_option("--data", train_data, "dataset directory")->required();
    trn->add_option("--mode", mode, "joint or independent")->check(CLI::IsMember({"joint", "independent"}));
    trn->add_option("--epochs", epochs, "training epochs");
    trn->add_option("--batch-size", batch_size, "mini-batch size");
    trn->add_option("--lr", lr, "learning rate");
    trn->add_option("--ratio", ratio, "train fraction per stratum");
    trn->add_flag("--no-augment", no_augment, "skip rotation augmentation");

    auto* evl = app.add_subcommand("eval", "score a checkpoint on its held-out split");
    add_common(evl, c_eval);
    evl->add_option("--data", eval_data, "dataset directory")->required();
    evl->add_option("--checkpoint", ckpt, "checkpoint directory")->required();

    auto* prd = app.add_subcommand("predict", "classify one sample");
    add_common(prd, c_pred, false);
    prd->add_option("--sample", sample, "sample directory (flow.mmc, mesh.mmc or mesh.mmm, skeleton.csv)")->required();
    prd->add_option("--checkpoint", pred_ckpt, "checkpoint directory")->required();

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        auto* sub = app.get_subcommands().front();
        std::map<CLI::App*, Common*> commons = {{track, &c_track}, {flw, &c_flow}, {ras, &c_raster},
                                                {pre, &c_pre},     {aug, &c_aug},  {syn, &c_synth},
                                                {trn, &c_train},   {evl, &c_eval}, {prd, &c_pred}};
        Common& common = *commons.at(sub);
        std::vector<Assignment> extra;
        if (sub == trn) {
            if (epochs)
                extra.push_back({"train.epochs", std::to_string(*epochs), "--epochs"});
            if (batch_size)
                extra.push_back({"train.batch_size", std::to_string(*batch_size), "--batch-size"});
            if (lr) {
                std::ostringstream os;
                os.precision(17);
                os << *lr;
                extra.push_back({"train.lr", os.str(), "--lr"});
            }
            if (ratio) {
                std::ostringstream os;
                os.precision(17);
                os << *ratio;
                extra.push_back({"split.ratio", os.str(), "--ratio"});
            }
            if (no_augment)
                extra.push_back({"train.augment", "false", "--no-augment"});
        }
        Context ctx{resolve_common(common, std::move(extra)), out, err};
        fs::path o = common.out;
        if (!common.out.empty())
            prepare_out(o, ctx.cfg, out);

        if (sub == track)
            return cmd_track(ctx, detections, video, o);
        if (sub == flw)
            return cmd_flow(ctx, video_flow, o, common.jobs);
        if (sub == ras)
            return cmd_rasterize(ctx, mesh, o);
        if (sub == pre)
            return cmd_preprocess(ctx, labels, root, o);
        if (sub == aug)
            return cmd_augment(ctx, aug_data, o);
        if (sub == syn)
            return cmd_synth(ctx, per_class, o);
        if (sub == trn)
            return cmd_train(ctx, train_data, o, mode, common.jobs);
        if (sub == evl)
            return cmd_eval(ctx, eval_data, ckpt, o, common.jobs);
        return cmd_predict(ctx, sample, pred_ckpt, common.out);
    } catch (const io::IoError& e) {
        err << "io error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        err << "io error: " << e.what() << "\n";
        return 2;
    } catch (const tracking::io::ParseError& e) {
        err << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const pipeline::DivergenceError& e) {
        err << "training diverged: " << e.what() << "\n";
        return 1;
    } catch (const preprocess::ValidationError& e) {
        err << "invalid data: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DimensionError& e) {
        err << "dimension error: " << e.what() << "\n";
        return 1;
    } catch (const StateError& e) {
        err << "state error: " << e.what() << "\n";
        return 1;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const json::exception& e) {
        err << "malformed json: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace mmasd::cli
