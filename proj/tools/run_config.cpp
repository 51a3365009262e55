#include "run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "mmasd/binary_io.hpp"

namespace mmasd::cli {

namespace {

struct Entry {
    std::string key;
    std::string type;
    std::function<bool(RunConfig&, const std::string&)> set;  // false on a bad value
    std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s)
{
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_number(const std::string& s, T& out)
{
    auto end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end;
}

bool parse_value(const std::string& s, double& out)
{
    return parse_number(s, out);
}
bool parse_value(const std::string& s, int& out)
{
    return parse_number(s, out);
}
bool parse_value(const std::string& s, std::size_t& out)
{
    return !s.empty() && s[0] != '-' && parse_number(s, out);
}
bool parse_value(const std::string& s, bool& out)
{
    if (s == "true" || s == "1" || s == "yes" || s == "on")
        return out = true, true;
    if (s == "false" || s == "0" || s == "no" || s == "off")
        return out = false, true;
    return false;
}
bool parse_value(const std::string& s, std::array<std::size_t, 4>& out)
{
    std::stringstream ss(s);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i == 4 || !parse_value(trim(part), out[i]))
            return false;
        ++i;
    }
    return i == 4;
}

std::string show(double v)
{
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}
std::string show(int v)
{
    return std::to_string(v);
}
std::string show(std::size_t v)
{
    return std::to_string(v);
}
std::string show(bool v)
{
    return v ? "true" : "false";
}
std::string show(const std::array<std::size_t, 4>& v)
{
    return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]) + "," + std::to_string(v[3]);
}

template <typename T> const char* type_name();
template <> const char* type_name<double>() { return "number"; }
template <> const char* type_name<int>() { return "integer"; }
template <> const char* type_name<std::size_t>() { return "non-negative integer"; }
template <> const char* type_name<bool>() { return "boolean (true/false)"; }
template <> const char* type_name<std::array<std::size_t, 4>>() { return "list of 4 non-negative integers"; }

template <typename Access>
Entry field(std::string key, Access access)
{
    using T = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
    return {std::move(key), type_name<T>(),
            [access](RunConfig& c, const std::string& v) {
                T parsed{};
                if (!parse_value(v, parsed))
                    return false;
                access(c) = parsed;
                return true;
            },
            [access](const RunConfig& c) { return show(access(const_cast<RunConfig&>(c))); }};
}

const std::vector<Entry>& registry()
{
    static const std::vector<Entry> entries = [] {
        std::vector<Entry> e;
        e.push_back({"model.preset", "one of: micro, full",
                     [](RunConfig& c, const std::string& v) {
                         if (v != "micro" && v != "full")
                             return false;
                         c.model_preset = v;
                         return true;
                     },
                     [](const RunConfig& c) { return c.model_preset; }});
        e.push_back({"seed", "non-negative integer",
                     [](RunConfig& c, const std::string& v) { return !v.empty() && v[0] != '-' && parse_number(v, c.seed); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});
        // tracking
        e.push_back(field("tracker.nms_iou_threshold", [](RunConfig& c) -> auto& { return c.tracker.nms_iou_threshold; }));
        e.push_back(field("tracker.min_confidence", [](RunConfig& c) -> auto& { return c.tracker.min_confidence; }));
        e.push_back(field("tracker.lambda", [](RunConfig& c) -> auto& { return c.tracker.lambda; }));
        e.push_back(field("tracker.max_cost", [](RunConfig& c) -> auto& { return c.tracker.max_cost; }));
        e.push_back(field("tracker.confirm_hits", [](RunConfig& c) -> auto& { return c.tracker.confirm_hits; }));
        e.push_back(field("tracker.max_misses", [](RunConfig& c) -> auto& { return c.tracker.max_misses; }));
        e.push_back(field("tracker.process_noise", [](RunConfig& c) -> auto& { return c.tracker.process_noise; }));
        e.push_back(field("tracker.measurement_noise", [](RunConfig& c) -> auto& { return c.tracker.measurement_noise; }));
        e.push_back(field("tracker.gallery_size", [](RunConfig& c) -> auto& { return c.tracker.gallery_size; }));
        e.push_back(field("crop.size", [](RunConfig& c) -> auto& { return c.crop_size; }));
        // optical flow
        e.push_back(field("flow.pyramid_levels", [](RunConfig& c) -> auto& { return c.flow.pyramid_levels; }));
        e.push_back(field("flow.pyramid_scale", [](RunConfig& c) -> auto& { return c.flow.pyramid_scale; }));
        e.push_back(field("flow.window_size", [](RunConfig& c) -> auto& { return c.flow.window_size; }));
        e.push_back(field("flow.iterations", [](RunConfig& c) -> auto& { return c.flow.iterations; }));
        e.push_back(field("flow.poly_n", [](RunConfig& c) -> auto& { return c.flow.poly_n; }));
        e.push_back(field("flow.poly_sigma", [](RunConfig& c) -> auto& { return c.flow.poly_sigma; }));
        e.push_back(field("raster.radius_px", [](RunConfig& c) -> auto& { return c.raster_radius; }));
        // model
        e.push_back(field("vivit.tubelet", [](RunConfig& c) -> auto& { return c.model.vivit.tubelet; }));
        e.push_back(field("vivit.patch", [](RunConfig& c) -> auto& { return c.model.vivit.patch; }));
        e.push_back(field("vivit.dim", [](RunConfig& c) -> auto& { return c.model.vivit.dim; }));
        e.push_back(field("vivit.heads", [](RunConfig& c) -> auto& { return c.model.vivit.heads; }));
        e.push_back(field("vivit.blocks", [](RunConfig& c) -> auto& { return c.model.vivit.blocks; }));
        e.push_back(field("vivit.mlp_ratio", [](RunConfig& c) -> auto& { return c.model.vivit.mlp_ratio; }));
        e.push_back(field("vivit.frames", [](RunConfig& c) -> auto& { return c.model.vivit.frames; }));
        e.push_back(field("vivit.size", [](RunConfig& c) -> auto& { return c.model.vivit.size; }));
        e.push_back(field("cnn.stem", [](RunConfig& c) -> auto& { return c.model.cnn.stem; }));
        e.push_back(field("cnn.stages", [](RunConfig& c) -> auto& { return c.model.cnn.stages; }));
        e.push_back(field("cnn.blocks_per_stage", [](RunConfig& c) -> auto& { return c.model.cnn.blocks_per_stage; }));
        e.push_back(field("cnn.frames", [](RunConfig& c) -> auto& { return c.model.cnn.frames; }));
        e.push_back(field("cnn.size", [](RunConfig& c) -> auto& { return c.model.cnn.size; }));
        e.push_back(field("lstm.layers", [](RunConfig& c) -> auto& { return c.model.lstm.layers; }));
        e.push_back(field("lstm.hidden", [](RunConfig& c) -> auto& { return c.model.lstm.hidden; }));
        e.push_back(field("lstm.joints", [](RunConfig& c) -> auto& { return c.model.lstm.joints; }));
        e.push_back(field("lstm.frames", [](RunConfig& c) -> auto& { return c.model.lstm.frames; }));
        e.push_back(field("fusion.dim", [](RunConfig& c) -> auto& { return c.model.fusion.dim; }));
        e.push_back(field("fusion.heads", [](RunConfig& c) -> auto& { return c.model.fusion.heads; }));
        e.push_back(field("fusion.w_action", [](RunConfig& c) -> auto& { return c.model.fusion.w_action; }));
        e.push_back(field("fusion.w_asd", [](RunConfig& c) -> auto& { return c.model.fusion.w_asd; }));
        // training
        e.push_back(field("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
        e.push_back(field("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
        e.push_back(field("train.lr", [](RunConfig& c) -> auto& { return c.train.lr; }));
        e.push_back(field("train.beta1", [](RunConfig& c) -> auto& { return c.train.beta1; }));
        e.push_back(field("train.beta2", [](RunConfig& c) -> auto& { return c.train.beta2; }));
        e.push_back(field("train.eps", [](RunConfig& c) -> auto& { return c.train.eps; }));
        e.push_back(field("train.augment", [](RunConfig& c) -> auto& { return c.train.augment; }));
        e.push_back(field("split.ratio", [](RunConfig& c) -> auto& { return c.split_ratio; }));
        return e;
    }();
    return entries;
}

std::size_t edit_distance(const std::string& a, const std::string& b)
{
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j)
        prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

const Entry& lookup(const Assignment& a)
{
    const auto& reg = registry();
    for (const auto& e : reg)
        if (e.key == a.key)
            return e;
    std::string best;
    std::size_t best_d = 4;  // suggest only close matches
    for (const auto& e : reg) {
        std::size_t d = edit_distance(a.key, e.key);
        if (d < best_d)
            best_d = d, best = e.key;
    }
    std::string msg = a.origin + ": unknown config key '" + a.key + "'";
    if (!best.empty())
        msg += " (did you mean '" + best + "'?)";
    throw ConfigError(msg);
}

void apply(RunConfig& c, const Assignment& a)
{
    const Entry& e = lookup(a);
    if (!e.set(c, a.value))
        throw ConfigError(a.origin + ": key '" + a.key + "' expects " + e.type + ", got '" + a.value + "'");
}

}  // namespace

std::string RunConfig::dump() const
{
    std::ostringstream os;
    for (const auto& e : registry())
        os << e.key << " = " << e.get(*this) << "\n";
    return os.str();
}

void RunConfig::validate() const
{
    tracker.validate();
    flow.validate();
    model.validate();
    train.validate();
    if (!(split_ratio > 0 && split_ratio < 1))
        throw ConfigError("split.ratio must lie in (0, 1)");
    if (crop_size == 0)
        throw ConfigError("crop.size must be positive");
    if (!(raster_radius >= 0))
        throw ConfigError("raster.radius_px must be non-negative");
}

std::vector<Assignment> parse_config_text(const std::string& text, const std::string& origin)
{
    std::vector<Assignment> out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value', got '" + line + "'");
        Assignment a{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), origin + ":" + std::to_string(n)};
        if (a.key.empty())
            throw ConfigError(a.origin + ": missing key");
        out.push_back(std::move(a));
    }
    return out;
}

std::vector<Assignment> read_config_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw io::IoError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

RunConfig resolve(const std::vector<Assignment>& file, const std::vector<Assignment>& flags)
{
    RunConfig c;
    // the preset replaces the whole model config, so it goes first
    for (const auto* layer : {&file, &flags})
        for (const auto& a : *layer)
            if (a.key == "model.preset")
                apply(c, a);
    c.model = c.model_preset == "full" ? model::ModelConfig::full() : model::ModelConfig::micro();
    for (const auto* layer : {&file, &flags})
        for (const auto& a : *layer)
            if (a.key != "model.preset")
                apply(c, a);
    c.train.seed = c.seed;
    c.validate();
    return c;
}

std::vector<std::string> known_keys()
{
    std::vector<std::string> keys;
    for (const auto& e : registry())
        keys.push_back(e.key);
    return keys;
}

}  // namespace mmasd::cli
