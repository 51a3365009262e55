#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mmasd/flow.hpp"
#include "mmasd/model.hpp"
#include "mmasd/pipeline.hpp"
#include "mmasd/tracking.hpp"

namespace mmasd::cli {

/// Every tunable of a run. Defaults are the module defaults except the model,
/// which starts from the desk-scale preset.
struct RunConfig {
    std::string model_preset = "micro";
    tracking::TrackerConfig tracker;
    flow::FlowConfig flow;
    model::ModelConfig model = model::ModelConfig::micro();
    pipeline::TrainConfig train;
    double split_ratio = 0.8;
    std::size_t crop_size = preprocess::kClipSize;
    double raster_radius = 1.0;
    std::uint64_t seed = 7;

    /// Flat `key = value` lines in registry order.
    std::string dump() const;
    /// Checks every module config (ConfigError on failure).
    void validate() const;
};

/// One `key = value` assignment and where it came from (for messages).
struct Assignment {
    std::string key, value, origin;
};

/// Flat text form: `key = value` per line, `#` comments, blank lines ignored.
/// Raises ConfigError with the line number on malformed lines.
std::vector<Assignment> parse_config_text(const std::string& text, const std::string& origin);
std::vector<Assignment> read_config_file(const std::filesystem::path& path);

/// Layered resolution: defaults < file assignments < flag assignments.
/// `model.preset` is applied before any other model key regardless of order.
/// Unknown keys are rejected with the closest known key as a suggestion; bad
/// values name the key and the expected type.
RunConfig resolve(const std::vector<Assignment>& file, const std::vector<Assignment>& flags);

/// All known keys, in registry order.
std::vector<std::string> known_keys();

}  // namespace mmasd::cli
