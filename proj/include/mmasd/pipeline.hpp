#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mmasd/model.hpp"
#include "mmasd/preprocess.hpp"

namespace mmasd::pipeline {

struct Dataset {
    std::vector<preprocess::Sample> samples;
    std::string provenance = "real";  // or "synthetic"

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    std::vector<std::size_t> class_counts() const;  // per action class
};

/// Motion geometry of the synthetic classes. Action a oscillates about the
/// rest pose, starting in direction 2*pi*a/11, with 1 + a%3 cycles per clip;
/// ASD scales the amplitude by asd_gain. A gain above 3 keeps every ASD peak
/// speed above every typical one whatever the cycle count.
struct SynthOptions {
    double amplitude_px = 7.0;      // clip motion, pixels at 100x100
    double amplitude_skel = 0.12;   // skeleton motion, normalized units
    double asd_gain = 3.5;
    double phase_jitter = 0.3;      // radians
    double skel_noise = 0.004;
    std::size_t joints = preprocess::kDefaultJoints;
};

Dataset synth_dataset(std::size_t n_per_class, std::uint64_t seed, const SynthOptions& options = {});

/// (action, asd) label pairs -> (train, test) indices. Per stratum: shuffle
/// by seed, floor(ratio * n) to train, the rest to test; singleton strata go
/// to train and are reported in `warnings`.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
stratified_split_indices(const std::vector<std::pair<int, int>>& labels, double ratio, std::uint64_t seed,
                         std::vector<std::string>* warnings = nullptr);

struct Split {
    Dataset train, test;
    std::vector<std::string> warnings;
};
Split stratified_split(const Dataset& ds, double ratio, std::uint64_t seed);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 4;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 7;
    bool augment = true;

    void validate() const;  // ConfigError naming the field
    nlohmann::json to_json() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double loss = 0.0;      // mean over the epoch's training samples
    double action_accuracy = 0.0;
    double asd_accuracy = 0.0;
};

struct History {
    double initial_loss = 0.0;  // mean train-mode loss before the first update
    std::vector<EpochRecord> epochs;
    nlohmann::json to_json() const;
};

/// Loss went non-finite; the message names the epoch and batch.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t epoch, std::size_t batch, double loss);
    std::size_t epoch() const { return epoch_; }
    std::size_t batch() const { return batch_; }

private:
    std::size_t epoch_, batch_;
};

/// Mini-batch Adam on the combined loss, weights from the model's fusion
/// config. With augmentation each sample also appears rotated by the four
/// standard angles. Progress lines go to `log` when given.
History train_loop(model::Model& m, const Dataset& train, const TrainConfig& cfg, std::ostream* log = nullptr);

struct Metrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

    nlohmann::json to_json() const;
    std::string confusion_csv() const;
};

/// Macro-F1 averages over classes present in the truth or the predictions;
/// a present class with zero precision and recall counts as 0.
Metrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes);

struct Prediction {
    std::string id;
    int action = 0, asd = 0;
    std::vector<double> action_prob, asd_prob;
};

struct Evaluation {
    Metrics action, asd;
    std::vector<Prediction> predictions;
    nlohmann::json to_json() const;  // metrics only
};

/// Eval-mode forward over every sample (needs batch-norm statistics from
/// training). Samples are independent, so `jobs` threads may share the model.
Evaluation evaluate(const model::Model& m, const Dataset& test, std::size_t jobs = 1);

struct IndependentResult {
    History action_history, asd_history;
    Evaluation action_eval, asd_eval;  // each model scored on its own task
    nlohmann::json to_json() const;
};

/// Two models with identical seeds, one per task; the other task's loss
/// weight is zero.
IndependentResult independent_mode(const model::ModelConfig& cfg, std::uint64_t model_seed, const Dataset& train,
                                   const Dataset& test, const TrainConfig& tc, std::ostream* log = nullptr);

/// Order-sensitive FNV-1a over ids, labels and every modality value.
std::uint64_t dataset_hash(const Dataset& ds);

namespace io {

/// Writes one directory per sample (flow.mmc, mesh.mmc, skeleton.csv) and
/// manifest.csv with clip_id,flow_path,mesh_path,skeleton_path,action_label,asd_label.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
/// Reads a manifest; paths are relative to its directory.
Dataset read_dataset(const std::filesystem::path& dir);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace io

}  // namespace mmasd::pipeline
