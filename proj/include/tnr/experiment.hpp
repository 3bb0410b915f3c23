#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tnr/attacks.hpp"
#include "tnr/data.hpp"
#include "tnr/defense.hpp"
#include "tnr/eval.hpp"
#include "tnr/nn.hpp"

namespace tnr {

/// Invalid or incomplete experiment configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct DatasetSource {
    std::string format = "idx";  // idx | cifar
    // idx: the four files; a `dir` entry fills in the standard MNIST names
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    // cifar: directory holding data_batch_{1..5}.bin and test_batch.bin
    std::filesystem::path dir;
    std::size_t num_classes = 10;
};

struct AttackConfig {
    TriggerSpec trigger;
    PoisonPolicy policy = PoisonPolicy::dirty_label;
    double alpha = 0.1;
    int target = 0;
    std::uint64_t seed = 0;  // poison sample selection
};

struct EvalConfig {
    int source_class = -1;  // -1: smallest class other than the target
    unsigned workers = 0;   // 0: hardware concurrency
    bool require_mse = false;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    bool desk_scale = false;
    DatasetSource dataset;
    AttackConfig attack;
    SplitSpec split;
    NetworkConfig network;
    Stage1Config stage1;
    Stage2Config stage2;
    PipelineMode mode = PipelineMode::full_tnr;
    EvalConfig eval;
    std::filesystem::path output_dir;
    /// Extra attacks for the table3 scenario; empty means just `attack`.
    std::vector<AttackConfig> scenario_attacks;

    void validate() const;
    int source_class() const;
};

/// Defaults layered under a user config: the reduced desk preset when
/// `desk_scale` is true, full-size training otherwise.
nlohmann::json config_defaults(bool desk_scale);

/// Per-component seeds not given explicitly are derived from the top-level
/// `seed`, which is mandatory. `seed_override` replaces it before derivation.
/// Relative paths resolve against `base_dir`. Throws ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir,
                              std::optional<std::uint64_t> seed_override = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path,
                             std::optional<std::uint64_t> seed_override = std::nullopt);

/// Resolved configuration as JSON; output_dir is left out so reports do not
/// depend on where they are written.
nlohmann::json config_json(const ExperimentConfig& c);
void to_json(nlohmann::json& j, const AttackConfig& a);

struct ExperimentData {
    Dataset train;    // poisoning candidates
    Dataset holdout;  // clean, drawn before poisoning
    Dataset test;
};

/// Loads train/test and splits the holdout off the training set.
ExperimentData load_experiment_data(const ExperimentConfig& c);

/// Copies image extents and class count from the data into c.network.
void fit_network(ExperimentConfig& c, const Dataset& d);

struct RunOutcome {
    SplitModel stage1_model;
    PipelineResult result;
    RunReport report;
    PoisonPlan plan;
};

/// Runs pipeline cells against one loaded dataset. Stage-1 models are cached
/// by their inputs, so modes sharing a stage 1 (no_recon / no_defense and
/// full_tnr / no_replace) train it once. With a cache dir the stage-1
/// checkpoints also persist across processes.
class Runner {
public:
    explicit Runner(const ExperimentConfig& base, std::filesystem::path cache_dir = {});

    const ExperimentData& data() const { return data_; }
    const ExperimentConfig& base() const { return base_; }

    /// `holdout_size` keeps only the first n holdout samples.
    RunOutcome run(const ExperimentConfig& cell, std::optional<std::size_t> holdout_size = std::nullopt);

    std::size_t stage1_trainings() const { return trainings_; }

private:
    struct Stage1Entry {
        SplitModel model;
        LossTrace trace;
    };
    const Stage1Entry& stage1(const ExperimentConfig& cell, const Dataset& poisoned);

    ExperimentConfig base_;
    ExperimentData data_;
    std::filesystem::path cache_dir_;
    std::map<std::string, Stage1Entry> cache_;
    std::size_t trainings_ = 0;
};

/// CA, ASR, MSE (when the model has a reconstruction head) and centroid
/// separation of `m` under the attack in `c`, plus the fingerprint.
RunReport evaluate_run(const SplitModel& m, const ExperimentConfig& c, const Dataset& test,
                       nlohmann::json traces = nlohmann::json::object());

// ---- commands -----------------------------------------------------------------

/// Writes the poisoned training split (input format) and plan.json to `out`.
PoisonPlan cmd_poison(const ExperimentConfig& c, const std::filesystem::path& out);

/// Trains per c.mode; writes stage1.tnrc, model.tnrc, report.json and appends
/// one row to results.csv in `out`.
RunReport cmd_run(const ExperimentConfig& c, const std::filesystem::path& out);

/// Evaluates a checkpoint without training; writes eval_report.json.
RunReport cmd_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                   const std::filesystem::path& out);

/// Stem-feature PCA of a checkpoint; writes scatter.csv and pca.json.
ScatterExport cmd_pca(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                      const std::filesystem::path& out);

enum class Scenario { table3, table4, table5, table8, table9, clean };
std::string_view to_string(Scenario s);
Scenario parse_scenario(std::string_view name);

struct ScenarioCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct ScenarioRow {
    std::string cell;
    RunReport report;
};

struct ReproduceSummary {
    Scenario scenario = Scenario::table3;
    std::vector<ScenarioRow> rows;
    std::vector<ScenarioCheck> checks;
    bool all_passed() const;
};

/// Grid of runs for one ablation; checks cover the orderings expected of
/// the scenario.
ReproduceSummary reproduce(Runner& runner, Scenario s);

/// Runs the grid and writes <scenario>.csv, <scenario>_summary.json and rows
/// appended to results.csv in `out`. Stage-1 checkpoints are cached under
/// out/cache.
ReproduceSummary cmd_reproduce(const ExperimentConfig& c, Scenario s, const std::filesystem::path& out);

inline constexpr const char* kScenarioHeader = "cell,attack,mode,alpha,asr,ca,mse,separation,fingerprint";

}  // namespace tnr
