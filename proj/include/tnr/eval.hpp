#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tnr/attacks.hpp"
#include "tnr/data.hpp"
#include "tnr/nn.hpp"

namespace tnr {

/// Argmax of each logits row; ties go to the lower class index.
std::vector<int> argmax_rows(const FTensor& logits);

/// Predicted class for every sample, evaluated in batches. With workers > 1
/// disjoint ranges run on separate threads; the result does not depend on
/// the worker count.
std::vector<int> predict(const SplitModel& m, const Dataset& d, unsigned workers = 1,
                         std::size_t batch_size = 256);

struct HitCount {
    std::size_t hits = 0;
    std::size_t total = 0;
    double percent() const { return total ? 100.0 * static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

HitCount count_correct(const SplitModel& m, const Dataset& clean_test, unsigned workers = 1);
HitCount count_target_hits(const SplitModel& m, const Dataset& backdoor_test, int target, unsigned workers = 1);

/// Percent of samples whose prediction equals the label.
double eval_clean_accuracy(const SplitModel& m, const Dataset& clean_test, unsigned workers = 1);
/// Percent of (triggered, non-target) samples predicted as `target`.
double eval_asr(const SplitModel& m, const Dataset& backdoor_test, int target, unsigned workers = 1);

/// Per-pixel mean squared error between x and its reconstruction.
double reconstruction_mse(const SplitModel& m, const Dataset& d);

/// Flattened stem output, one row per sample: [N, D].
FTensor stem_features(const SplitModel& m, const Dataset& d, std::size_t batch_size = 256);

class PcaError : public std::runtime_error {
public:
    PcaError(const std::string& msg, long iterations) : std::runtime_error(msg), iterations_(iterations) {}
    long iterations() const { return iterations_; }

private:
    long iterations_;
};

struct Pca2 {
    std::vector<double> mean;                      // [D]
    std::array<std::vector<double>, 2> components;  // unit norm, orthogonal
    std::array<double, 2> explained_variance{};
    std::vector<std::array<double, 2>> coords;  // [N]
    std::array<long, 2> iterations{};
};

/// Top two principal components by power iteration with deflation. Each
/// component's largest-magnitude entry is positive.
Pca2 pca2(const FTensor& features, double tol = 1e-8, long max_iter = 10000);

enum class ScatterGroup { clean_target_class, clean_source_class, poisoned_source_class };
std::string_view to_string(ScatterGroup g);

struct ScatterExport {
    std::vector<std::array<double, 2>> coords;
    std::vector<ScatterGroup> groups;
    Pca2 pca;
};

/// Stem features of clean target-class samples, clean source-class samples
/// and triggered copies of the source-class samples.
struct FeatureGroups {
    FTensor clean_target, clean_source, poisoned_source;
};

FeatureGroups feature_groups(const SplitModel& m, const Dataset& clean_test, const TriggerSpec& spec,
                             int source_class, int target);

ScatterExport export_scatter(const SplitModel& m, const Dataset& clean_test, const TriggerSpec& spec,
                             int source_class, int target);
/// Header `x,y,group`, LF line endings.
void write_scatter_csv(const ScatterExport& s, const std::filesystem::path& path);

/// Fraction of poisoned rows strictly closer to the clean-source centroid
/// than to the clean-target centroid.
double centroid_separation(const FeatureGroups& g);
double centroid_separation(const SplitModel& m, const Dataset& clean_test, const TriggerSpec& spec,
                           int source_class, int target);

/// 16 hex digits of FNV-1a over the compact dump of `j` (object keys sorted).
std::string fingerprint(const nlohmann::json& j);

struct RunReport {
    std::string attack;
    std::string mode;
    double alpha = 0.0;
    double ca = 0.0;
    double asr = 0.0;
    std::optional<double> mse;
    std::optional<double> separation;
    nlohmann::json traces = nlohmann::json::object();
    nlohmann::json config = nlohmann::json::object();
    std::string fingerprint;
};

void to_json(nlohmann::json& j, const RunReport& r);
void from_json(const nlohmann::json& j, RunReport& r);

inline constexpr const char* kResultsHeader = "attack,mode,alpha,asr,ca,mse,separation,fingerprint";
std::string results_row(const RunReport& r);
/// Appends one row, writing the header first when the file is new or empty.
void append_results_row(const std::filesystem::path& csv, const RunReport& r);

}  // namespace tnr
