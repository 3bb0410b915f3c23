#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tnr/tensor.hpp"

namespace tnr {

using FTensor = Tensor<float>;

/// Architecture of the stem / classification-head / reconstruction-head network.
///
/// Conv layers come in pairs; a 2x2 max-pool follows every pair except the
/// last. The first `split_index` conv layers form the stem, the remaining
/// convs plus global-average-pool and the fully connected layer form the
/// classification head.
struct NetworkConfig {
    std::size_t channels = 1;
    std::size_t height = 28;
    std::size_t width = 28;
    std::size_t num_classes = 10;
    std::vector<std::size_t> widths{32, 32, 64, 64, 128, 128};
    std::size_t split_index = 4;
    double dropout = 0.5;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
    Shape input_shape(std::size_t batch) const { return {batch, channels, height, width}; }
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

enum class Phase { eval, stage1, stage2 };

struct ConvLayer {
    FTensor weight;  // [F, C, 3, 3]
    FTensor bias;    // [F]
    bool pool_after = false;
};

class SplitModel {
public:
    SplitModel() = default;

    const NetworkConfig& config() const { return cfg_; }

    /// fs(x): output of the last stem layer (after its pool, if any).
    FTensor forward_stem(const FTensor& x) const;
    /// fc applied to stem features. Dropout before the FC layer is active
    /// only in Phase::stage2.
    FTensor forward_head(const FTensor& features, Phase phase, std::uint64_t dropout_seed = 0) const;
    /// fr applied to stem features; values in (0, 1).
    FTensor forward_decoder(const FTensor& features) const;

    FTensor forward_classify(const FTensor& x, Phase phase = Phase::eval,
                             std::uint64_t dropout_seed = 0) const;
    FTensor forward_reconstruct(const FTensor& x) const;

    std::vector<FTensor> stem_params() const;
    std::vector<FTensor> head_params() const;
    std::vector<FTensor> recon_params() const;
    std::vector<FTensor> all_params() const;

    bool has_recon() const { return !decoder_.empty(); }
    /// Drops the reconstruction head (e.g. to ship a classifier only).
    void drop_recon() { decoder_.clear(); }
    /// Rate of the dropout in front of the FC layer; must lie in [0, 1).
    void set_dropout(double rate);

    /// Shape of fs(x) for a batch of one.
    Shape stem_output_shape() const;

    /// Deep copy: the returned model shares no storage with this one.
    SplitModel clone() const;

private:
    friend SplitModel build_network(const NetworkConfig& cfg);
    friend void reinit_head(SplitModel& m, std::uint64_t seed);
    friend struct CheckpointIo;

    void check_input(const FTensor& x) const;

    NetworkConfig cfg_;
    std::vector<ConvLayer> stem_;
    std::vector<ConvLayer> head_convs_;
    FTensor fc_weight_;  // [D, K]
    FTensor fc_bias_;    // [K]
    std::vector<ConvLayer> decoder_;
};

SplitModel build_network(const NetworkConfig& cfg);

/// Fresh classification-head parameters drawn from `seed`; stem and
/// reconstruction head are untouched.
void reinit_head(SplitModel& m, std::uint64_t seed);

// ---- checkpoints ------------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { io, bad_magic, version_mismatch, truncated, malformed };
    CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct CheckpointMeta {
    std::string stage;
    nlohmann::json summary = nlohmann::json::object();
};

inline constexpr char kCheckpointMagic[4] = {'T', 'N', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "TNRC", u32 version, u64 header length, JSON header (config,
/// stage, summary, tensor table), then every tensor as little-endian f32 in
/// header order. All integers little-endian.
void save_checkpoint(const SplitModel& m, const std::filesystem::path& path,
                     const CheckpointMeta& meta = {});
SplitModel load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace tnr
