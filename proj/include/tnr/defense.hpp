#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tnr/data.hpp"
#include "tnr/nn.hpp"

namespace tnr {

struct Stage1Config {
    double lambda1 = 10.0;  // weight of the reconstruction loss
    double lambda2 = 0.1;   // TV weight inside the reconstruction loss
    int epochs = 15;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    double weight_decay = 5e-4;
    RecNorm rec_norm = RecNorm::l2;
    bool hflip = false;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Stage2Config {
    int epochs = 15;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 5e-4;
    double dropout = 0.5;
    double smoothing = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const Stage1Config& c);
void from_json(const nlohmann::json& j, Stage1Config& c);
void to_json(nlohmann::json& j, const Stage2Config& c);
void from_json(const nlohmann::json& j, Stage2Config& c);

enum class PipelineMode { full_tnr, no_recon, no_replace, no_defense };

std::string_view to_string(PipelineMode m);
PipelineMode parse_pipeline_mode(std::string_view name);
const std::vector<PipelineMode>& all_pipeline_modes();

/// Per-step and per-epoch training losses. For stage 2 the rec column is empty.
struct LossTrace {
    std::string stage;
    double lambda1 = 0.0;
    std::vector<double> epoch_clf, epoch_rec, epoch_total, epoch_lr;
    // one entry per optimizer step, as computed in the forward pass
    std::vector<double> step_clf, step_rec, step_total;
};

void to_json(nlohmann::json& j, const LossTrace& t);
void from_json(const nlohmann::json& j, LossTrace& t);

class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(int epoch, std::size_t batch, const std::string& msg)
        : std::runtime_error(msg), epoch_(epoch), batch_(batch) {}
    int epoch() const { return epoch_; }
    std::size_t batch() const { return batch_; }

private:
    int epoch_;
    std::size_t batch_;
};

/// Sets the reconstruction head's output bias to logit(mean pixel of `d`), so
/// the decoder starts at the data's mean intensity instead of 0.5. On dark
/// datasets a 0.5 start lets the sigmoid saturate at 0 within a few Adam
/// steps, after which it never recovers.
void init_recon_output_bias(SplitModel& m, const Dataset& d);

/// Joint training of stem, classification head and reconstruction head on
/// L_clf + lambda1 * L_rec, where L_rec reconstructs the (possibly poisoned)
/// input. The reconstruction head's output bias is first set by
/// init_recon_output_bias. With lambda1 == 0 the reconstruction head receives no gradient and
/// is left untouched. Mutates `m` in place.
LossTrace train_stage1(SplitModel& m, const Dataset& train, const Stage1Config& cfg);

/// Reinitializes the classification head and trains it alone on `holdout`
/// with dropout and label smoothing. Stem and reconstruction head stay
/// bitwise unchanged.
LossTrace train_stage2(SplitModel& m, const Dataset& holdout, const Stage2Config& cfg);

struct PipelineResult {
    SplitModel model;
    LossTrace stage1;
    std::optional<LossTrace> stage2;
};

/// Stage-1 config as the mode sees it (lambda1 forced to 0 for no_recon and
/// no_defense).
Stage1Config effective_stage1(PipelineMode mode, Stage1Config cfg);
bool mode_replaces_head(PipelineMode mode);

PipelineResult run_pipeline(const SplitModel& init, const Dataset& train, const Dataset& holdout,
                            PipelineMode mode, const Stage1Config& s1, const Stage2Config& s2);

/// Stage-2 part of the pipeline applied to an existing stage-1 model.
PipelineResult finish_pipeline(const SplitModel& stage1_model, const LossTrace& stage1_trace,
                               const Dataset& holdout, PipelineMode mode, const Stage2Config& s2);

}  // namespace tnr
