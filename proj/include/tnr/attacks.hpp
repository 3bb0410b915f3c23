#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tnr/data.hpp"

namespace tnr {

enum class TriggerKind {
    badnet_grid,
    badnet_white,
    blend,
    sig,
    smooth,
    l2_invisible,
    l0_invisible,
    trojan_sq,
    trojan_wm,
};

std::string_view to_string(TriggerKind k);
/// Throws std::invalid_argument for names outside the supported roster.
TriggerKind parse_trigger_kind(std::string_view name);
const std::vector<TriggerKind>& all_trigger_kinds();

/// Declarative trigger. Zero-valued size/ratio/budget fields select the
/// per-kind default documented on render_trigger.
struct TriggerSpec {
    TriggerKind kind = TriggerKind::badnet_grid;
    std::size_t patch_size = 0;
    std::size_t margin = 1;  // distance of corner patches from the image border
    double blend_ratio = 0.0;
    double amplitude = 20.0 / 255.0;  // sig and smooth
    double frequency = 6.0;           // sig
    double l2_budget = 0.0;
    std::size_t l0_pixels = 8;
    std::string watermark_path;  // optional PGM (P5) asset for trojan_wm
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const TriggerSpec& s);
void from_json(const nlohmann::json& j, TriggerSpec& s);

enum class TriggerMode { overwrite, additive, blend };

/// Per-pixel realization of a trigger for one image shape.
struct TriggerField {
    TriggerMode mode = TriggerMode::overwrite;
    FTensor pattern;  // [C, H, W]
    FTensor mask;     // [H, W], values in [0, 1]
    double blend_ratio = 0.0;
};

/// Renders `spec` for images of shape [C, H, W]:
///   badnet_grid   overwrite, 3x3 checkerboard in the bottom-right corner
///   badnet_white  overwrite, s x s white patch (s = 3) bottom-right
///   trojan_sq     overwrite, s x s seeded random patch (s = 5) bottom-right
///   trojan_wm     blend (0.3) of a seeded stroke glyph, or of a PGM asset
///   blend         blend (0.2) of seeded uniform noise over the whole image
///   sig           additive amplitude * sin(2 pi w f / W)
///   smooth        additive mix of the 4 lowest non-constant 2-D cosines
///   l2_invisible  additive Gaussian field with L2 norm = budget
///                 (1.5 for one channel, 2.0 otherwise)
///   l0_invisible  overwrite of k seeded pixels with seeded colors
TriggerField render_trigger(const TriggerSpec& spec, const Shape& image_shape);

void apply_trigger(std::span<const float> image, const TriggerField& t, std::span<float> out);
/// Applies the trigger to a copy of `image` ([C,H,W] or [1,C,H,W]).
FTensor apply_trigger(const FTensor& image, const TriggerField& t);

/// Reads a binary PGM (P5), scaled to [0,1].
FTensor read_pgm(const std::filesystem::path& path);

enum class PoisonPolicy { dirty_label, clean_label };

std::string_view to_string(PoisonPolicy p);
PoisonPolicy parse_poison_policy(std::string_view name);

struct PoisonPlan {
    PoisonPolicy policy = PoisonPolicy::dirty_label;
    int target = 0;
    double alpha = 0.0;
    std::uint64_t seed = 0;
    TriggerSpec trigger;
    std::vector<std::size_t> indices;  // ascending
    std::vector<int> original_labels;  // parallel to indices
    std::size_t requested = 0;         // floor(alpha * N)
    bool truncated = false;            // clean-label: target class smaller than requested
};

void to_json(nlohmann::json& j, const PoisonPlan& p);
void from_json(const nlohmann::json& j, PoisonPlan& p);

/// Returns a poisoned copy of `d` and the plan that produced it.
/// dirty_label: floor(alpha*N) non-target samples, triggered and relabeled to
/// `target`. clean_label: up to floor(alpha*N) target-class samples,
/// triggered with labels unchanged.
std::pair<Dataset, PoisonPlan> poison_train_set(const Dataset& d, const TriggerSpec& spec,
                                                PoisonPolicy policy, int target, double alpha,
                                                std::uint64_t seed);

/// Triggered copies of every test sample whose label differs from `target`;
/// labels keep their original values.
Dataset build_backdoor_test_set(const Dataset& clean_test, const TriggerSpec& spec, int target);

}  // namespace tnr
