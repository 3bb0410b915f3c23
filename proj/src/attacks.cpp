#include "tnr/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "tnr/rng.hpp"

namespace tnr {

namespace {

constexpr std::array<std::pair<TriggerKind, std::string_view>, 9> kKindNames{{
    {TriggerKind::badnet_grid, "badnet_grid"},
    {TriggerKind::badnet_white, "badnet_white"},
    {TriggerKind::blend, "blend"},
    {TriggerKind::sig, "sig"},
    {TriggerKind::smooth, "smooth"},
    {TriggerKind::l2_invisible, "l2_invisible"},
    {TriggerKind::l0_invisible, "l0_invisible"},
    {TriggerKind::trojan_sq, "trojan_sq"},
    {TriggerKind::trojan_wm, "trojan_wm"},
}};

std::size_t default_patch(TriggerKind k) {
    switch (k) {
        case TriggerKind::badnet_grid:
        case TriggerKind::badnet_white:
            return 3;
        case TriggerKind::trojan_sq:
            return 5;
        default:
            return 0;
    }
}

double default_blend(TriggerKind k) {
    return k == TriggerKind::trojan_wm ? 0.3 : 0.2;
}

struct Canvas {
    std::size_t c, h, w;
    float& at(FTensor& t, std::size_t ch, std::size_t i, std::size_t j) const { return t[(ch * h + i) * w + j]; }
};

// Fills a corner patch of size s anchored `margin` pixels from the bottom-right.
template <typename F>
void corner_patch(const Canvas& cv, std::size_t s, std::size_t margin, TriggerField& f, F value) {
    if (s + margin > cv.h || s + margin > cv.w) {
        throw std::invalid_argument("trigger: patch of " + std::to_string(s) + " with margin " +
                                    std::to_string(margin) + " does not fit a " + std::to_string(cv.h) + "x" +
                                    std::to_string(cv.w) + " image");
    }
    const std::size_t top = cv.h - margin - s, left = cv.w - margin - s;
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            f.mask[(top + i) * cv.w + left + j] = 1.0f;
            for (std::size_t ch = 0; ch < cv.c; ++ch) cv.at(f.pattern, ch, top + i, left + j) = value(ch, i, j);
        }
}

void stamp(FTensor& glyph, std::size_t h, std::size_t w, double y, double x) {
    const auto i = static_cast<long>(std::lround(y)), j = static_cast<long>(std::lround(x));
    if (i >= 0 && j >= 0 && i < static_cast<long>(h) && j < static_cast<long>(w)) {
        glyph[static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)] = 1.0f;
    }
}

// Seeded watermark glyph: a ring plus two strokes, 1-pixel lines.
FTensor procedural_glyph(std::size_t h, std::size_t w, Rng& rng) {
    FTensor glyph({h, w});
    const double cy = h / 2.0 + rng.uniform(-1.5, 1.5), cx = w / 2.0 + rng.uniform(-1.5, 1.5);
    const double r = static_cast<double>(std::min(h, w)) * rng.uniform(0.2, 0.3);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double d = std::hypot(i + 0.5 - cy, j + 0.5 - cx);
            if (std::abs(d - r) < 0.75) glyph[i * w + j] = 1.0f;
        }
    for (int stroke = 0; stroke < 2; ++stroke) {
        const double y0 = rng.uniform(0, h - 1.0), x0 = rng.uniform(0, w - 1.0);
        const double y1 = rng.uniform(0, h - 1.0), x1 = rng.uniform(0, w - 1.0);
        const int steps = static_cast<int>(2 * std::max(h, w));
        for (int s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / steps;
            stamp(glyph, h, w, y0 + t * (y1 - y0), x0 + t * (x1 - x0));
        }
    }
    return glyph;
}

FTensor resize_nearest(const FTensor& src, std::size_t h, std::size_t w) {
    const auto sh = src.dim(0), sw = src.dim(1);
    FTensor out({h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = src[(i * sh / h) * sw + j * sw / w];
    return out;
}

}  // namespace

std::string_view to_string(TriggerKind k) {
    for (const auto& [kind, name] : kKindNames)
        if (kind == k) return name;
    return "unknown";
}

TriggerKind parse_trigger_kind(std::string_view name) {
    for (const auto& [kind, n] : kKindNames)
        if (n == name) return kind;
    throw std::invalid_argument("unsupported trigger kind '" + std::string(name) + "'");
}

const std::vector<TriggerKind>& all_trigger_kinds() {
    static const std::vector<TriggerKind> kinds = [] {
        std::vector<TriggerKind> out;
        for (const auto& [k, n] : kKindNames) out.push_back(k);
        return out;
    }();
    return kinds;
}

void TriggerSpec::validate() const {
    if (blend_ratio != 0.0 && !(blend_ratio > 0.0 && blend_ratio < 1.0)) {
        throw std::invalid_argument("trigger: blend ratio must lie in (0,1)");
    }
    if (!(amplitude > 0.0 && amplitude < 1.0)) throw std::invalid_argument("trigger: amplitude must lie in (0,1)");
    if (!(frequency > 0.0)) throw std::invalid_argument("trigger: frequency must be positive");
    if (l2_budget < 0.0) throw std::invalid_argument("trigger: l2 budget must be non-negative");
    if (kind == TriggerKind::l0_invisible && l0_pixels == 0) {
        throw std::invalid_argument("trigger: l0_invisible needs at least one pixel");
    }
}

void to_json(nlohmann::json& j, const TriggerSpec& s) {
    j = nlohmann::json{{"kind", std::string(to_string(s.kind))},
                       {"patch_size", s.patch_size},
                       {"margin", s.margin},
                       {"blend_ratio", s.blend_ratio},
                       {"amplitude", s.amplitude},
                       {"frequency", s.frequency},
                       {"l2_budget", s.l2_budget},
                       {"l0_pixels", s.l0_pixels},
                       {"watermark_path", s.watermark_path},
                       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, TriggerSpec& s) {
    TriggerSpec d;
    s.kind = parse_trigger_kind(j.at("kind").get<std::string>());
    s.patch_size = j.value("patch_size", d.patch_size);
    s.margin = j.value("margin", d.margin);
    s.blend_ratio = j.value("blend_ratio", d.blend_ratio);
    s.amplitude = j.value("amplitude", d.amplitude);
    s.frequency = j.value("frequency", d.frequency);
    s.l2_budget = j.value("l2_budget", d.l2_budget);
    s.l0_pixels = j.value("l0_pixels", d.l0_pixels);
    s.watermark_path = j.value("watermark_path", d.watermark_path);
    s.seed = j.value("seed", d.seed);
}

// ---- rendering --------------------------------------------------------------

TriggerField render_trigger(const TriggerSpec& spec, const Shape& image_shape) {
    spec.validate();
    if (image_shape.size() != 3) {
        throw ShapeError("render_trigger: image shape must be [C,H,W], got " + shape_str(image_shape));
    }
    const Canvas cv{image_shape[0], image_shape[1], image_shape[2]};
    TriggerField f;
    f.pattern = FTensor({cv.c, cv.h, cv.w});
    f.mask = FTensor({cv.h, cv.w});
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(spec.kind)));
    const std::size_t s = spec.patch_size ? spec.patch_size : default_patch(spec.kind);
    const double beta = spec.blend_ratio > 0.0 ? spec.blend_ratio : default_blend(spec.kind);

    switch (spec.kind) {
        case TriggerKind::badnet_grid:
            f.mode = TriggerMode::overwrite;
            corner_patch(cv, s, spec.margin, f,
                         [](std::size_t, std::size_t i, std::size_t j) { return (i + j) % 2 == 0 ? 1.0f : 0.0f; });
            break;
        case TriggerKind::badnet_white:
            f.mode = TriggerMode::overwrite;
            corner_patch(cv, s, spec.margin, f, [](std::size_t, std::size_t, std::size_t) { return 1.0f; });
            break;
        case TriggerKind::trojan_sq:
            f.mode = TriggerMode::overwrite;
            corner_patch(cv, s, spec.margin, f,
                         [&rng](std::size_t, std::size_t, std::size_t) { return static_cast<float>(rng.uniform()); });
            break;
        case TriggerKind::trojan_wm: {
            f.mode = TriggerMode::blend;
            f.blend_ratio = beta;
            FTensor glyph = spec.watermark_path.empty()
                                ? procedural_glyph(cv.h, cv.w, rng)
                                : resize_nearest(read_pgm(spec.watermark_path), cv.h, cv.w);
            for (std::size_t p = 0; p < cv.h * cv.w; ++p) {
                f.mask[p] = glyph[p] > 0.0f ? 1.0f : 0.0f;
                for (std::size_t ch = 0; ch < cv.c; ++ch) f.pattern[ch * cv.h * cv.w + p] = glyph[p];
            }
            break;
        }
        case TriggerKind::blend:
            f.mode = TriggerMode::blend;
            f.blend_ratio = beta;
            for (auto& v : f.pattern.data()) v = static_cast<float>(rng.uniform());
            for (auto& v : f.mask.data()) v = 1.0f;
            break;
        case TriggerKind::sig:
            f.mode = TriggerMode::additive;
            for (std::size_t ch = 0; ch < cv.c; ++ch)
                for (std::size_t i = 0; i < cv.h; ++i)
                    for (std::size_t j = 0; j < cv.w; ++j) {
                        cv.at(f.pattern, ch, i, j) = static_cast<float>(
                            spec.amplitude *
                            std::sin(2.0 * std::numbers::pi * static_cast<double>(j) * spec.frequency /
                                     static_cast<double>(cv.w)));
                    }
            for (auto& v : f.mask.data()) v = 1.0f;
            break;
        case TriggerKind::smooth: {
            f.mode = TriggerMode::additive;
            // Lowest non-constant DCT-II frequencies ordered by u+v, then u.
            constexpr std::array<std::pair<int, int>, 4> freqs{{{0, 1}, {1, 0}, {0, 2}, {1, 1}}};
            double peak = 0.0;
            std::vector<double> field(cv.c * cv.h * cv.w, 0.0);
            for (std::size_t ch = 0; ch < cv.c; ++ch) {
                std::array<double, 4> coef{};
                for (auto& cf : coef) cf = rng.normal();
                for (std::size_t i = 0; i < cv.h; ++i)
                    for (std::size_t j = 0; j < cv.w; ++j) {
                        double v = 0.0;
                        for (std::size_t q = 0; q < freqs.size(); ++q) {
                            const auto [u, w] = freqs[q];
                            v += coef[q] * std::cos(std::numbers::pi * u * (i + 0.5) / static_cast<double>(cv.h)) *
                                 std::cos(std::numbers::pi * w * (j + 0.5) / static_cast<double>(cv.w));
                        }
                        field[(ch * cv.h + i) * cv.w + j] = v;
                        peak = std::max(peak, std::abs(v));
                    }
            }
            for (std::size_t p = 0; p < field.size(); ++p) {
                f.pattern[p] = static_cast<float>(peak > 0.0 ? spec.amplitude * field[p] / peak : 0.0);
            }
            for (auto& v : f.mask.data()) v = 1.0f;
            break;
        }
        case TriggerKind::l2_invisible: {
            f.mode = TriggerMode::additive;
            const double budget = spec.l2_budget > 0.0 ? spec.l2_budget : (cv.c == 1 ? 1.5 : 2.0);
            std::vector<double> field(f.pattern.numel());
            double sq = 0.0;
            for (auto& v : field) {
                v = rng.normal();
                sq += v * v;
            }
            const double k = budget / std::sqrt(sq);
            for (std::size_t p = 0; p < field.size(); ++p) f.pattern[p] = static_cast<float>(field[p] * k);
            for (auto& v : f.mask.data()) v = 1.0f;
            break;
        }
        case TriggerKind::l0_invisible: {
            f.mode = TriggerMode::overwrite;
            if (spec.l0_pixels > cv.h * cv.w) throw std::invalid_argument("trigger: more l0 pixels than the image has");
            std::vector<std::size_t> pos(cv.h * cv.w);
            for (std::size_t p = 0; p < pos.size(); ++p) pos[p] = p;
            rng.shuffle(std::span(pos));
            for (std::size_t q = 0; q < spec.l0_pixels; ++q) {
                f.mask[pos[q]] = 1.0f;
                bool any = false;
                for (std::size_t ch = 0; ch < cv.c; ++ch) {
                    const bool on = rng.bernoulli(0.5);
                    any = any || on;
                    f.pattern[ch * cv.h * cv.w + pos[q]] = on ? 1.0f : 0.0f;
                }
                if (!any) {
                    for (std::size_t ch = 0; ch < cv.c; ++ch) f.pattern[ch * cv.h * cv.w + pos[q]] = 1.0f;
                }
            }
            break;
        }
    }
    return f;
}

void apply_trigger(std::span<const float> image, const TriggerField& t, std::span<float> out) {
    const auto plane = t.mask.numel();
    if (image.size() != t.pattern.numel() || out.size() != image.size()) {
        throw ShapeError("apply_trigger: image of " + std::to_string(image.size()) + " values vs trigger " +
                         shape_str(t.pattern.shape()));
    }
    const float beta = static_cast<float>(t.blend_ratio);
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float m = t.mask[i % plane];
        const float x = image[i];
        const float p = t.pattern[i];
        float v = x;
        switch (t.mode) {
            case TriggerMode::overwrite:
                v = m == 1.0f ? p : (1.0f - m) * x + m * p;
                break;
            case TriggerMode::additive:
                v = x + m * p;
                break;
            case TriggerMode::blend:
                v = (1.0f - beta * m) * x + beta * m * p;
                break;
        }
        out[i] = std::clamp(v, 0.0f, 1.0f);
    }
}

FTensor apply_trigger(const FTensor& image, const TriggerField& t) {
    FTensor out(image.shape());
    apply_trigger(image.data(), t, out.data());
    return out;
}

FTensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("watermark asset missing: " + path.string());
    auto token = [&in]() {
        std::string tok;
        char ch;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string skip;
                std::getline(in, skip);
            } else if (!std::isspace(static_cast<unsigned char>(ch))) {
                tok.push_back(ch);
                break;
            }
        }
        while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok.push_back(ch);
        return tok;
    };
    if (token() != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
    const std::size_t w = std::stoul(token()), h = std::stoul(token());
    const unsigned maxval = static_cast<unsigned>(std::stoul(token()));
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw std::runtime_error(path.string() + ": bad PGM header");
    const std::size_t bpp = maxval < 256 ? 1 : 2;
    std::string raw(w * h * bpp, '\0');
    if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
        throw std::runtime_error(path.string() + ": truncated PGM payload");
    }
    FTensor img({h, w});
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
    for (std::size_t i = 0; i < w * h; ++i) {
        const unsigned v = bpp == 1 ? p[i] : (unsigned{p[2 * i]} << 8) | p[2 * i + 1];
        img[i] = static_cast<float>(std::min(v, maxval)) / static_cast<float>(maxval);
    }
    return img;
}

// ---- poisoning --------------------------------------------------------------

std::string_view to_string(PoisonPolicy p) {
    return p == PoisonPolicy::dirty_label ? "dirty_label" : "clean_label";
}

PoisonPolicy parse_poison_policy(std::string_view name) {
    if (name == "dirty_label") return PoisonPolicy::dirty_label;
    if (name == "clean_label") return PoisonPolicy::clean_label;
    throw std::invalid_argument("unknown poison policy '" + std::string(name) + "'");
}

void to_json(nlohmann::json& j, const PoisonPlan& p) {
    j = nlohmann::json{{"policy", std::string(to_string(p.policy))},
                       {"target", p.target},
                       {"alpha", p.alpha},
                       {"seed", p.seed},
                       {"trigger", p.trigger},
                       {"indices", p.indices},
                       {"original_labels", p.original_labels},
                       {"requested", p.requested},
                       {"truncated", p.truncated}};
}

void from_json(const nlohmann::json& j, PoisonPlan& p) {
    p.policy = parse_poison_policy(j.at("policy").get<std::string>());
    p.target = j.at("target").get<int>();
    p.alpha = j.at("alpha").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.trigger = j.at("trigger").get<TriggerSpec>();
    p.indices = j.at("indices").get<std::vector<std::size_t>>();
    p.original_labels = j.at("original_labels").get<std::vector<int>>();
    p.requested = j.at("requested").get<std::size_t>();
    p.truncated = j.at("truncated").get<bool>();
}

std::pair<Dataset, PoisonPlan> poison_train_set(const Dataset& d, const TriggerSpec& spec, PoisonPolicy policy,
                                                int target, double alpha, std::uint64_t seed) {
    if (target < 0 || static_cast<std::size_t>(target) >= d.num_classes) {
        throw std::invalid_argument("poison: target class " + std::to_string(target) + " outside [0," +
                                    std::to_string(d.num_classes) + ")");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("poison: alpha must lie in [0,1]");

    PoisonPlan plan;
    plan.policy = policy;
    plan.target = target;
    plan.alpha = alpha;
    plan.seed = seed;
    plan.trigger = spec;
    plan.requested = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(d.size())));

    Dataset out = d.clone();
    if (plan.requested == 0) return {std::move(out), std::move(plan)};

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const bool is_target = d.labels[i] == target;
        if (policy == PoisonPolicy::dirty_label ? !is_target : is_target) candidates.push_back(i);
    }
    std::size_t count = plan.requested;
    if (count > candidates.size()) {
        if (policy == PoisonPolicy::dirty_label) {
            throw std::invalid_argument("poison: " + std::to_string(count) + " dirty-label samples requested but only " +
                                        std::to_string(candidates.size()) + " non-target samples exist");
        }
        std::clog << "warning: clean-label poisoning truncated from " << count << " to " << candidates.size()
                  << " samples (target class size)\n";
        count = candidates.size();
        plan.truncated = true;
    }

    Rng rng(mix_seed(seed, 0x9015011));
    rng.shuffle(std::span(candidates));
    plan.indices.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(plan.indices.begin(), plan.indices.end());

    const auto field = render_trigger(spec, d.image_shape());
    std::vector<float> tmp(d.image_numel());
    for (auto i : plan.indices) {
        plan.original_labels.push_back(d.labels[i]);
        apply_trigger(d.image(i), field, tmp);
        std::copy(tmp.begin(), tmp.end(), out.image(i).begin());
        if (policy == PoisonPolicy::dirty_label) out.labels[i] = target;
    }
    return {std::move(out), std::move(plan)};
}

Dataset build_backdoor_test_set(const Dataset& clean_test, const TriggerSpec& spec, int target) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < clean_test.size(); ++i)
        if (clean_test.labels[i] != target) keep.push_back(i);
    Dataset out = clean_test.subset(keep);
    out.name = clean_test.name + "/backdoor-" + std::string(to_string(spec.kind));
    const auto field = render_trigger(spec, clean_test.image_shape());
    std::vector<float> tmp(out.image_numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        apply_trigger(out.image(i), field, tmp);
        std::copy(tmp.begin(), tmp.end(), out.image(i).begin());
    }
    return out;
}

}  // namespace tnr
