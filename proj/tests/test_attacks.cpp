#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "test_util.hpp"
#include "tnr/attacks.hpp"
#include "tnr/rng.hpp"

using namespace tnr;
namespace fs = std::filesystem;
using tnr::test::TempDir;

namespace {

TriggerSpec spec_of(TriggerKind k, std::uint64_t seed = 5) {
    TriggerSpec s;
    s.kind = k;
    s.seed = seed;
    return s;
}

std::size_t support(const TriggerField& t) {
    return static_cast<std::size_t>(std::count_if(t.mask.data().begin(), t.mask.data().end(), [](float v) { return v > 0; }));
}

// n samples, labels i % 10, pixels seeded uniform
Dataset balanced(std::size_t n, Shape img = {1, 8, 8}, std::uint64_t seed = 1) {
    Dataset d;
    d.images = FTensor({n, img[0], img[1], img[2]});
    Rng rng(seed);
    for (auto& v : d.images.data()) v = static_cast<float>(rng.uniform());
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % 10);
    return d;
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_SUITE("attacks") {

TEST_CASE("names round trip") {
    for (auto k : all_trigger_kinds()) CHECK(parse_trigger_kind(to_string(k)) == k);
    CHECK(all_trigger_kinds().size() == 9);
    CHECK_THROWS_AS(parse_trigger_kind("lcba"), std::invalid_argument);
    CHECK(parse_poison_policy("clean_label") == PoisonPolicy::clean_label);
    CHECK_THROWS_AS(parse_poison_policy("all_to_all"), std::invalid_argument);
}

TEST_CASE("badnet white patch") {
    const auto t = render_trigger(spec_of(TriggerKind::badnet_white), {1, 28, 28});
    CHECK(t.mode == TriggerMode::overwrite);
    CHECK(support(t) == 9);
    for (std::size_t i = 0; i < t.mask.numel(); ++i)
        if (t.mask[i] > 0) CHECK(t.pattern[i] == 1.0f);

    FTensor black({1, 28, 28}, 0.0f);
    const auto out = apply_trigger(black, t);
    CHECK(std::count(out.data().begin(), out.data().end(), 1.0f) == 9);
    CHECK(std::count(out.data().begin(), out.data().end(), 0.0f) == 28 * 28 - 9);
    // bottom-right corner
    const auto i = [](std::size_t h, std::size_t w) { return h * 28 + w; };
    CHECK(out[i(0, 0)] == 0.0f);
    float corner_sum = 0;
    for (std::size_t h = 20; h < 28; ++h)
        for (std::size_t w = 20; w < 28; ++w) corner_sum += out[i(h, w)];
    CHECK(corner_sum == 9.0f);
}

TEST_CASE("badnet grid is a checkerboard") {
    const auto t = render_trigger(spec_of(TriggerKind::badnet_grid), {3, 16, 16});
    CHECK(support(t) == 9);
    std::vector<float> vals;
    for (std::size_t h = 0; h < 16; ++h)
        for (std::size_t w = 0; w < 16; ++w)
            if (t.mask[h * 16 + w] > 0) vals.push_back(t.pattern[h * 16 + w]);
    REQUIRE(vals.size() == 9);
    for (std::size_t j = 0; j < 9; ++j) CHECK(vals[j] == ((j / 3 + j % 3) % 2 == 0 ? 1.0f : 0.0f));
    // same in every channel
    for (std::size_t c = 1; c < 3; ++c)
        for (std::size_t p = 0; p < 256; ++p) CHECK(t.pattern[c * 256 + p] == t.pattern[p]);
}

TEST_CASE("sig rows and amplitude") {
    auto s = spec_of(TriggerKind::sig);
    for (std::size_t w : {16u, 28u}) {
        const auto t = render_trigger(s, {3, 8, w});
        CHECK(t.mode == TriggerMode::additive);
        float peak = 0;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t h = 0; h < 8; ++h)
                for (std::size_t x = 0; x < w; ++x) {
                    const float v = t.pattern[(c * 8 + h) * w + x];
                    CHECK(v == t.pattern[x]);
                    peak = std::max(peak, std::abs(v));
                }
        CHECK(peak <= static_cast<float>(20.0 / 255.0) + 1e-7f);
        CHECK(peak >= static_cast<float>(0.97 * 20.0 / 255.0));
    }
    // W = 16, f = 6 hits the crest exactly
    const auto t16 = render_trigger(s, {1, 4, 16});
    CHECK(t16.pattern[6] == doctest::Approx(20.0 / 255.0).epsilon(1e-6));
    CHECK(t16.pattern[1] == doctest::Approx(20.0 / 255.0 * std::sin(2 * std::numbers::pi * 6.0 / 16.0)).epsilon(1e-6));
}

TEST_CASE("l2 invisible norm") {
    for (auto shape : {Shape{1, 28, 28}, Shape{3, 32, 32}}) {
        const auto t = render_trigger(spec_of(TriggerKind::l2_invisible), shape);
        double sq = 0;
        for (float v : t.pattern.data()) sq += static_cast<double>(v) * v;
        CHECK(std::sqrt(sq) == doctest::Approx(shape[0] == 1 ? 1.5 : 2.0).epsilon(1e-5));
    }
    auto s = spec_of(TriggerKind::l2_invisible);
    s.l2_budget = 0.75;
    const auto t = render_trigger(s, {1, 16, 16});
    double sq = 0;
    for (float v : t.pattern.data()) sq += static_cast<double>(v) * v;
    CHECK(std::sqrt(sq) == doctest::Approx(0.75).epsilon(1e-5));
}

TEST_CASE("smooth, l0, trojan and blend renderings") {
    const auto sm = render_trigger(spec_of(TriggerKind::smooth), {1, 16, 16});
    float peak = 0;
    for (float v : sm.pattern.data()) peak = std::max(peak, std::abs(v));
    CHECK(peak == doctest::Approx(20.0 / 255.0).epsilon(1e-5));

    const auto l0 = render_trigger(spec_of(TriggerKind::l0_invisible), {3, 16, 16});
    CHECK(l0.mode == TriggerMode::overwrite);
    CHECK(support(l0) == 8);

    const auto sq = render_trigger(spec_of(TriggerKind::trojan_sq), {1, 16, 16});
    CHECK(support(sq) == 25);

    const auto bl = render_trigger(spec_of(TriggerKind::blend), {1, 16, 16});
    CHECK(bl.mode == TriggerMode::blend);
    CHECK(bl.blend_ratio == doctest::Approx(0.2));
    CHECK(support(bl) == 256);

    const auto wm = render_trigger(spec_of(TriggerKind::trojan_wm), {1, 16, 16});
    CHECK(wm.mode == TriggerMode::blend);
    CHECK(wm.blend_ratio == doctest::Approx(0.3));
    CHECK(support(wm) > 0);
}

TEST_CASE("renderings are pure in the seed") {
    for (auto k : all_trigger_kinds()) {
        const auto a = render_trigger(spec_of(k, 9), {3, 16, 16});
        const auto b = render_trigger(spec_of(k, 9), {3, 16, 16});
        CHECK(same_bits(a.pattern.data(), b.pattern.data()));
        CHECK(same_bits(a.mask.data(), b.mask.data()));
    }
    for (auto k : {TriggerKind::trojan_sq, TriggerKind::blend, TriggerKind::smooth, TriggerKind::l2_invisible,
                   TriggerKind::l0_invisible}) {
        const auto a = render_trigger(spec_of(k, 1), {1, 16, 16});
        const auto b = render_trigger(spec_of(k, 2), {1, 16, 16});
        CHECK_FALSE(same_bits(a.pattern.data(), b.pattern.data()));
    }
}

TEST_CASE("blend of white on black") {
    TriggerField t;
    t.mode = TriggerMode::blend;
    t.blend_ratio = 0.2;
    t.pattern = FTensor({1, 4, 4}, 1.0f);
    t.mask = FTensor({4, 4}, 1.0f);
    const auto out = apply_trigger(FTensor({1, 4, 4}, 0.0f), t);
    for (float v : out.data()) CHECK(v == doctest::Approx(0.2));
}

TEST_CASE("overwrite is idempotent and pixels stay in range") {
    Rng rng(4);
    for (auto k : all_trigger_kinds()) {
        const auto t = render_trigger(spec_of(k), {3, 16, 16});
        for (int trial = 0; trial < 5; ++trial) {
            FTensor x({3, 16, 16});
            for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
            const auto once = apply_trigger(x, t);
            for (float v : once.data()) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
            if (t.mode == TriggerMode::overwrite) CHECK(same_bits(once.data(), apply_trigger(once, t).data()));
        }
    }
}

TEST_CASE("apply rejects mismatched shapes") {
    const auto t = render_trigger(spec_of(TriggerKind::badnet_grid), {1, 16, 16});
    CHECK_THROWS_AS(apply_trigger(FTensor({1, 8, 8}), t), ShapeError);
}

TEST_CASE("spec validation") {
    auto s = spec_of(TriggerKind::blend);
    s.blend_ratio = 1.5;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = spec_of(TriggerKind::sig);
    s.amplitude = 1.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s.amplitude = 0.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = spec_of(TriggerKind::badnet_white);
    s.patch_size = 40;
    CHECK_THROWS(render_trigger(s, {1, 16, 16}));
}

TEST_CASE("watermark asset") {
    TempDir dir("attacks");
    const auto pgm = dir.path / "mark.pgm";
    {
        std::ofstream f(pgm, std::ios::binary);
        f << "P5\n# mark\n4 4\n255\n";
        for (int i = 0; i < 16; ++i) f.put(static_cast<char>(i % 5 == 0 ? 255 : 0));
    }
    const auto img = read_pgm(pgm);
    CHECK(img.numel() == 16);
    CHECK(img[0] == 1.0f);
    CHECK(img[1] == 0.0f);

    auto s = spec_of(TriggerKind::trojan_wm);
    s.watermark_path = pgm.string();
    const auto t = render_trigger(s, {1, 8, 8});
    CHECK(support(t) == 4 * 4);  // 4 lit source pixels, each upsampled 2x2

    s.watermark_path = (dir.path / "missing.pgm").string();
    CHECK_THROWS(render_trigger(s, {1, 8, 8}));
}

TEST_CASE("dirty-label poisoning counts") {
    const auto d = balanced(100);
    auto [p, plan] = poison_train_set(d, spec_of(TriggerKind::badnet_grid), PoisonPolicy::dirty_label, 0, 0.1, 3);
    CHECK(plan.indices.size() == 10);
    CHECK(plan.requested == 10);
    CHECK(std::is_sorted(plan.indices.begin(), plan.indices.end()));
    for (std::size_t j = 0; j < plan.indices.size(); ++j) {
        CHECK(plan.original_labels[j] != 0);
        CHECK(plan.original_labels[j] == d.labels[plan.indices[j]]);
        CHECK(p.labels[plan.indices[j]] == 0);
    }
    CHECK(p.class_counts()[0] == d.class_counts()[0] + 10);

    std::vector<bool> hit(d.size());
    for (auto i : plan.indices) hit[i] = true;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (hit[i]) continue;
        CHECK(p.labels[i] == d.labels[i]);
        CHECK(same_bits(p.image(i), d.image(i)));
    }

    for (double a : {0.05, 0.13, 0.37}) {
        const auto big = balanced(230);
        auto [q, pl] = poison_train_set(big, spec_of(TriggerKind::blend), PoisonPolicy::dirty_label, 3, a, 8);
        CHECK(pl.indices.size() == static_cast<std::size_t>(std::floor(a * 230)));
        for (auto l : pl.original_labels) CHECK(l != 3);
    }
}

TEST_CASE("alpha zero is the identity") {
    const auto d = balanced(50);
    auto [p, plan] = poison_train_set(d, spec_of(TriggerKind::badnet_grid), PoisonPolicy::dirty_label, 0, 0.0, 1);
    CHECK(plan.indices.empty());
    CHECK(p.labels == d.labels);
    CHECK(same_bits(p.images.data(), d.images.data()));
}

TEST_CASE("clean-label poisoning") {
    const auto d = balanced(100);
    auto [p, plan] = poison_train_set(d, spec_of(TriggerKind::sig), PoisonPolicy::clean_label, 0, 0.1, 3);
    CHECK(plan.indices.size() <= 10);
    CHECK_FALSE(plan.indices.empty());
    for (auto i : plan.indices) {
        CHECK(d.labels[i] == 0);
        CHECK(p.labels[i] == 0);
    }
    CHECK(p.labels == d.labels);

    // only 10 class-0 samples for 20 requested
    auto [q, trunc] = poison_train_set(d, spec_of(TriggerKind::sig), PoisonPolicy::clean_label, 0, 0.2, 3);
    CHECK(trunc.requested == 20);
    CHECK(trunc.indices.size() == 10);
    CHECK(trunc.truncated);
}

TEST_CASE("poisoning is deterministic and validated") {
    const auto d = balanced(100);
    auto [a, pa] = poison_train_set(d, spec_of(TriggerKind::trojan_sq), PoisonPolicy::dirty_label, 2, 0.2, 11);
    auto [b, pb] = poison_train_set(d, spec_of(TriggerKind::trojan_sq), PoisonPolicy::dirty_label, 2, 0.2, 11);
    CHECK(pa.indices == pb.indices);
    CHECK(same_bits(a.images.data(), b.images.data()));
    CHECK_THROWS_AS(poison_train_set(d, spec_of(TriggerKind::sig), PoisonPolicy::dirty_label, 10, 0.1, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(poison_train_set(d, spec_of(TriggerKind::sig), PoisonPolicy::dirty_label, 0, 1.5, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(poison_train_set(d, spec_of(TriggerKind::sig), PoisonPolicy::dirty_label, 0, 0.95, 1),
                    std::invalid_argument);
}

TEST_CASE("plan json round trip is byte stable") {
    const auto d = balanced(100);
    auto s = spec_of(TriggerKind::sig);
    s.amplitude = 0.3;
    auto [p, plan] = poison_train_set(d, s, PoisonPolicy::clean_label, 0, 0.1, 3);
    const auto text = nlohmann::json(plan).dump();
    const auto back = nlohmann::json::parse(text).get<PoisonPlan>();
    CHECK(nlohmann::json(back).dump() == text);
    CHECK(back.indices == plan.indices);
    CHECK(back.trigger.amplitude == 0.3);
}

TEST_CASE("backdoor test set") {
    const auto d = balanced(1000);
    const auto spec = spec_of(TriggerKind::badnet_white);
    const auto bd = build_backdoor_test_set(d, spec, 0);
    CHECK(bd.size() == 900);
    const auto t = render_trigger(spec, d.image_shape());
    std::size_t j = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.labels[i] == 0) continue;
        CHECK(bd.labels[j] == d.labels[i]);
        const auto src = d.image(i), got = bd.image(j);
        for (std::size_t p = 0; p < src.size(); ++p)
            if (t.mask[p % t.mask.numel()] == 0.0f) CHECK(got[p] == src[p]);
        ++j;
    }
}

}  // TEST_SUITE
