// Desk-scale acceptance run. Prints one line per criterion; exit status is 0
// only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include <CLI11.hpp>

#include "grad_suite.hpp"
#include "tnr/experiment.hpp"
#include "tnr/optim.hpp"
#include "tnr/runtime.hpp"

using namespace tnr;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char b[64];
    std::snprintf(b, sizeof b, f, v);
    return b;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_params(const std::vector<FTensor>& a, const std::vector<FTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].numel() != b[i].numel() ||
            std::memcmp(a[i].data().data(), b[i].data().data(), a[i].numel() * sizeof(float)) != 0)
            return false;
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

std::string checks_detail(const ReproduceSummary& s) {
    std::string out;
    for (const auto& c : s.checks) {
        if (!out.empty()) out += "; ";
        out += (c.passed ? "ok " : "FAIL ") + c.name + " (" + c.detail + ")";
    }
    return out;
}

class Acceptance {
public:
    Acceptance(ExperimentConfig base, fs::path cache) : base_(std::move(base)), cache_(std::move(cache)) {}

    Runner& shared() {
        if (!runner_) runner_ = std::make_unique<Runner>(base_, cache_);
        return *runner_;
    }

    ExperimentConfig cell(PipelineMode mode, double alpha) const {
        auto c = base_;
        c.mode = mode;
        c.attack.alpha = alpha;
        return c;
    }

    Verdict end_to_end() {
        // no disk cache: every stage is trained here so the timing is real
        const auto t0 = std::chrono::steady_clock::now();
        Runner fresh(base_);
        const auto clean = fresh.run(cell(PipelineMode::no_defense, 0.0)).report;
        const auto nd = fresh.run(cell(PipelineMode::no_defense, base_.attack.alpha)).report;
        const auto full = fresh.run(cell(PipelineMode::full_tnr, base_.attack.alpha)).report;
        const double secs = seconds_since(t0);
        const bool ok = nd.asr >= 90.0 && std::abs(nd.ca - clean.ca) <= 3.0 && full.asr <= 10.0 &&
                        nd.ca - full.ca <= 8.0 && secs <= 1200.0;
        return {ok, "clean CA " + fmt("%.2f", clean.ca) + "; no_defense ASR " + fmt("%.2f", nd.asr) + " CA " +
                        fmt("%.2f", nd.ca) + "; full_tnr ASR " + fmt("%.2f", full.asr) + " CA " +
                        fmt("%.2f", full.ca) + " (drop " + fmt("%.2f", nd.ca - full.ca) + "); " +
                        fmt("%.0f", secs) + " s"};
    }

    Verdict scenario(Scenario s) {
        const auto r = reproduce(shared(), s);
        return {r.all_passed(), checks_detail(r)};
    }

    Verdict reversal() {
        const auto nd = shared().run(cell(PipelineMode::no_defense, base_.attack.alpha)).report;
        const auto full = shared().run(cell(PipelineMode::full_tnr, base_.attack.alpha)).report;
        if (!nd.separation || !full.separation) return {false, "separation missing"};
        return {*nd.separation < 0.5 && *full.separation > 0.5,
                "no_defense " + fmt("%.3f", *nd.separation) + ", full_tnr " + fmt("%.3f", *full.separation) +
                    " (source " + std::to_string(base_.source_class()) + ", target " +
                    std::to_string(base_.attack.target) + ")"};
    }

    Verdict freeze() {
        const auto out = shared().run(cell(PipelineMode::full_tnr, base_.attack.alpha));
        const bool stem = same_params(out.stage1_model.stem_params(), out.result.model.stem_params());
        const bool recon = same_params(out.stage1_model.recon_params(), out.result.model.recon_params());
        const auto& t = out.result.stage1;
        double worst_rel = 0.0, worst_abs = 0.0;
        for (std::size_t i = 0; i < t.step_total.size(); ++i) {
            const double diff = std::abs(t.step_clf[i] + t.lambda1 * t.step_rec[i] - t.step_total[i]);
            worst_abs = std::max(worst_abs, diff);
            worst_rel = std::max(worst_rel, diff / std::max(1.0, std::abs(t.step_total[i])));
        }
        const bool steps = !t.step_total.empty() && t.step_rec.size() == t.step_total.size();
        return {stem && recon && steps && worst_rel <= 1e-6,
                std::string("stem ") + (stem ? "unchanged" : "CHANGED") + ", decoder " +
                    (recon ? "unchanged" : "CHANGED") + "; recomposition over " +
                    std::to_string(t.step_total.size()) + " steps, max rel err " + fmt("%.2e", worst_rel) +
                    " (abs " + fmt("%.2e", worst_abs) + ")"};
    }

private:
    ExperimentConfig base_;
    fs::path cache_;
    std::unique_ptr<Runner> runner_;
};

Verdict gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = test::grad_suite(24);
    const double secs = seconds_since(t0);
    double worst = 0.0;
    std::string worst_op;
    int min_shapes = 1 << 30;
    for (const auto& [op, r] : results) {
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_op = op;
        }
        min_shapes = std::min(min_shapes, r.shapes);
    }
    return {worst <= 1e-4 && min_shapes >= 20 && secs <= 120.0,
            std::to_string(results.size()) + " ops, >= " + std::to_string(min_shapes) + " shapes each, max rel err " +
                fmt("%.2e", worst) + " (" + worst_op + "), " + fmt("%.1f", secs) + " s"};
}

Verdict exact_values(const ExperimentConfig& base) {
    std::vector<std::string> bad;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) bad.push_back(what);
    };

    expect(total_variation(Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1})).item() == 2.0, "tv");
    for (std::size_t k : {2, 10, 100})
        for (double eps : {0.0, 0.1, 0.5, 0.9}) {
            std::vector<int> labels{0, static_cast<int>(k - 1)};
            const double ce = softmax_cross_entropy(Tensor<float>({2, k}, 0.7f), labels, eps).item();
            expect(std::abs(ce - std::log(static_cast<double>(k))) <= 1e-6, "ce K=" + std::to_string(k));
        }
    expect(std::abs(cosine_lr(50, 100, 0.1) - 0.05) <= 1e-15, "cosine midpoint");
    for (double g : {1e-3, 0.5, 7.0, -40.0}) {
        Tensor<double> p({1}, 1.0);
        std::vector<Tensor<double>> ps{p};
        AdamState<double> st;
        st.hyper = {1e-3, 0.9, 0.999, 1e-8, 0.0};
        p.grad()[0] = g;
        adam_step(ps, st);
        expect(std::abs(std::abs(p[0] - 1.0) - 1e-3) <= 1e-6, "adam step g=" + fmt("%g", g));
    }

    const auto data = load_experiment_data(base);
    for (double alpha : {0.05, 0.1, 0.2}) {
        const auto [poisoned, plan] =
            poison_train_set(data.train, base.attack.trigger, PoisonPolicy::dirty_label, base.attack.target, alpha, 9);
        const auto want = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(data.train.size())));
        std::size_t target_members = 0;
        for (int y : plan.original_labels) target_members += y == base.attack.target;
        expect(plan.indices.size() == want && target_members == 0, "poison count alpha=" + fmt("%.2f", alpha));
    }
    return {bad.empty(), bad.empty() ? "tv, cross entropy (3 K x 4 smoothing), cosine, adam (4 grads), poison counts "
                                       "(3 alphas)"
                                     : "failed: " + [&] {
                                           std::string s;
                                           for (const auto& b : bad) s += b + " ";
                                           return s;
                                       }()};
}

Verdict determinism(const fs::path& scratch) {
    const fs::path config = fs::path(TNR_CONFIG_DIR) / "smoke.json";
    auto run = [&](const fs::path& out) {
        fs::remove_all(out);
        const std::string cmd = std::string("\"") + TNR_CLI + "\" run --config \"" + config.string() + "\" --out \"" +
                                out.string() + "\" >/dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) && WEXITSTATUS(status) == 0;
    };
    const auto a = scratch / "det_a", b = scratch / "det_b";
    if (!run(a) || !run(b)) return {false, "tnr run failed"};
    std::string diffs;
    for (const char* f : {"stage1.tnrc", "model.tnrc", "report.json"})
        if (slurp(a / f) != slurp(b / f)) diffs += std::string(f) + " ";
    return {diffs.empty(), diffs.empty() ? "stage1.tnrc, model.tnrc and report.json byte-identical over 2 runs"
                                         : "differs: " + diffs};
}

}  // namespace

int main(int argc, char** argv) {
    tune_runtime();
    CLI::App app{"desk-scale acceptance run"};
    std::string config = (fs::path(TNR_CONFIG_DIR) / "desk_badnet.json").string();
    std::string cache = (fs::temp_directory_path() / "tnr_acceptance_cache").string();
    std::vector<int> only;
    app.add_option("--config", config, "experiment config");
    app.add_option("--cache", cache, "stage-1 checkpoint cache, shared between invocations");
    app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    const std::set<int> wanted = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                              : std::set<int>(only.begin(), only.end());
    const auto base = load_config(config);
    fs::create_directories(cache);
    Acceptance acc(base, cache);

    const std::map<int, std::pair<std::string, std::function<Verdict()>>> criteria{
        {1, {"end-to-end BadNet-Grid", [&] { return acc.end_to_end(); }}},
        {2, {"ablation ordering", [&] { return acc.scenario(Scenario::table3); }}},
        {3, {"lambda1 monotonicity", [&] { return acc.scenario(Scenario::table8); }}},
        {4, {"poison-rate robustness", [&] { return acc.scenario(Scenario::table5); }}},
        {5, {"clean-data accuracy", [&] { return acc.scenario(Scenario::clean); }}},
        {6, {"feature-space reversal", [&] { return acc.reversal(); }}},
        {7, {"gradient suite", [] { return gradients(); }}},
        {8, {"exact unit values", [&] { return exact_values(base); }}},
        {9, {"determinism", [&] { return determinism(cache); }}},
        {10, {"stage-2 freeze and loss recomposition", [&] { return acc.freeze(); }}},
    };

    bool all = true;
    for (int n : wanted) {
        const auto& [name, fn] = criteria.at(n);
        Verdict v;
        try {
            v = fn();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        all = all && v.pass;
        std::cout << "criterion " << n << " [" << (v.pass ? "PASS" : "FAIL") << "] " << name << ": " << v.detail
                  << std::endl;
    }
    return all ? 0 : 1;
}
