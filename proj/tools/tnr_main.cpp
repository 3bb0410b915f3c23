#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tnr/experiment.hpp"
#include "tnr/runtime.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFailed = 2;

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->required();
    cmd->add_option("--out", c.out, "output directory (default: output_dir from the config)");
    cmd->add_option("--seed", c.seed, "replaces the config's top-level seed");
}

fs::path out_dir(const Common& c, const tnr::ExperimentConfig& cfg) {
    if (!c.out.empty()) return c.out;
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    throw tnr::ConfigError("no output directory: pass --out or set output_dir in the config");
}

void print_report(const tnr::RunReport& r) {
    std::cout << tnr::kResultsHeader << "\n" << tnr::results_row(r) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    tnr::tune_runtime();

    CLI::App app{"Trap-and-replace backdoor defense: poison, train, evaluate, reproduce"};
    app.require_subcommand(1);

    Common poison_opts, run_opts, eval_opts, pca_opts, repro_opts;
    std::string eval_ckpt, pca_ckpt, scenario;
    bool eval_mse = false;

    auto* poison = app.add_subcommand("poison", "write a poisoned training split and its plan");
    add_common(poison, poison_opts);
    auto* run = app.add_subcommand("run", "train per the config's mode, evaluate, append a results row");
    add_common(run, run_opts);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint without training");
    add_common(eval, eval_opts);
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint (.tnrc)")->required();
    eval->add_flag("--mse", eval_mse, "fail unless the checkpoint has a reconstruction head");
    auto* pca = app.add_subcommand("pca", "stem-feature PCA scatter of a checkpoint");
    add_common(pca, pca_opts);
    pca->add_option("--checkpoint", pca_ckpt, "model checkpoint (.tnrc)")->required();
    auto* repro = app.add_subcommand("reproduce", "run an ablation grid");
    add_common(repro, repro_opts);
    repro->add_option("--scenario", scenario, "table3, table4, table5, table8, table9 or clean")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        if (*poison) {
            const auto cfg = tnr::load_config(poison_opts.config, poison_opts.seed);
            const auto out = out_dir(poison_opts, cfg);
            const auto plan = tnr::cmd_poison(cfg, out);
            std::cout << "poisoned " << plan.indices.size() << " of " << plan.requested << " requested samples -> "
                      << out.string() << "\n";
        } else if (*run) {
            const auto cfg = tnr::load_config(run_opts.config, run_opts.seed);
            print_report(tnr::cmd_run(cfg, out_dir(run_opts, cfg)));
        } else if (*eval) {
            auto cfg = tnr::load_config(eval_opts.config, eval_opts.seed);
            cfg.eval.require_mse = cfg.eval.require_mse || eval_mse;
            print_report(tnr::cmd_eval(cfg, eval_ckpt, out_dir(eval_opts, cfg)));
        } else if (*pca) {
            const auto cfg = tnr::load_config(pca_opts.config, pca_opts.seed);
            const auto out = out_dir(pca_opts, cfg);
            const auto s = tnr::cmd_pca(cfg, pca_ckpt, out);
            std::cout << "explained variance " << s.pca.explained_variance[0] << " " << s.pca.explained_variance[1]
                      << ", " << s.coords.size() << " points -> " << (out / "scatter.csv").string() << "\n";
        } else if (*repro) {
            const auto sc = tnr::parse_scenario(scenario);
            const auto cfg = tnr::load_config(repro_opts.config, repro_opts.seed);
            const auto s = tnr::cmd_reproduce(cfg, sc, out_dir(repro_opts, cfg));
            std::cout << tnr::kScenarioHeader << "\n";
            for (const auto& r : s.rows) std::cout << r.cell << "," << tnr::results_row(r.report) << "\n";
            for (const auto& c : s.checks)
                std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << c.detail << ")\n";
        }
    } catch (const std::invalid_argument& e) {  // config, shape and value errors
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const tnr::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const tnr::CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return kFailed;
    }
    return kOk;
}
