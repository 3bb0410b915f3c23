#include "tnr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "tnr/rng.hpp"

namespace tnr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + p.string());
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw std::runtime_error("cannot create directory " + p.string() + ": " + ec.message());
}

fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute()) return p;
    return (base / p).lexically_normal();
}

// Seed streams for components whose seed is not spelled out.
enum SeedStream : std::uint64_t {
    kSplitStream = 1,
    kPoisonStream,
    kTriggerStream,
    kNetworkStream,
    kStage1Stream,
    kStage2Stream,
};

std::uint64_t read_seed(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    throw ConfigError(where + ": seed must be a non-negative integer");
}

std::uint64_t seed_or_derived(const json& user, const json::json_pointer& ptr, std::uint64_t root,
                              SeedStream stream) {
    if (user.contains(ptr)) return read_seed(user.at(ptr), ptr.to_string());
    return mix_seed(root, stream);
}

AttackConfig parse_attack(const json& a, const AttackConfig& base) {
    AttackConfig out = base;
    if (a.contains("trigger")) {
        out.trigger = a.at("trigger").get<TriggerSpec>();
        if (!a.at("trigger").contains("seed")) out.trigger.seed = base.trigger.seed;
    }
    if (a.contains("policy")) out.policy = parse_poison_policy(a.at("policy").get<std::string>());
    out.alpha = a.value("alpha", base.alpha);
    out.target = a.value("target", base.target);
    if (a.contains("seed")) out.seed = read_seed(a.at("seed"), "attack");
    return out;
}

void fill_idx_dir(DatasetSource& d) {
    if (d.dir.empty()) return;
    if (d.train_images.empty()) d.train_images = d.dir / "train-images-idx3-ubyte";
    if (d.train_labels.empty()) d.train_labels = d.dir / "train-labels-idx1-ubyte";
    if (d.test_images.empty()) d.test_images = d.dir / "t10k-images-idx3-ubyte";
    if (d.test_labels.empty()) d.test_labels = d.dir / "t10k-labels-idx1-ubyte";
}

void require_exists(const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what + ": path is not set");
    if (!fs::exists(p)) throw ConfigError(what + ": " + p.string() + " does not exist");
}

void seal(RunReport& r) {
    json j = r;
    j.erase("fingerprint");
    r.fingerprint = fingerprint(j);
}

std::string fmt(const char* f, double v) {
    char b[64];
    std::snprintf(b, sizeof b, f, v);
    return b;
}

}  // namespace

// ---- config -------------------------------------------------------------------

json config_defaults(bool desk_scale) {
    json net = desk_scale ? json{{"widths", {16, 16, 32, 32, 64, 64, 64, 64}}, {"split_index", 7}}
                          : json{{"widths", {32, 32, 64, 64, 128, 128}}, {"split_index", 4}};
    net["dropout"] = 0.5;
    return json{
        {"desk_scale", desk_scale},
        {"dataset", {{"format", "idx"}, {"num_classes", 10}}},
        {"attack", {{"trigger", {{"kind", "badnet_grid"}}}, {"policy", "dirty_label"}, {"alpha", 0.1}, {"target", 0}}},
        {"split", {{"holdout_fraction", 0.05}}},
        {"network", net},
        {"stage1",
         {{"lambda1", 10.0},
          {"lambda2", 0.1},
          {"epochs", desk_scale ? 15 : 200},
          {"batch_size", desk_scale ? 128 : 256},
          {"lr", 1e-3},
          {"weight_decay", 5e-4},
          {"rec_norm", "l2"},
          {"hflip", false}}},
        // the desk holdout is ~400 images; 15 passes leave the new head undertrained
        {"stage2",
         {{"epochs", desk_scale ? 60 : 200},
          {"batch_size", 32},
          {"lr", 1e-3},
          {"weight_decay", 5e-4},
          {"dropout", 0.5},
          {"smoothing", 0.1}}},
        {"mode", "full_tnr"},
        {"eval", {{"source_class", -1}, {"workers", 0}, {"require_mse", false}}},
    };
}

ExperimentConfig parse_config(const json& user, const fs::path& base_dir, std::optional<std::uint64_t> seed_override) {
    if (!user.is_object()) throw ConfigError("config: expected a JSON object");
    if (!seed_override && !user.contains("seed")) {
        throw ConfigError("config: \"seed\" is required; runs are never seeded from the clock");
    }
    ExperimentConfig c;
    c.seed = seed_override ? *seed_override : read_seed(user.at("seed"), "config");
    if (user.contains("desk_scale") && !user["desk_scale"].is_boolean()) {
        throw ConfigError("config: desk_scale must be true or false");
    }
    c.desk_scale = user.value("desk_scale", false);
    json j = config_defaults(c.desk_scale);
    j.merge_patch(user);

    std::string section = "config";
    try {
        section = "dataset";
        const auto& d = j.at("dataset");
        c.dataset.format = d.value("format", "idx");
        if (c.dataset.format != "idx" && c.dataset.format != "cifar") {
            throw ConfigError("dataset: format must be \"idx\" or \"cifar\", got \"" + c.dataset.format + "\"");
        }
        c.dataset.num_classes = d.value("num_classes", std::size_t{10});
        c.dataset.dir = resolve(base_dir, d.value("dir", std::string()));
        c.dataset.train_images = resolve(base_dir, d.value("train_images", std::string()));
        c.dataset.train_labels = resolve(base_dir, d.value("train_labels", std::string()));
        c.dataset.test_images = resolve(base_dir, d.value("test_images", std::string()));
        c.dataset.test_labels = resolve(base_dir, d.value("test_labels", std::string()));
        if (c.dataset.format == "idx") fill_idx_dir(c.dataset);

        section = "attack";
        AttackConfig seeds;
        seeds.seed = seed_or_derived(user, "/attack/seed"_json_pointer, c.seed, kPoisonStream);
        seeds.trigger.seed = seed_or_derived(user, "/attack/trigger/seed"_json_pointer, c.seed, kTriggerStream);
        c.attack = parse_attack(j.at("attack"), seeds);
        c.attack.trigger.watermark_path = resolve(base_dir, c.attack.trigger.watermark_path).string();

        section = "split";
        c.split.holdout_fraction = j.at("split").value("holdout_fraction", 0.05);
        c.split.seed = seed_or_derived(user, "/split/seed"_json_pointer, c.seed, kSplitStream);

        section = "network";
        c.network = j.at("network").get<NetworkConfig>();
        c.network.seed = seed_or_derived(user, "/network/seed"_json_pointer, c.seed, kNetworkStream);

        section = "stage1";
        c.stage1 = j.at("stage1").get<Stage1Config>();
        c.stage1.seed = seed_or_derived(user, "/stage1/seed"_json_pointer, c.seed, kStage1Stream);

        section = "stage2";
        c.stage2 = j.at("stage2").get<Stage2Config>();
        c.stage2.seed = seed_or_derived(user, "/stage2/seed"_json_pointer, c.seed, kStage2Stream);

        section = "mode";
        c.mode = parse_pipeline_mode(j.at("mode").get<std::string>());

        section = "eval";
        const auto& e = j.at("eval");
        c.eval.source_class = e.value("source_class", -1);
        c.eval.workers = e.value("workers", 0u);
        c.eval.require_mse = e.value("require_mse", false);

        section = "output_dir";
        if (j.contains("output_dir")) c.output_dir = resolve(base_dir, j["output_dir"].get<std::string>());

        section = "scenario";
        if (j.contains("scenario") && j["scenario"].contains("attacks")) {
            for (const auto& a : j["scenario"]["attacks"]) {
                auto sa = parse_attack(a, c.attack);
                sa.trigger.watermark_path = resolve(base_dir, sa.trigger.watermark_path).string();
                c.scenario_attacks.push_back(std::move(sa));
            }
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(section + ": " + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j, fs::absolute(path).parent_path(), seed_override);
}

void ExperimentConfig::validate() const {
    try {
        if (dataset.format == "idx") {
            require_exists(dataset.train_images, "dataset.train_images");
            require_exists(dataset.train_labels, "dataset.train_labels");
            require_exists(dataset.test_images, "dataset.test_images");
            require_exists(dataset.test_labels, "dataset.test_labels");
        } else {
            require_exists(dataset.dir, "dataset.dir");
        }
        if (dataset.num_classes < 2) throw ConfigError("dataset: need at least 2 classes");
        auto check_attack = [&](const AttackConfig& a, const std::string& where) {
            a.trigger.validate();
            if (!a.trigger.watermark_path.empty()) require_exists(a.trigger.watermark_path, where + ".watermark_path");
            if (!(a.alpha >= 0.0 && a.alpha < 1.0)) throw ConfigError(where + ": alpha must lie in [0,1)");
            if (a.target < 0 || static_cast<std::size_t>(a.target) >= dataset.num_classes) {
                throw ConfigError(where + ": target " + std::to_string(a.target) + " outside [0," +
                                  std::to_string(dataset.num_classes) + ")");
            }
        };
        check_attack(attack, "attack");
        for (const auto& a : scenario_attacks) check_attack(a, "scenario.attacks");
        if (!(split.holdout_fraction > 0.0 && split.holdout_fraction < 1.0)) {
            throw ConfigError("split: holdout_fraction must lie in (0,1)");
        }
        {
            // extents are filled in from the data later
            NetworkConfig shape_free = network;
            shape_free.height = shape_free.width = std::size_t{1} << 20;
            shape_free.num_classes = dataset.num_classes;
            shape_free.validate();
        }
        stage1.validate();
        stage2.validate();
        if (eval.source_class >= static_cast<int>(dataset.num_classes) || eval.source_class == attack.target) {
            throw ConfigError("eval: source_class must be a class other than the target");
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

int ExperimentConfig::source_class() const {
    if (eval.source_class >= 0) return eval.source_class;
    return attack.target == 0 ? 1 : 0;
}

void to_json(json& j, const AttackConfig& a) {
    j = json{{"trigger", a.trigger},
             {"policy", std::string(to_string(a.policy))},
             {"alpha", a.alpha},
             {"target", a.target},
             {"seed", a.seed}};
}

json config_json(const ExperimentConfig& c) {
    json ds{{"format", c.dataset.format}, {"num_classes", c.dataset.num_classes}};
    if (c.dataset.format == "idx") {
        ds["train_images"] = c.dataset.train_images.string();
        ds["train_labels"] = c.dataset.train_labels.string();
        ds["test_images"] = c.dataset.test_images.string();
        ds["test_labels"] = c.dataset.test_labels.string();
    } else {
        ds["dir"] = c.dataset.dir.string();
    }
    return json{{"seed", c.seed},
                {"desk_scale", c.desk_scale},
                {"dataset", ds},
                {"attack", c.attack},
                {"split", {{"holdout_fraction", c.split.holdout_fraction}, {"seed", c.split.seed}}},
                {"network", c.network},
                {"stage1", c.stage1},
                {"stage2", c.stage2},
                {"mode", std::string(to_string(c.mode))},
                {"eval",
                 {{"source_class", c.source_class()}, {"require_mse", c.eval.require_mse}}}};
}

// ---- data -----------------------------------------------------------------------

ExperimentData load_experiment_data(const ExperimentConfig& c) {
    Dataset train, test;
    if (c.dataset.format == "idx") {
        train = load_idx(c.dataset.train_images, c.dataset.train_labels, c.dataset.num_classes);
        test = load_idx(c.dataset.test_images, c.dataset.test_labels, c.dataset.num_classes);
    } else {
        train = load_cifar_binary(c.dataset.dir, false);
        test = load_cifar_binary(c.dataset.dir, true);
    }
    auto [tr, ho] = split_holdout(train, c.split);
    return {std::move(tr), std::move(ho), std::move(test)};
}

void fit_network(ExperimentConfig& c, const Dataset& d) {
    const auto s = d.image_shape();
    c.network.channels = s[0];
    c.network.height = s[1];
    c.network.width = s[2];
    c.network.num_classes = d.num_classes;
    try {
        c.network.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

// ---- runs -------------------------------------------------------------------------

RunReport evaluate_run(const SplitModel& m, const ExperimentConfig& c, const Dataset& test, json traces) {
    if (c.eval.require_mse && !m.has_recon()) {
        throw std::invalid_argument("reconstruction MSE requested but the model has no reconstruction head");
    }
    const unsigned workers = c.eval.workers ? c.eval.workers : std::max(1u, std::thread::hardware_concurrency());
    RunReport r;
    r.attack = std::string(to_string(c.attack.trigger.kind));
    r.mode = std::string(to_string(c.mode));
    r.alpha = c.attack.alpha;
    r.ca = eval_clean_accuracy(m, test, workers);
    r.asr = eval_asr(m, build_backdoor_test_set(test, c.attack.trigger, c.attack.target), c.attack.target, workers);
    if (m.has_recon()) r.mse = reconstruction_mse(m, test);
    r.separation = centroid_separation(m, test, c.attack.trigger, c.source_class(), c.attack.target);
    r.traces = std::move(traces);
    r.config = config_json(c);
    seal(r);
    return r;
}

Runner::Runner(const ExperimentConfig& base, fs::path cache_dir)
    : base_(base), data_(load_experiment_data(base)), cache_dir_(std::move(cache_dir)) {
    fit_network(base_, data_.train);
    if (!cache_dir_.empty()) ensure_dir(cache_dir_);
}

const Runner::Stage1Entry& Runner::stage1(const ExperimentConfig& c, const Dataset& poisoned) {
    const auto eff = effective_stage1(c.mode, c.stage1);
    const json key_src{{"network", c.network},
                       {"stage1", eff},
                       {"attack", c.attack},
                       {"split", {{"holdout_fraction", c.split.holdout_fraction}, {"seed", c.split.seed}}},
                       {"dataset", config_json(c)["dataset"]}};
    const auto key = fingerprint(key_src);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;

    const fs::path file = cache_dir_.empty() ? fs::path() : cache_dir_ / ("stage1_" + key + ".tnrc");
    if (!file.empty() && fs::exists(file)) {
        CheckpointMeta meta;
        SplitModel m = load_checkpoint(file, &meta);
        return cache_.emplace(key, Stage1Entry{std::move(m), meta.summary.at("trace").get<LossTrace>()})
            .first->second;
    }
    SplitModel m = build_network(c.network);
    LossTrace trace = train_stage1(m, poisoned, eff);
    ++trainings_;
    if (!file.empty()) {
        const fs::path tmp = file.string() + ".part";
        save_checkpoint(m, tmp, CheckpointMeta{"stage1", json{{"trace", trace}, {"inputs", key_src}}});
        fs::rename(tmp, file);
    }
    return cache_.emplace(key, Stage1Entry{std::move(m), std::move(trace)}).first->second;
}

RunOutcome Runner::run(const ExperimentConfig& cell, std::optional<std::size_t> holdout_size) {
    ExperimentConfig c = cell;
    fit_network(c, data_.train);
    c.validate();
    auto [poisoned, plan] = poison_train_set(data_.train, c.attack.trigger, c.attack.policy, c.attack.target,
                                             c.attack.alpha, c.attack.seed);
    const auto& s1 = stage1(c, poisoned);

    Dataset sub;
    const Dataset* holdout = &data_.holdout;
    if (holdout_size) {
        if (*holdout_size == 0 || *holdout_size > data_.holdout.size()) {
            throw ConfigError("holdout size " + std::to_string(*holdout_size) + " outside [1," +
                              std::to_string(data_.holdout.size()) + "]");
        }
        std::vector<std::size_t> idx(*holdout_size);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        sub = data_.holdout.subset(idx);
        holdout = &sub;
    }
    PipelineResult res = finish_pipeline(s1.model, s1.trace, *holdout, c.mode, c.stage2);
    // untrained decoder; an MSE from it would mean nothing
    if (effective_stage1(c.mode, c.stage1).lambda1 == 0.0) res.model.drop_recon();

    json traces{{"stage1", res.stage1}};
    if (res.stage2) traces["stage2"] = *res.stage2;
    RunReport report = evaluate_run(res.model, c, data_.test, std::move(traces));
    if (holdout_size) {
        report.config["holdout_size"] = *holdout_size;
        seal(report);
    }
    return {s1.model.clone(), std::move(res), std::move(report), std::move(plan)};
}

// ---- commands ---------------------------------------------------------------------

PoisonPlan cmd_poison(const ExperimentConfig& c, const fs::path& out) {
    const auto data = load_experiment_data(c);
    auto [poisoned, plan] = poison_train_set(data.train, c.attack.trigger, c.attack.policy, c.attack.target,
                                             c.attack.alpha, c.attack.seed);
    ensure_dir(out);
    if (c.dataset.format == "idx") {
        write_idx(poisoned, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte");
    } else {
        write_cifar_batch(poisoned, out / "poisoned_train.bin");
    }
    write_text(out / "plan.json", json(plan).dump(2) + "\n");
    return plan;
}

RunReport cmd_run(const ExperimentConfig& c, const fs::path& out) {
    Runner runner(c);
    auto o = runner.run(c);
    ensure_dir(out);
    save_checkpoint(o.stage1_model, out / "stage1.tnrc",
                    CheckpointMeta{"stage1", json{{"trace", o.result.stage1}}});
    save_checkpoint(o.result.model, out / "model.tnrc",
                    CheckpointMeta{std::string(to_string(c.mode)), json{{"fingerprint", o.report.fingerprint}}});
    write_text(out / "report.json", json(o.report).dump(2) + "\n");
    append_results_row(out / "results.csv", o.report);
    return o.report;
}

namespace {

Dataset load_test_set(const ExperimentConfig& c) {
    if (c.dataset.format == "idx") return load_idx(c.dataset.test_images, c.dataset.test_labels, c.dataset.num_classes);
    return load_cifar_binary(c.dataset.dir, true);
}

// Config as the checkpoint saw it: network taken from the file.
ExperimentConfig with_checkpoint(ExperimentConfig c, const SplitModel& m, const CheckpointMeta& meta) {
    c.network = m.config();
    if (meta.stage != "stage1") {
        if (auto parsed = [&]() -> std::optional<PipelineMode> {
                try {
                    return parse_pipeline_mode(meta.stage);
                } catch (const std::invalid_argument&) {
                    return std::nullopt;
                }
            }())
            c.mode = *parsed;
    }
    return c;
}

}  // namespace

RunReport cmd_eval(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& out) {
    CheckpointMeta meta;
    const SplitModel m = load_checkpoint(checkpoint, &meta);
    const auto cc = with_checkpoint(c, m, meta);
    const Dataset test = load_test_set(cc);
    RunReport r = evaluate_run(m, cc, test);
    ensure_dir(out);
    write_text(out / "eval_report.json", json(r).dump(2) + "\n");
    return r;
}

ScatterExport cmd_pca(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& out) {
    CheckpointMeta meta;
    const SplitModel m = load_checkpoint(checkpoint, &meta);
    const auto cc = with_checkpoint(c, m, meta);
    const Dataset test = load_test_set(cc);
    const auto groups = feature_groups(m, test, cc.attack.trigger, cc.source_class(), cc.attack.target);
    auto s = export_scatter(m, test, cc.attack.trigger, cc.source_class(), cc.attack.target);
    ensure_dir(out);
    write_scatter_csv(s, out / "scatter.csv");
    const json summary{{"source_class", cc.source_class()},
                       {"target", cc.attack.target},
                       {"attack", std::string(to_string(cc.attack.trigger.kind))},
                       {"explained_variance", s.pca.explained_variance},
                       {"iterations", s.pca.iterations},
                       {"separation", centroid_separation(groups)}};
    write_text(out / "pca.json", summary.dump(2) + "\n");
    return s;
}

// ---- reproduce ----------------------------------------------------------------------

std::string_view to_string(Scenario s) {
    switch (s) {
        case Scenario::table3: return "table3";
        case Scenario::table4: return "table4";
        case Scenario::table5: return "table5";
        case Scenario::table8: return "table8";
        case Scenario::table9: return "table9";
        case Scenario::clean: return "clean";
    }
    return "?";
}

Scenario parse_scenario(std::string_view name) {
    for (auto s : {Scenario::table3, Scenario::table4, Scenario::table5, Scenario::table8, Scenario::table9,
                   Scenario::clean}) {
        if (to_string(s) == name) return s;
    }
    throw ConfigError("unknown scenario \"" + std::string(name) +
                      "\" (expected table3, table4, table5, table8, table9 or clean)");
}

bool ReproduceSummary::all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const ScenarioCheck& c) { return c.passed; });
}

namespace {

ScenarioCheck check(std::string name, bool ok, std::string detail) {
    return {std::move(name), ok, std::move(detail)};
}

const RunReport& row_for(const ReproduceSummary& s, const std::string& cell) {
    for (const auto& r : s.rows)
        if (r.cell == cell) return r.report;
    throw std::logic_error("missing grid cell " + cell);
}

}  // namespace

ReproduceSummary reproduce(Runner& runner, Scenario scenario) {
    ReproduceSummary s;
    s.scenario = scenario;
    const ExperimentConfig& base = runner.base();
    auto add = [&](std::string cell, const ExperimentConfig& c, std::optional<std::size_t> holdout = std::nullopt) {
        std::clog << "[" << to_string(scenario) << "] " << cell << "\n";
        s.rows.push_back({std::move(cell), runner.run(c, holdout).report});
        return s.rows.back().report;
    };

    switch (scenario) {
        case Scenario::table3: {
            auto attacks = base.scenario_attacks.empty() ? std::vector<AttackConfig>{base.attack} : base.scenario_attacks;
            for (const auto& a : attacks) {
                const std::string name(to_string(a.trigger.kind));
                std::map<PipelineMode, double> asr;
                for (auto mode : {PipelineMode::no_recon, PipelineMode::no_replace, PipelineMode::full_tnr,
                                  PipelineMode::no_defense}) {
                    ExperimentConfig c = base;
                    c.attack = a;
                    c.mode = mode;
                    asr[mode] = add(name + "/" + std::string(to_string(mode)), c).asr;
                }
                const double nr = asr[PipelineMode::no_recon], nrep = asr[PipelineMode::no_replace],
                             full = asr[PipelineMode::full_tnr];
                s.checks.push_back(check(name + ": no_recon ASR >= 3x full_tnr ASR", nr >= 3.0 * full,
                                         fmt("%.2f", nr) + " vs " + fmt("%.2f", full)));
                s.checks.push_back(check(name + ": no_recon ASR >= 25", nr >= 25.0, fmt("%.2f", nr)));
                s.checks.push_back(check(name + ": no_replace ASR >= 80", nrep >= 80.0, fmt("%.2f", nrep)));
                s.checks.push_back(check(name + ": full_tnr ASR <= 10", full <= 10.0, fmt("%.2f", full)));
            }
            break;
        }
        case Scenario::table4: {
            const auto n = base.network.widths.size();
            std::vector<std::size_t> splits;
            for (long off : {2L, 0L, -2L}) {
                const long k = static_cast<long>(base.network.split_index) + off;
                if (k >= 1 && k <= static_cast<long>(n) - 1) splits.push_back(static_cast<std::size_t>(k));
            }
            for (auto k : splits) {
                ExperimentConfig c = base;
                c.mode = PipelineMode::full_tnr;
                c.network.split_index = k;
                add("stem=" + std::to_string(k) + "/head=" + std::to_string(n - k), c);
            }
            break;
        }
        case Scenario::table5: {
            for (double a : {0.05, 0.10, 0.20}) {
                ExperimentConfig c = base;
                c.mode = PipelineMode::full_tnr;
                c.attack.alpha = a;
                const auto& r = add("alpha=" + fmt("%.2f", a), c);
                s.checks.push_back(check("full_tnr ASR <= 15 at alpha " + fmt("%.2f", a), r.asr <= 15.0,
                                         fmt("%.2f", r.asr)));
            }
            break;
        }
        case Scenario::table8: {
            for (double l1 : {0.0, 1.0, 10.0}) {
                ExperimentConfig c = base;
                c.mode = PipelineMode::full_tnr;
                c.stage1.lambda1 = l1;
                c.stage1.lambda2 = 0.1;
                add("lambda1=" + fmt("%g", l1), c);
            }
            const auto &a0 = row_for(s, "lambda1=0"), &a1 = row_for(s, "lambda1=1"), &a10 = row_for(s, "lambda1=10");
            s.checks.push_back(check("ASR strictly decreases over lambda1 0, 1, 10", a0.asr > a1.asr && a1.asr > a10.asr,
                                     fmt("%.2f", a0.asr) + " > " + fmt("%.2f", a1.asr) + " > " + fmt("%.2f", a10.asr)));
            const bool mse_ok = a1.mse && a10.mse && *a10.mse < *a1.mse;
            s.checks.push_back(check("MSE(lambda1=10) < MSE(lambda1=1)", mse_ok,
                                     (a10.mse ? fmt("%.6f", *a10.mse) : "n/a") + " vs " +
                                         (a1.mse ? fmt("%.6f", *a1.mse) : "n/a")));
            break;
        }
        case Scenario::table9: {
            const auto n = runner.data().train.size() + runner.data().holdout.size();
            for (double rho : {0.005, 0.01, 0.025, 0.05}) {
                const auto size = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n)));
                if (size == 0 || size > runner.data().holdout.size()) continue;
                ExperimentConfig c = base;
                c.mode = PipelineMode::full_tnr;
                add("holdout=" + std::to_string(size), c, size);
            }
            break;
        }
        case Scenario::clean: {
            for (auto mode : {PipelineMode::no_defense, PipelineMode::full_tnr}) {
                ExperimentConfig c = base;
                c.attack.alpha = 0.0;
                c.mode = mode;
                add("alpha=0/" + std::string(to_string(mode)), c);
            }
            const auto& nd = row_for(s, "alpha=0/no_defense");
            const auto& tnr = row_for(s, "alpha=0/full_tnr");
            s.checks.push_back(check("full_tnr CA within 5 points of no_defense at alpha 0",
                                     std::abs(nd.ca - tnr.ca) <= 5.0,
                                     fmt("%.2f", tnr.ca) + " vs " + fmt("%.2f", nd.ca)));
            break;
        }
    }
    return s;
}

ReproduceSummary cmd_reproduce(const ExperimentConfig& c, Scenario scenario, const fs::path& out) {
    ensure_dir(out);
    Runner runner(c, out / "cache");
    auto s = reproduce(runner, scenario);
    const std::string name(to_string(scenario));
    std::ostringstream csv;
    csv << kScenarioHeader << "\n";
    for (const auto& r : s.rows) {
        csv << r.cell << "," << results_row(r.report) << "\n";
        append_results_row(out / "results.csv", r.report);
    }
    write_text(out / (name + ".csv"), csv.str());
    json checks = json::array();
    for (const auto& k : s.checks) checks.push_back({{"name", k.name}, {"passed", k.passed}, {"detail", k.detail}});
    write_text(out / (name + "_summary.json"),
               json{{"scenario", name}, {"rows", s.rows.size()}, {"checks", checks}, {"all_passed", s.all_passed()}}
                       .dump(2) +
                   "\n");
    return s;
}

}  // namespace tnr
