#include "tnr/defense.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>

#include "tnr/optim.hpp"
#include "tnr/rng.hpp"

namespace tnr {

namespace {

constexpr std::array<std::pair<PipelineMode, std::string_view>, 4> kModeNames{{
    {PipelineMode::full_tnr, "full_tnr"},
    {PipelineMode::no_recon, "no_recon"},
    {PipelineMode::no_replace, "no_replace"},
    {PipelineMode::no_defense, "no_defense"},
}};

void check_dataset(const SplitModel& m, const Dataset& d, const char* what) {
    if (d.size() == 0) throw std::invalid_argument(std::string(what) + ": empty dataset");
    const auto& c = m.config();
    const Shape want{c.channels, c.height, c.width};
    if (d.image_shape() != want) {
        throw ShapeError(std::string(what) + ": dataset images are " + shape_str(d.image_shape()) +
                         " but the network expects " + shape_str(want));
    }
}

void zero_grads(std::vector<FTensor>& params) {
    for (auto& p : params) p.zero_grad();
}

double mean(const std::vector<double>& v, std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < v.size(); ++i) s += v[i];
    return v.size() > from ? s / static_cast<double>(v.size() - from) : 0.0;
}

// Rows `idx` of a [N, ...] tensor.
FTensor gather_rows(const FTensor& src, std::span<const std::size_t> idx) {
    Shape shape = src.shape();
    const std::size_t row = src.numel() / shape[0];
    shape[0] = idx.size();
    FTensor out(shape);
    auto in = src.data();
    auto o = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                    o.begin() + static_cast<std::ptrdiff_t>(i * row));
    return out;
}

}  // namespace

void init_recon_output_bias(SplitModel& m, const Dataset& d) {
    double mean = 0.0;
    for (float v : d.images.data()) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(d.images.numel(), 1));
    mean = std::clamp(mean, 0.01, 0.99);
    auto bias = m.recon_params().back();
    for (auto& b : bias.data()) b = static_cast<float>(std::log(mean / (1.0 - mean)));
}

void Stage1Config::validate() const {
    if (!(lambda1 >= 0.0) || !std::isfinite(lambda1)) throw std::invalid_argument("stage1: lambda1 must be >= 0");
    if (!(lambda2 >= 0.0) || !std::isfinite(lambda2)) throw std::invalid_argument("stage1: lambda2 must be >= 0");
    if (epochs < 1) throw std::invalid_argument("stage1: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("stage1: batch size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("stage1: lr must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("stage1: weight decay must be >= 0");
}

void Stage2Config::validate() const {
    if (epochs < 1) throw std::invalid_argument("stage2: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("stage2: batch size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("stage2: lr must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("stage2: weight decay must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("stage2: dropout must lie in [0,1)");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw std::invalid_argument("stage2: smoothing must lie in [0,1)");
}

void to_json(nlohmann::json& j, const Stage1Config& c) {
    j = nlohmann::json{{"lambda1", c.lambda1},
                       {"lambda2", c.lambda2},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"rec_norm", c.rec_norm == RecNorm::l2 ? "l2" : "squared_l2"},
                       {"hflip", c.hflip},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, Stage1Config& c) {
    Stage1Config d;
    c.lambda1 = j.value("lambda1", d.lambda1);
    c.lambda2 = j.value("lambda2", d.lambda2);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    const auto norm = j.value("rec_norm", std::string("l2"));
    if (norm == "l2") {
        c.rec_norm = RecNorm::l2;
    } else if (norm == "squared_l2") {
        c.rec_norm = RecNorm::squared_l2;
    } else {
        throw std::invalid_argument("stage1: rec_norm must be 'l2' or 'squared_l2', got '" + norm + "'");
    }
    c.hflip = j.value("hflip", d.hflip);
    c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const Stage2Config& c) {
    j = nlohmann::json{{"epochs", c.epochs},   {"batch_size", c.batch_size},     {"lr", c.lr},
                       {"weight_decay", c.weight_decay}, {"dropout", c.dropout}, {"smoothing", c.smoothing},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, Stage2Config& c) {
    Stage2Config d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.dropout = j.value("dropout", d.dropout);
    c.smoothing = j.value("smoothing", d.smoothing);
    c.seed = j.value("seed", d.seed);
}

std::string_view to_string(PipelineMode m) {
    for (const auto& [mode, name] : kModeNames)
        if (mode == m) return name;
    return "unknown";
}

PipelineMode parse_pipeline_mode(std::string_view name) {
    for (const auto& [mode, n] : kModeNames)
        if (n == name) return mode;
    throw std::invalid_argument("unknown pipeline mode '" + std::string(name) +
                                "' (expected full_tnr, no_recon, no_replace or no_defense)");
}

const std::vector<PipelineMode>& all_pipeline_modes() {
    static const std::vector<PipelineMode> modes{PipelineMode::full_tnr, PipelineMode::no_recon,
                                                 PipelineMode::no_replace, PipelineMode::no_defense};
    return modes;
}

void to_json(nlohmann::json& j, const LossTrace& t) {
    j = nlohmann::json{{"stage", t.stage},         {"lambda1", t.lambda1},         {"epoch_clf", t.epoch_clf},
                       {"epoch_rec", t.epoch_rec}, {"epoch_total", t.epoch_total}, {"epoch_lr", t.epoch_lr},
                       {"step_clf", t.step_clf},   {"step_rec", t.step_rec},       {"step_total", t.step_total}};
}

void from_json(const nlohmann::json& j, LossTrace& t) {
    t.stage = j.at("stage").get<std::string>();
    t.lambda1 = j.at("lambda1").get<double>();
    t.epoch_clf = j.at("epoch_clf").get<std::vector<double>>();
    t.epoch_rec = j.at("epoch_rec").get<std::vector<double>>();
    t.epoch_total = j.at("epoch_total").get<std::vector<double>>();
    t.epoch_lr = j.at("epoch_lr").get<std::vector<double>>();
    t.step_clf = j.at("step_clf").get<std::vector<double>>();
    t.step_rec = j.at("step_rec").get<std::vector<double>>();
    t.step_total = j.at("step_total").get<std::vector<double>>();
}

LossTrace train_stage1(SplitModel& m, const Dataset& train, const Stage1Config& cfg) {
    cfg.validate();
    check_dataset(m, train, "stage1");
    const bool with_rec = cfg.lambda1 > 0.0;
    if (with_rec && !m.has_recon()) throw std::invalid_argument("stage1: lambda1 > 0 needs a reconstruction head");

    std::vector<FTensor> params = m.stem_params();
    for (auto& p : m.head_params()) params.push_back(p);
    if (with_rec) {
        for (auto& p : m.recon_params()) params.push_back(p);
        init_recon_output_bias(m, train);
    }

    AdamState<float> opt;
    opt.hyper = {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    const float lambda1 = static_cast<float>(cfg.lambda1);
    const std::uint64_t order_seed = mix_seed(cfg.seed, 0x57a6e1);

    LossTrace trace;
    trace.stage = "stage1";
    trace.lambda1 = cfg.lambda1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.hyper.lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        const std::size_t first = trace.step_total.size();
        const auto order = batches(train.size(), cfg.batch_size, order_seed, static_cast<std::uint64_t>(epoch));
        for (std::size_t b = 0; b < order.size(); ++b) {
            Batch batch = gather(train, order[b]);
            if (cfg.hflip) random_hflip(batch, mix_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) | b));

            Tape<float> tape;
            FTensor loss, clf, rec;
            {
                TapeScope<float> scope(tape);
                const FTensor features = m.forward_stem(batch.images);
                clf = softmax_cross_entropy(m.forward_head(features, Phase::stage1), batch.labels, 0.0);
                if (with_rec) {
                    rec = reconstruction_loss(m.forward_decoder(features), batch.images, cfg.lambda2, cfg.rec_norm);
                    loss = add(clf, scale(rec, lambda1));
                } else {
                    loss = clf;
                }
            }
            const double total = loss.item();
            if (!std::isfinite(total)) {
                throw NonFiniteLoss(epoch, b,
                                    "stage1: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(b) + " (lambda1=" + std::to_string(cfg.lambda1) + ")");
            }
            trace.step_clf.push_back(clf.item());
            if (with_rec) trace.step_rec.push_back(rec.item());
            trace.step_total.push_back(total);

            zero_grads(params);
            tape.backward(loss);
            adam_step(params, opt);
        }
        trace.epoch_clf.push_back(mean(trace.step_clf, first));
        if (with_rec) trace.epoch_rec.push_back(mean(trace.step_rec, first));
        trace.epoch_total.push_back(mean(trace.step_total, first));
        trace.epoch_lr.push_back(opt.hyper.lr);
    }
    for (auto& p : params) p.clear_grad();
    return trace;
}

LossTrace train_stage2(SplitModel& m, const Dataset& holdout, const Stage2Config& cfg) {
    cfg.validate();
    check_dataset(m, holdout, "stage2");
    if (holdout.size() < cfg.batch_size) {
        std::clog << "warning: stage2 holdout has " << holdout.size() << " samples, fewer than one batch of "
                  << cfg.batch_size << "\n";
    }

    m.set_dropout(cfg.dropout);
    reinit_head(m, mix_seed(cfg.seed, 0x4ead));

    // The stem is frozen, so its features are computed once.
    FTensor features;
    {
        NoGradScope<float> off;
        constexpr std::size_t chunk = 256;
        std::vector<FTensor> parts;
        for (std::size_t s = 0; s < holdout.size(); s += chunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = s; i < std::min(holdout.size(), s + chunk); ++i) idx.push_back(i);
            parts.push_back(m.forward_stem(gather(holdout, idx).images));
        }
        Shape shape = parts.front().shape();
        shape[0] = holdout.size();
        features = FTensor(shape);
        auto out = features.data().begin();
        for (const auto& p : parts) out = std::copy(p.data().begin(), p.data().end(), out);
    }

    std::vector<FTensor> params = m.head_params();
    AdamState<float> opt;
    opt.hyper = {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    const std::uint64_t order_seed = mix_seed(cfg.seed, 0x57a6e2);

    LossTrace trace;
    trace.stage = "stage2";
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.hyper.lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        const std::size_t first = trace.step_total.size();
        const auto order = batches(holdout.size(), cfg.batch_size, order_seed, static_cast<std::uint64_t>(epoch));
        for (std::size_t b = 0; b < order.size(); ++b, ++step) {
            const FTensor fb = gather_rows(features, order[b]);
            std::vector<int> labels;
            labels.reserve(order[b].size());
            for (auto i : order[b]) labels.push_back(holdout.labels[i]);

            Tape<float> tape;
            FTensor loss;
            {
                TapeScope<float> scope(tape);
                loss = softmax_cross_entropy(m.forward_head(fb, Phase::stage2, mix_seed(cfg.seed, 0xd509 + step)),
                                             labels, cfg.smoothing);
            }
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw NonFiniteLoss(epoch, b,
                                    "stage2: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(b));
            }
            trace.step_clf.push_back(value);
            trace.step_total.push_back(value);

            zero_grads(params);
            tape.backward(loss);
            adam_step(params, opt);
        }
        trace.epoch_clf.push_back(mean(trace.step_clf, first));
        trace.epoch_total.push_back(mean(trace.step_total, first));
        trace.epoch_lr.push_back(opt.hyper.lr);
    }
    for (auto& p : params) p.clear_grad();
    return trace;
}

Stage1Config effective_stage1(PipelineMode mode, Stage1Config cfg) {
    if (mode == PipelineMode::no_recon || mode == PipelineMode::no_defense) cfg.lambda1 = 0.0;
    return cfg;
}

bool mode_replaces_head(PipelineMode mode) {
    return mode == PipelineMode::full_tnr || mode == PipelineMode::no_recon;
}

PipelineResult run_pipeline(const SplitModel& init, const Dataset& train, const Dataset& holdout,
                            PipelineMode mode, const Stage1Config& s1, const Stage2Config& s2) {
    SplitModel m = init.clone();
    const LossTrace trace = train_stage1(m, train, effective_stage1(mode, s1));
    return finish_pipeline(m, trace, holdout, mode, s2);
}

PipelineResult finish_pipeline(const SplitModel& stage1_model, const LossTrace& stage1_trace,
                               const Dataset& holdout, PipelineMode mode, const Stage2Config& s2) {
    PipelineResult r{stage1_model.clone(), stage1_trace, std::nullopt};
    if (mode_replaces_head(mode)) r.stage2 = train_stage2(r.model, holdout, s2);
    return r;
}

}  // namespace tnr
