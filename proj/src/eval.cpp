#include "tnr/eval.hpp"
#include "tnr/runtime.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

namespace tnr {

namespace {

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> v(hi - lo);
    std::iota(v.begin(), v.end(), lo);
    return v;
}

void require_nonempty(const Dataset& d, const char* what) {
    if (d.size() == 0) throw std::invalid_argument(std::string(what) + ": empty dataset");
}

void require_input_shape(const SplitModel& m, const Dataset& d) {
    const auto& c = m.config();
    const Shape want{c.channels, c.height, c.width};
    if (d.size() && d.image_shape() != want) {
        throw ShapeError("dataset images are " + shape_str(d.image_shape()) + " but the checkpoint expects " +
                         shape_str(want));
    }
}

Eigen::MatrixXd to_matrix(const FTensor& t) {
    const auto n = static_cast<Eigen::Index>(t.dim(0));
    const auto d = static_cast<Eigen::Index>(t.numel() / t.dim(0));
    Eigen::MatrixXd out(n, d);
    auto src = t.data();
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) out(i, j) = src[static_cast<std::size_t>(i * d + j)];
    return out;
}

// Largest-magnitude entry made positive.
void fix_sign(Eigen::VectorXd& v) {
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
}

}  // namespace

std::vector<int> argmax_rows(const FTensor& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [N,K], got " + shape_str(logits.shape()));
    const auto n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    auto v = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (v[i * k + c] > v[i * k + best]) best = c;
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::vector<int> predict(const SplitModel& m, const Dataset& d, unsigned workers, std::size_t batch_size) {
    require_input_shape(m, d);
    std::vector<int> out(d.size());
    const std::size_t nb = (d.size() + batch_size - 1) / batch_size;
    const auto env = FloatEnv::current();
    auto run = [&](std::size_t b0, std::size_t b1) {
        env.install();  // workers must round like the caller
        NoGradScope<float> off;
        for (std::size_t b = b0; b < b1; ++b) {
            const auto lo = b * batch_size, hi = std::min(d.size(), lo + batch_size);
            const auto idx = range(lo, hi);
            const auto pred = argmax_rows(m.forward_classify(gather(d, idx).images, Phase::eval));
            std::copy(pred.begin(), pred.end(), out.begin() + static_cast<std::ptrdiff_t>(lo));
        }
    };
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(nb, 1))));
    if (workers == 1) {
        run(0, nb);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, nb * w / workers, nb * (w + 1) / workers);
        for (auto& t : pool) t.join();
    }
    return out;
}

HitCount count_correct(const SplitModel& m, const Dataset& clean_test, unsigned workers) {
    require_nonempty(clean_test, "clean accuracy");
    const auto pred = predict(m, clean_test, workers);
    HitCount c{0, pred.size()};
    for (std::size_t i = 0; i < pred.size(); ++i) c.hits += pred[i] == clean_test.labels[i];
    return c;
}

HitCount count_target_hits(const SplitModel& m, const Dataset& backdoor_test, int target, unsigned workers) {
    require_nonempty(backdoor_test, "attack success rate");
    const auto pred = predict(m, backdoor_test, workers);
    HitCount c{0, pred.size()};
    for (int p : pred) c.hits += p == target;
    return c;
}

double eval_clean_accuracy(const SplitModel& m, const Dataset& clean_test, unsigned workers) {
    return count_correct(m, clean_test, workers).percent();
}

double eval_asr(const SplitModel& m, const Dataset& backdoor_test, int target, unsigned workers) {
    return count_target_hits(m, backdoor_test, target, workers).percent();
}

double reconstruction_mse(const SplitModel& m, const Dataset& d) {
    if (!m.has_recon()) throw std::invalid_argument("reconstruction MSE requested but the model has no reconstruction head");
    require_nonempty(d, "reconstruction MSE");
    require_input_shape(m, d);
    NoGradScope<float> off;
    double sum = 0.0;
    constexpr std::size_t bs = 256;
    for (std::size_t lo = 0; lo < d.size(); lo += bs) {
        const auto idx = range(lo, std::min(d.size(), lo + bs));
        const auto x = gather(d, idx).images;
        const auto r = m.forward_reconstruct(x);
        auto a = x.data();
        auto b = r.data();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double e = static_cast<double>(b[i]) - a[i];
            sum += e * e;
        }
    }
    return sum / static_cast<double>(d.images.numel());
}

FTensor stem_features(const SplitModel& m, const Dataset& d, std::size_t batch_size) {
    require_input_shape(m, d);
    Shape fs = m.stem_output_shape();
    std::size_t dim = 1;
    for (std::size_t i = 1; i < fs.size(); ++i) dim *= fs[i];
    FTensor out({d.size(), dim});
    NoGradScope<float> off;
    auto dst = out.data().begin();
    for (std::size_t lo = 0; lo < d.size(); lo += batch_size) {
        const auto idx = range(lo, std::min(d.size(), lo + batch_size));
        const auto f = m.forward_stem(gather(d, idx).images);
        dst = std::copy(f.data().begin(), f.data().end(), dst);
    }
    return out;
}

Pca2 pca2(const FTensor& features, double tol, long max_iter) {
    if (features.rank() != 2) throw ShapeError("pca2: expected [N,D], got " + shape_str(features.shape()));
    if (features.dim(0) < 3) throw std::invalid_argument("pca2: need at least 3 samples");
    Eigen::MatrixXd x = to_matrix(features);
    const Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(x.rows() - 1);
    const auto d = cov.rows();

    Pca2 out;
    out.mean.assign(mu.data(), mu.data() + d);
    std::vector<Eigen::VectorXd> found;
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd v(d);
        for (Eigen::Index i = 0; i < d; ++i) v(i) = 1.0 + 0.01 * static_cast<double>(i % 7) + 0.1 * k * (i % 2);
        auto deflate = [&found](Eigen::VectorXd& u) {
            for (const auto& f : found) u -= f.dot(u) * f;
        };
        deflate(v);
        v.normalize();
        double lambda = 0.0;
        long it = 0;
        bool done = false;
        for (; it < max_iter && !done; ++it) {
            Eigen::VectorXd w = cov * v;
            deflate(w);
            const double norm = w.norm();
            if (norm <= 1e-300) {
                // Remaining variance is zero: any unit vector orthogonal to the previous components.
                lambda = 0.0;
                done = true;
                break;
            }
            w /= norm;
            if (w.dot(v) < 0) w = -w;
            done = (w - v).norm() < tol;
            v = w;
            lambda = v.dot(cov * v);
        }
        if (!done) {
            throw PcaError("pca2: component " + std::to_string(k + 1) + " did not converge after " +
                               std::to_string(it) + " iterations",
                           it);
        }
        fix_sign(v);
        out.components[static_cast<std::size_t>(k)].assign(v.data(), v.data() + d);
        out.explained_variance[static_cast<std::size_t>(k)] = std::max(lambda, 0.0);
        out.iterations[static_cast<std::size_t>(k)] = it;
        found.push_back(v);
    }
    out.coords.resize(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        out.coords[static_cast<std::size_t>(i)] = {x.row(i).dot(found[0]), x.row(i).dot(found[1])};
    }
    return out;
}

std::string_view to_string(ScatterGroup g) {
    switch (g) {
        case ScatterGroup::clean_target_class:
            return "clean_target_class";
        case ScatterGroup::clean_source_class:
            return "clean_source_class";
        case ScatterGroup::poisoned_source_class:
            return "poisoned_source_class";
    }
    return "unknown";
}

FeatureGroups feature_groups(const SplitModel& m, const Dataset& clean_test, const TriggerSpec& spec,
                             int source_class, int target) {
    if (source_class == target) throw std::invalid_argument("source class must differ from the target class");
    std::vector<std::size_t> src, tgt;
    for (std::size_t i = 0; i < clean_test.size(); ++i) {
        if (clean_test.labels[i] == source_class) src.push_back(i);
        if (clean_test.labels[i] == target) tgt.push_back(i);
    }
    if (src.empty()) throw std::invalid_argument("no test samples of source class " + std::to_string(source_class));
    if (tgt.empty()) throw std::invalid_argument("no test samples of target class " + std::to_string(target));
    const Dataset source = clean_test.subset(src);
    Dataset poisoned = source.clone();
    const auto field = render_trigger(spec, source.image_shape());
    std::vector<float> tmp(source.image_numel());
    for (std::size_t i = 0; i < poisoned.size(); ++i) {
        apply_trigger(source.image(i), field, tmp);
        std::copy(tmp.begin(), tmp.end(), poisoned.image(i).begin());
    }
    return {stem_features(m, clean_test.subset(tgt)), stem_features(m, source), stem_features(m, poisoned)};
}

ScatterExport export_scatter(const SplitModel& m, const Dataset& clean_test, const TriggerSpec& spec,
                             int source_class, int target) {
    const auto g = feature_groups(m, clean_test, spec, source_class, target);
    const std::size_t dim = g.clean_target.dim(1);
    const std::size_t n = g.clean_target.dim(0) + g.clean_source.dim(0) + g.poisoned_source.dim(0);
    FTensor all({n, dim});
    ScatterExport out;
    auto dst = all.data().begin();
    for (auto [t, grp] : {std::pair{&g.clean_target, ScatterGroup::clean_target_class},
                          std::pair{&g.clean_source, ScatterGroup::clean_source_class},
                          std::pair{&g.poisoned_source, ScatterGroup::poisoned_source_class}}) {
        dst = std::copy(t->data().begin(), t->data().end(), dst);
        out.groups.insert(out.groups.end(), t->dim(0), grp);
    }
    out.pca = pca2(all);
    out.coords = out.pca.coords;
    return out;
}

void write_scatter_csv(const ScatterExport& s, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "x,y,group\n";
    char buf[64];
    for (std::size_t i = 0; i < s.coords.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,", s.coords[i][0], s.coords[i][1]);
        f << buf << to_string(s.groups[i]) << '\n';
    }
}

double centroid_separation(const FeatureGroups& g) {
    for (const auto* t : {&g.clean_target, &g.clean_source, &g.poisoned_source}) {
        if (t->rank() != 2 || t->dim(0) == 0) throw std::invalid_argument("centroid_separation: empty feature group");
    }
    const auto ct = to_matrix(g.clean_target).colwise().mean().eval();
    const auto cs = to_matrix(g.clean_source).colwise().mean().eval();
    const auto p = to_matrix(g.poisoned_source);
    if (p.cols() != ct.cols() || cs.cols() != ct.cols()) throw ShapeError("centroid_separation: feature widths differ");
    std::size_t closer = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        closer += (p.row(i) - cs).squaredNorm() < (p.row(i) - ct).squaredNorm();
    }
    return static_cast<double>(closer) / static_cast<double>(p.rows());
}

double centroid_separation(const SplitModel& m, const Dataset& clean_test, const TriggerSpec& spec,
                           int source_class, int target) {
    return centroid_separation(feature_groups(m, clean_test, spec, source_class, target));
}

std::string fingerprint(const nlohmann::json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void to_json(nlohmann::json& j, const RunReport& r) {
    j = nlohmann::json{{"attack", r.attack}, {"mode", r.mode},     {"alpha", r.alpha},
                       {"ca", r.ca},         {"asr", r.asr},       {"traces", r.traces},
                       {"config", r.config}, {"fingerprint", r.fingerprint}};
    j["mse"] = r.mse ? nlohmann::json(*r.mse) : nlohmann::json(nullptr);
    j["separation"] = r.separation ? nlohmann::json(*r.separation) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, RunReport& r) {
    r.attack = j.at("attack").get<std::string>();
    r.mode = j.at("mode").get<std::string>();
    r.alpha = j.at("alpha").get<double>();
    r.ca = j.at("ca").get<double>();
    r.asr = j.at("asr").get<double>();
    r.mse = j.contains("mse") && !j["mse"].is_null() ? std::optional(j["mse"].get<double>()) : std::nullopt;
    r.separation = j.contains("separation") && !j["separation"].is_null()
                       ? std::optional(j["separation"].get<double>())
                       : std::nullopt;
    r.traces = j.value("traces", nlohmann::json::object());
    r.config = j.value("config", nlohmann::json::object());
    r.fingerprint = j.value("fingerprint", std::string());
}

std::string results_row(const RunReport& r) {
    char buf[256];
    auto opt = [](const std::optional<double>& v, int prec) {
        if (!v) return std::string();
        char b[64];
        std::snprintf(b, sizeof b, "%.*f", prec, *v);
        return std::string(b);
    };
    std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.2f,%.2f,%s,%s,%s", r.attack.c_str(), r.mode.c_str(), r.alpha, r.asr,
                  r.ca, opt(r.mse, 6).c_str(), opt(r.separation, 4).c_str(), r.fingerprint.c_str());
    return buf;
}

void append_results_row(const std::filesystem::path& csv, const RunReport& r) {
    const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
    std::ofstream f(csv, std::ios::binary | std::ios::app);
    if (!f) throw std::runtime_error("cannot append to " + csv.string());
    if (fresh) f << kResultsHeader << '\n';
    f << results_row(r) << '\n';
}

}  // namespace tnr
