#include "tnr/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tnr/rng.hpp"

namespace tnr {

namespace {

// Stream tags for per-layer initialization.
constexpr std::uint64_t kStemTag = 0x100;
constexpr std::uint64_t kHeadTag = 0x200;
constexpr std::uint64_t kDecoderTag = 0x300;

void fill_uniform(FTensor& t, double bound, Rng& rng) {
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

ConvLayer make_conv(std::size_t in, std::size_t out, bool relu_follows, bool pool_after,
                    std::uint64_t seed) {
    ConvLayer layer{FTensor({out, in, 3, 3}), FTensor({out}), pool_after};
    Rng rng(seed);
    const double fan_in = static_cast<double>(in * 9);
    fill_uniform(layer.weight, std::sqrt((relu_follows ? 6.0 : 3.0) / fan_in), rng);
    layer.weight.set_requires_grad(true);
    layer.bias.set_requires_grad(true);
    return layer;
}

FTensor run_conv(const ConvLayer& layer, const FTensor& x) {
    auto y = relu(conv2d(x, layer.weight, layer.bias, 1, 1));
    return layer.pool_after ? maxpool2(y) : y;
}

void push_layer(std::vector<FTensor>& out, const ConvLayer& l) {
    out.push_back(l.weight);
    out.push_back(l.bias);
}

ConvLayer clone_layer(const ConvLayer& l) {
    ConvLayer c{l.weight.clone(), l.bias.clone(), l.pool_after};
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
    return c;
}

std::size_t pool_count(const NetworkConfig& c, std::size_t layers) {
    std::size_t pools = 0;
    for (std::size_t i = 0; i < layers; ++i)
        if (i % 2 == 1 && i + 1 < c.widths.size()) ++pools;
    return pools;
}

}  // namespace

void NetworkConfig::validate() const {
    if (channels == 0 || height == 0 || width == 0) {
        throw std::invalid_argument("network: input extents must be positive");
    }
    if (num_classes < 2) throw std::invalid_argument("network: need at least 2 classes");
    if (widths.size() < 2 || widths.size() % 2 != 0) {
        throw std::invalid_argument("network: conv widths must come in pairs, got " +
                                    std::to_string(widths.size()));
    }
    for (auto w : widths)
        if (w == 0) throw std::invalid_argument("network: conv width must be positive");
    if (split_index < 1 || split_index > widths.size() - 1) {
        throw std::invalid_argument("network: split_index " + std::to_string(split_index) +
                                    " outside [1," + std::to_string(widths.size() - 1) + "]");
    }
    const std::size_t div = std::size_t{1} << pool_count(*this, widths.size());
    if (height % div != 0 || width % div != 0) {
        throw std::invalid_argument("network: input " + std::to_string(height) + "x" +
                                    std::to_string(width) + " not divisible by pooling factor " +
                                    std::to_string(div));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw std::invalid_argument("network: dropout must lie in [0, 1)");
    }
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = nlohmann::json{{"channels", c.channels}, {"height", c.height},
                       {"width", c.width},       {"num_classes", c.num_classes},
                       {"widths", c.widths},     {"split_index", c.split_index},
                       {"dropout", c.dropout},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
    NetworkConfig d;
    c.channels = j.value("channels", d.channels);
    c.height = j.value("height", d.height);
    c.width = j.value("width", d.width);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.widths = j.value("widths", d.widths);
    c.split_index = j.value("split_index", d.split_index);
    c.dropout = j.value("dropout", d.dropout);
    c.seed = j.value("seed", d.seed);
}

// ---- construction -----------------------------------------------------------

SplitModel build_network(const NetworkConfig& cfg) {
    cfg.validate();
    SplitModel m;
    m.cfg_ = cfg;
    const auto& w = cfg.widths;
    std::size_t in = cfg.channels;
    for (std::size_t i = 0; i < cfg.split_index; ++i) {
        const bool pool = i % 2 == 1 && i + 1 < w.size();
        m.stem_.push_back(make_conv(in, w[i], true, pool, mix_seed(cfg.seed, kStemTag + i)));
        in = w[i];
    }

    // Decoder mirrors the stem's pooling levels: one conv + 2x upsample per level.
    const std::size_t levels = pool_count(cfg, cfg.split_index);
    std::size_t dec_in = in;
    for (std::size_t lvl = levels; lvl-- > 0;) {
        const std::size_t out = w[2 * lvl + 1];
        m.decoder_.push_back(make_conv(dec_in, out, true, false,
                                       mix_seed(cfg.seed, kDecoderTag + m.decoder_.size())));
        dec_in = out;
    }
    m.decoder_.push_back(make_conv(dec_in, cfg.channels, false, false,
                                   mix_seed(cfg.seed, kDecoderTag + m.decoder_.size())));

    reinit_head(m, cfg.seed);
    return m;
}

void reinit_head(SplitModel& m, std::uint64_t seed) {
    const auto& cfg = m.cfg_;
    const auto& w = cfg.widths;
    m.head_convs_.clear();
    std::size_t in = w[cfg.split_index - 1];
    for (std::size_t i = cfg.split_index; i < w.size(); ++i) {
        const bool pool = i % 2 == 1 && i + 1 < w.size();
        m.head_convs_.push_back(make_conv(in, w[i], true, pool, mix_seed(seed, kHeadTag + i)));
        in = w[i];
    }
    m.fc_weight_ = FTensor({in, cfg.num_classes});
    m.fc_bias_ = FTensor({cfg.num_classes});
    Rng rng(mix_seed(seed, kHeadTag + 0xff));
    fill_uniform(m.fc_weight_, std::sqrt(3.0 / static_cast<double>(in)), rng);
    m.fc_weight_.set_requires_grad(true);
    m.fc_bias_.set_requires_grad(true);
}

// ---- forward ----------------------------------------------------------------

void SplitModel::check_input(const FTensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.channels || x.dim(2) != cfg_.height ||
        x.dim(3) != cfg_.width) {
        throw ShapeError("model expects input [N," + std::to_string(cfg_.channels) + "," +
                         std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                         "], got " + shape_str(x.shape()));
    }
}

FTensor SplitModel::forward_stem(const FTensor& x) const {
    check_input(x);
    FTensor h = x;
    for (const auto& l : stem_) h = run_conv(l, h);
    return h;
}

void SplitModel::set_dropout(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("network: dropout must lie in [0, 1)");
    cfg_.dropout = rate;
}

FTensor SplitModel::forward_head(const FTensor& features, Phase phase,
                                 std::uint64_t dropout_seed) const {
    FTensor h = features;
    for (const auto& l : head_convs_) h = run_conv(l, h);
    h = global_avg_pool(h);
    h = dropout(h, cfg_.dropout, dropout_seed, phase == Phase::stage2);
    return add_bias(matmul(h, fc_weight_), fc_bias_);
}

FTensor SplitModel::forward_decoder(const FTensor& features) const {
    if (decoder_.empty()) throw std::logic_error("model has no reconstruction head");
    FTensor h = features;
    for (std::size_t i = 0; i + 1 < decoder_.size(); ++i) {
        h = upsample_nearest2(conv2d(h, decoder_[i].weight, decoder_[i].bias, 1, 1));
    }
    const auto& last = decoder_.back();
    return sigmoid(conv2d(h, last.weight, last.bias, 1, 1));
}

FTensor SplitModel::forward_classify(const FTensor& x, Phase phase, std::uint64_t dropout_seed) const {
    return forward_head(forward_stem(x), phase, dropout_seed);
}

FTensor SplitModel::forward_reconstruct(const FTensor& x) const {
    return forward_decoder(forward_stem(x));
}

std::vector<FTensor> SplitModel::stem_params() const {
    std::vector<FTensor> out;
    for (const auto& l : stem_) push_layer(out, l);
    return out;
}

std::vector<FTensor> SplitModel::head_params() const {
    std::vector<FTensor> out;
    for (const auto& l : head_convs_) push_layer(out, l);
    out.push_back(fc_weight_);
    out.push_back(fc_bias_);
    return out;
}

std::vector<FTensor> SplitModel::recon_params() const {
    std::vector<FTensor> out;
    for (const auto& l : decoder_) push_layer(out, l);
    return out;
}

std::vector<FTensor> SplitModel::all_params() const {
    auto out = stem_params();
    for (auto& t : head_params()) out.push_back(t);
    for (auto& t : recon_params()) out.push_back(t);
    return out;
}

Shape SplitModel::stem_output_shape() const {
    const std::size_t pools = pool_count(cfg_, cfg_.split_index);
    return {1, cfg_.widths[cfg_.split_index - 1], cfg_.height >> pools, cfg_.width >> pools};
}

SplitModel SplitModel::clone() const {
    SplitModel c;
    c.cfg_ = cfg_;
    for (const auto& l : stem_) c.stem_.push_back(clone_layer(l));
    for (const auto& l : head_convs_) c.head_convs_.push_back(clone_layer(l));
    for (const auto& l : decoder_) c.decoder_.push_back(clone_layer(l));
    c.fc_weight_ = fc_weight_.clone();
    c.fc_weight_.set_requires_grad(true);
    c.fc_bias_ = fc_bias_.clone();
    c.fc_bias_.set_requires_grad(true);
    return c;
}

// ---- checkpoints ------------------------------------------------------------

struct CheckpointIo {
    struct Entry {
        std::string name;
        std::string group;
        FTensor* tensor;
    };

    static std::vector<Entry> table(SplitModel& m) {
        std::vector<Entry> t;
        auto add_layers = [&t](std::vector<ConvLayer>& layers, const std::string& group,
                               const std::string& prefix) {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                const auto base = prefix + std::to_string(i);
                t.push_back({base + ".weight", group, &layers[i].weight});
                t.push_back({base + ".bias", group, &layers[i].bias});
            }
        };
        add_layers(m.stem_, "stem", "stem.conv");
        add_layers(m.head_convs_, "head", "head.conv");
        t.push_back({"head.fc.weight", "head", &m.fc_weight_});
        t.push_back({"head.fc.bias", "head", &m.fc_bias_});
        add_layers(m.decoder_, "recon", "recon.conv");
        return t;
    }
};

namespace {

template <typename U>
void put_le(std::string& buf, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const SplitModel& model, const std::filesystem::path& path,
                     const CheckpointMeta& meta) {
    auto m = model;  // shares storage; table() needs non-const access only to take addresses
    auto entries = CheckpointIo::table(m);
    nlohmann::json header;
    header["config"] = m.config();
    header["stage"] = meta.stage;
    header["summary"] = meta.summary;
    header["has_recon"] = m.has_recon();
    auto& tensors = header["tensors"] = nlohmann::json::array();
    for (const auto& e : entries) {
        tensors.push_back({{"name", e.name}, {"group", e.group}, {"shape", e.tensor->shape()}});
    }
    const std::string text = header.dump();

    std::string buf(kCheckpointMagic, 4);
    put_le<std::uint32_t>(buf, kCheckpointVersion);
    put_le<std::uint64_t>(buf, text.size());
    buf += text;
    for (const auto& e : entries) {
        for (float v : e.tensor->data()) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + path.string());
}

SplitModel load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
    using Kind = CheckpointError::Kind;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(Kind::io, "cannot open checkpoint " + path.string());
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());

    if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError(Kind::bad_magic, path.string() + ": bad magic, not a TNRC checkpoint");
    }
    if (buf.size() < 16) throw CheckpointError(Kind::truncated, path.string() + ": truncated header");
    const auto version = get_le<std::uint32_t>(p + 4);
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::version_mismatch, path.string() + ": version mismatch, file has " +
                                                          std::to_string(version) + ", expected " +
                                                          std::to_string(kCheckpointVersion));
    }
    const auto header_len = get_le<std::uint64_t>(p + 8);
    if (buf.size() - 16 < header_len) {
        throw CheckpointError(Kind::truncated, path.string() + ": truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::malformed, path.string() + ": header is not valid JSON: " + e.what());
    }

    SplitModel m;
    try {
        m = build_network(header.at("config").get<NetworkConfig>());
        if (!header.at("has_recon").get<bool>()) m.drop_recon();
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::malformed, path.string() + ": bad header: " + e.what());
    }
    auto entries = CheckpointIo::table(m);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != entries.size()) {
        throw CheckpointError(Kind::malformed, path.string() + ": tensor table lists " +
                                                   std::to_string(tensors.size()) + " entries, model has " +
                                                   std::to_string(entries.size()));
    }
    std::size_t offset = 16 + header_len;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto shape = tensors[i].at("shape").get<Shape>();
        if (tensors[i].at("name").get<std::string>() != entries[i].name || shape != entries[i].tensor->shape()) {
            throw CheckpointError(Kind::malformed, path.string() + ": tensor " + std::to_string(i) +
                                                       " does not match the configured architecture");
        }
        auto data = entries[i].tensor->data();
        if (buf.size() - offset < data.size() * 4) {
            throw CheckpointError(Kind::truncated, path.string() + ": truncated tensor payload at " +
                                                       entries[i].name);
        }
        for (auto& v : data) {
            v = std::bit_cast<float>(get_le<std::uint32_t>(p + offset));
            offset += 4;
        }
    }
    if (offset != buf.size()) {
        throw CheckpointError(Kind::malformed, path.string() + ": " + std::to_string(buf.size() - offset) +
                                                   " trailing bytes after tensor payload");
    }
    if (meta) {
        meta->stage = header.value("stage", "");
        meta->summary = header.value("summary", nlohmann::json::object());
    }
    return m;
}

}  // namespace tnr
