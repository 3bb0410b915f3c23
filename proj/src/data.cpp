#include "tnr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "tnr/rng.hpp"

namespace tnr {

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(DataError::Kind::io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError(DataError::Kind::io, "write failed for " + path.string());
}

std::uint32_t be32(const std::string& b, std::size_t off) {
    const auto* p = reinterpret_cast<const unsigned char*>(b.data()) + off;
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

void put_be32(std::string& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<char>((v >> s) & 0xff));
}

unsigned char to_byte(float v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.name = name;
    out.num_classes = num_classes;
    const auto per = image_numel();
    auto shape = images.shape();
    shape[0] = indices.size();
    out.images = FTensor(shape);
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = image(indices[i]);
        std::copy(src.begin(), src.end(), out.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
        out.labels.push_back(labels[indices[i]]);
    }
    return out;
}

Dataset Dataset::clone() const {
    Dataset out = *this;
    out.images = images.clone();
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
    return counts;
}

void Dataset::validate() const {
    if (labels.empty()) throw std::invalid_argument(name + ": empty dataset");
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
        throw std::invalid_argument(name + ": images " + shape_str(images.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw std::invalid_argument(name + ": label " + std::to_string(y) + " outside [0," +
                                        std::to_string(num_classes) + ")");
        }
    }
    for (float v : images.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument(name + ": pixel outside [0,1]");
    }
}

// ---- IDX --------------------------------------------------------------------

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes) {
    using Kind = DataError::Kind;
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);
    if (img.size() < 16) throw DataError(Kind::truncated, images_path.string() + ": truncated IDX header");
    if (lab.size() < 8) throw DataError(Kind::truncated, labels_path.string() + ": truncated IDX header");
    if (be32(img, 0) != kIdxImageMagic) {
        throw DataError(Kind::bad_magic, images_path.string() + ": bad magic for IDX images");
    }
    if (be32(lab, 0) != kIdxLabelMagic) {
        throw DataError(Kind::bad_magic, labels_path.string() + ": bad magic for IDX labels");
    }
    const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
    const std::size_t n_labels = be32(lab, 4);
    if (n != n_labels) {
        throw DataError(Kind::count_mismatch, "IDX count mismatch: " + std::to_string(n) + " images vs " +
                                                  std::to_string(n_labels) + " labels");
    }
    if (img.size() - 16 < n * rows * cols) {
        throw DataError(Kind::truncated, images_path.string() + ": truncated pixel payload");
    }
    if (lab.size() - 8 < n) throw DataError(Kind::truncated, labels_path.string() + ": truncated label payload");

    Dataset d;
    d.name = images_path.filename().string();
    d.num_classes = num_classes;
    d.images = FTensor({n, 1, rows, cols});
    auto px = d.images.data();
    const auto* src = reinterpret_cast<const unsigned char*>(img.data()) + 16;
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(src[i]) / 255.0f;
    d.labels.resize(n);
    const auto* ls = reinterpret_cast<const unsigned char*>(lab.data()) + 8;
    for (std::size_t i = 0; i < n; ++i) {
        if (ls[i] >= num_classes) {
            throw DataError(Kind::malformed, labels_path.string() + ": label " + std::to_string(ls[i]) +
                                                 " outside [0," + std::to_string(num_classes) + ")");
        }
        d.labels[i] = ls[i];
    }
    return d;
}

void write_idx(const Dataset& d, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
    if (d.images.dim(1) != 1) {
        throw std::invalid_argument("write_idx: IDX images must be single-channel, got " +
                                    shape_str(d.images.shape()));
    }
    std::string img;
    img.reserve(16 + d.images.numel());
    put_be32(img, kIdxImageMagic);
    put_be32(img, static_cast<std::uint32_t>(d.size()));
    put_be32(img, static_cast<std::uint32_t>(d.images.dim(2)));
    put_be32(img, static_cast<std::uint32_t>(d.images.dim(3)));
    for (float v : d.images.data()) img.push_back(static_cast<char>(to_byte(v)));
    std::string lab;
    put_be32(lab, kIdxLabelMagic);
    put_be32(lab, static_cast<std::uint32_t>(d.size()));
    for (int y : d.labels) lab.push_back(static_cast<char>(y));
    write_file(images_path, img);
    write_file(labels_path, lab);
}

// ---- CIFAR-10 binary --------------------------------------------------------

Dataset load_cifar_batch(const std::filesystem::path& file) {
    const auto bytes = read_file(file);
    if (bytes.size() != kCifarRecordBytes * kCifarRecordsPerBatch) {
        throw DataError(DataError::Kind::malformed,
                        file.string() + ": malformed batch, " + std::to_string(bytes.size()) +
                            " bytes, expected " + std::to_string(kCifarRecordBytes * kCifarRecordsPerBatch));
    }
    Dataset d;
    d.name = file.filename().string();
    d.num_classes = 10;
    d.images = FTensor({kCifarRecordsPerBatch, 3, 32, 32});
    d.labels.resize(kCifarRecordsPerBatch);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    auto px = d.images.data();
    for (std::size_t r = 0; r < kCifarRecordsPerBatch; ++r) {
        const auto* rec = p + r * kCifarRecordBytes;
        if (rec[0] > 9) {
            throw DataError(DataError::Kind::malformed, file.string() + ": label byte " +
                                                            std::to_string(rec[0]) + " at record " +
                                                            std::to_string(r));
        }
        d.labels[r] = rec[0];
        for (std::size_t i = 0; i < 3072; ++i) px[r * 3072 + i] = static_cast<float>(rec[1 + i]) / 255.0f;
    }
    return d;
}

Dataset load_cifar_binary(const std::filesystem::path& dir, bool test) {
    if (test) return load_cifar_batch(dir / "test_batch.bin");
    std::vector<Dataset> parts;
    for (int i = 1; i <= 5; ++i) parts.push_back(load_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin")));
    Dataset d;
    d.name = "cifar10-train";
    d.num_classes = 10;
    d.images = FTensor({5 * kCifarRecordsPerBatch, 3, 32, 32});
    auto dst = d.images.data().begin();
    for (const auto& part : parts) {
        dst = std::copy(part.images.data().begin(), part.images.data().end(), dst);
        d.labels.insert(d.labels.end(), part.labels.begin(), part.labels.end());
    }
    return d;
}

void write_cifar_batch(const Dataset& d, const std::filesystem::path& file) {
    if (d.images.rank() != 4 || d.images.dim(1) != 3 || d.images.dim(2) != 32 || d.images.dim(3) != 32) {
        throw std::invalid_argument("write_cifar_batch: expected [N,3,32,32], got " + shape_str(d.images.shape()));
    }
    std::string bytes;
    bytes.reserve(d.size() * kCifarRecordBytes);
    for (std::size_t r = 0; r < d.size(); ++r) {
        bytes.push_back(static_cast<char>(d.labels[r]));
        for (float v : d.image(r)) bytes.push_back(static_cast<char>(to_byte(v)));
    }
    write_file(file, bytes);
}

// ---- splits and batching ----------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                            const SplitSpec& spec) {
    if (!(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0)) {
        throw std::invalid_argument("split_holdout: fraction must lie in (0,1), got " +
                                    std::to_string(spec.holdout_fraction));
    }
    const auto n_hold = static_cast<std::size_t>(std::floor(spec.holdout_fraction * static_cast<double>(n)));
    if (n_hold < 1) {
        throw std::invalid_argument("split_holdout: holdout of " + std::to_string(spec.holdout_fraction) +
                                    " x " + std::to_string(n) + " samples is empty");
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(spec.seed, 0x5b117));
    rng.shuffle(std::span(perm));
    std::vector<std::size_t> hold(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());
    std::sort(hold.begin(), hold.end());
    std::sort(train.begin(), train.end());
    return {std::move(train), std::move(hold)};
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& d, const SplitSpec& spec) {
    auto [train_idx, hold_idx] = split_indices(d.size(), spec);
    if (hold_idx.size() < d.num_classes) {
        throw std::invalid_argument("split_holdout: holdout of " + std::to_string(hold_idx.size()) +
                                    " samples is smaller than the " + std::to_string(d.num_classes) + " classes");
    }
    auto train = d.subset(train_idx);
    auto hold = d.subset(hold_idx);
    train.name = d.name + "/train";
    hold.name = d.name + "/holdout";
    return {std::move(train), std::move(hold)};
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
    if (batch_size == 0) throw std::invalid_argument("batches: batch size must be positive");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(seed ^ epoch);
    rng.shuffle(std::span(perm));
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const auto end = std::min(n, start + batch_size);
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

Batch gather(const Dataset& d, std::span<const std::size_t> indices) {
    Batch b;
    auto shape = d.images.shape();
    shape[0] = indices.size();
    b.images = FTensor(shape);
    const auto per = d.image_numel();
    auto dst = b.images.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = d.image(indices[i]);
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
        b.labels.push_back(d.labels[indices[i]]);
    }
    return b;
}

void random_hflip(Batch& b, std::uint64_t seed) {
    Rng rng(seed);
    const auto n = b.images.dim(0), c = b.images.dim(1), h = b.images.dim(2), w = b.images.dim(3);
    auto px = b.images.data();
    for (std::size_t s = 0; s < n; ++s) {
        if (!rng.bernoulli(0.5)) continue;
        for (std::size_t row = 0; row < c * h; ++row) {
            auto* r = px.data() + (s * c * h + row) * w;
            std::reverse(r, r + w);
        }
    }
}

}  // namespace tnr
