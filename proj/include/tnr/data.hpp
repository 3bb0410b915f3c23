#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tnr/nn.hpp"

namespace tnr {

/// Images in [0,1] with integer class labels.
struct Dataset {
    FTensor images;  // [N, C, H, W]
    std::vector<int> labels;
    std::string name;
    std::size_t num_classes = 10;

    std::size_t size() const { return labels.size(); }
    std::size_t image_numel() const { return size() ? images.numel() / size() : 0; }
    Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

    std::span<float> image(std::size_t i) { return images.data().subspan(i * image_numel(), image_numel()); }
    std::span<const float> image(std::size_t i) const {
        return images.data().subspan(i * image_numel(), image_numel());
    }

    /// Deep copy of the selected samples, in the given order.
    Dataset subset(std::span<const std::size_t> indices) const;
    Dataset clone() const;
    /// Samples per class.
    std::vector<std::size_t> class_counts() const;
    /// Throws std::invalid_argument if labels or pixels are out of range.
    void validate() const;
};

class DataError : public std::runtime_error {
public:
    enum class Kind { io, bad_magic, count_mismatch, truncated, malformed };
    DataError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerBatch = 10000;

/// Big-endian IDX image/label pair (MNIST layout); pixels scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes = 10);
/// Pixels are written as round(255 * v).
void write_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels);

/// One CIFAR-10 binary batch: 10000 records of label byte + R,G,B planes.
Dataset load_cifar_batch(const std::filesystem::path& file);
/// data_batch_1..5.bin (train) or test_batch.bin from `dir`.
Dataset load_cifar_binary(const std::filesystem::path& dir, bool test = false);
void write_cifar_batch(const Dataset& d, const std::filesystem::path& file);

struct SplitSpec {
    double holdout_fraction = 0.05;
    std::uint64_t seed = 0;
};

/// Seeded split into (train, holdout) with |holdout| = floor(fraction * N).
/// Both keep the source order of their members.
std::pair<Dataset, Dataset> split_holdout(const Dataset& d, const SplitSpec& spec);
/// Index form of split_holdout: (train indices, holdout indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                            const SplitSpec& spec);

/// Per-epoch shuffled index batches; the permutation is seeded by seed ^ epoch
/// and the last batch may be partial.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch);

struct Batch {
    FTensor images;
    std::vector<int> labels;
};

Batch gather(const Dataset& d, std::span<const std::size_t> indices);
/// Mirrors each image left-right with probability 1/2.
void random_hflip(Batch& b, std::uint64_t seed);

}  // namespace tnr
