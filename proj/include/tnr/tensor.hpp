#pragma once

// Minimal reverse-mode autodiff over dense row-major tensors.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets a model own its parameters while the tape holds references to them.
// Operations record a backward closure on the active Tape (see TapeScope)
// whenever at least one input requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tnr {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Thrown when operand extents are incompatible.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
};

template <typename T>
class Tensor {
public:
    Tensor() : node_(std::make_shared<TensorStorage<T>>()) {}
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> values);

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    /// Value of a one-element tensor.
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient accumulator, allocated as zeros on first access. Gradients
    /// are bookkeeping on the shared storage, so this is available on const
    /// handles.
    std::span<T> grad() const;
    void zero_grad();
    void clear_grad() { node_->grad.clear(); }

    /// Deep copy with no gradient and no tape linkage.
    Tensor clone() const;
    /// Copy of the same values under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }
    const std::shared_ptr<TensorStorage<T>>& storage() const { return node_; }

private:
    std::shared_ptr<TensorStorage<T>> node_;
};

/// Ordered record of backward closures for one forward pass.
template <typename T>
class Tape {
public:
    using Backward = std::function<void()>;

    void record(Tensor<T> output, Backward fn);
    /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure once, newest
    /// first. Intermediate gradients are reset first, so calling backward
    /// twice accumulates into leaves exactly twice.
    void backward(const Tensor<T>& loss);
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    /// Tape that operations on this thread currently record onto, if any.
    static Tape* active();

private:
    template <typename U>
    friend class TapeScope;

    struct Entry {
        Tensor<T> output;
        Backward fn;
    };
    std::vector<Entry> entries_;
};

/// Makes a tape active on the calling thread for the guard's lifetime.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording on the calling thread.
template <typename T>
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<T>* previous_;
};

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
    tape.backward(loss);
}

// ---- operations -------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[N,D] + b[D] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// 2x2 window, stride 2. Gradient goes to the first maximum in row-major order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x);

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> flatten(const Tensor<T>& x);

/// Inverted dropout: survivors are scaled by 1/(1-rate); identity when not training.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed, bool training);

/// Mean over the batch of cross-entropy against (1-eps)*onehot + eps/K.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                double smoothing = 0.0);

/// Anisotropic L1 total variation, summed over channels and averaged over the batch.
template <typename T>
Tensor<T> total_variation(const Tensor<T>& img);

enum class RecNorm { l2, squared_l2 };

/// mean_n ||recon_n - target_n||_2 + tv_weight * TV(recon) / (C*H*W), i.e. the
/// TV term enters per pixel. The norm's gradient at a zero residual is taken
/// as zero.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& recon, const Tensor<T>& target, double tv_weight,
                              RecNorm norm = RecNorm::l2);

}  // namespace tnr
