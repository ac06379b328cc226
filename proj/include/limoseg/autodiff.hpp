#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace limoseg::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Cache-line aligned storage: vectorised kernels then peel identically on
/// every run, which keeps float results bit-reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
class BasicTensor;

/// Graph node. Nodes are stamped with a global sequence number at creation;
/// backward visits them in descending order, i.e. exact reverse execution order.
template <typename T>
struct Node {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // empty until needed
    bool requires_grad = false;
    std::uint64_t sequence = 0;
    std::vector<std::shared_ptr<Node>> parents;
    /// Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

/// Handle to a graph node; copies share storage.
template <typename T>
class BasicTensor {
public:
    BasicTensor() = default;
    explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static BasicTensor zeros(const Shape& shape, bool requires_grad = false);
    static BasicTensor full(const Shape& shape, T value, bool requires_grad = false);
    /// Throws ShapeError when data size disagrees with shape.
    static BasicTensor from(const Shape& shape, Buffer<T> data, bool requires_grad = false);
    static BasicTensor from(const Shape& shape, std::span<const T> data, bool requires_grad = false);
    static BasicTensor from(const Shape& shape, const std::vector<T>& data, bool requires_grad = false) {
        return from(shape, std::span<const T>(data), requires_grad);
    }
    static BasicTensor from(const Shape& shape, std::initializer_list<T> data, bool requires_grad = false) {
        return from(shape, Buffer<T>(data), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    Buffer<T>& storage() { return node_->data; }
    const Buffer<T>& storage() const { return node_->data; }
    /// Empty span when no gradient has been accumulated.
    std::span<const T> grad() const { return node_->grad; }
    Buffer<T>& grad_storage() { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad.clear(); }
    T item() const;

    /// Reverse pass seeded with ones (scalar outputs) or with `seed`.
    void backward() const;
    void backward(std::span<const T> seed) const;

    /// New leaf with copied data and no history.
    BasicTensor detach() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;

/// Builds an op result. History is recorded only when some parent requires grad.
template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, std::vector<BasicTensor<T>> parents,
                           std::function<void(Node<T>&)> backward_fn);

/// True while a NoGradGuard is alive on this thread: ops record no history.
bool grad_disabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- operations (all NCHW) ---------------------------------------------------------

/// Same-size cross-correlation; weight [Cout,Cin,k,k] with odd k and padding (k−1)/2.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      int padding);

/// Stride-2, 2×2 transposed convolution; weight [Cin,Cout,2,2].
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias);

/// 2×2 max, stride 2; gradient goes to the first (row-major) maximal cell.
template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& inputs);

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, int start, int count);

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits);

/// Mean over valid pixels of −w_y·log softmax(logits)_y. `target` and `valid`
/// are [N,H,W] row-major; throws UndefinedLossError when nothing is valid.
template <typename T>
BasicTensor<T> weighted_ce(const BasicTensor<T>& logits, std::span<const std::uint8_t> target,
                           std::span<const double> class_weights, std::span<const std::uint8_t> valid);

// ---- optimizer ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    long long step = 0;
};

/// One bias-corrected Adam update of every parameter from its accumulated grad.
/// Parameters without a grad are treated as having zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& config);

// ---- gradient verification ----------------------------------------------------------

struct GradcheckReport {
    bool passed = false;
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

using DoubleTensor = BasicTensor<double>;
using GradFn = std::function<DoubleTensor(const std::vector<DoubleTensor>&)>;

/// Central differences in double precision against the analytic reverse pass
/// of ⟨f(inputs), R⟩ for a random projection R. Relative error is
/// |a − n| / max(|a|, |n|, 1e-3). Inputs with requires_grad are checked.
GradcheckReport gradcheck(const GradFn& f, const std::vector<DoubleTensor>& inputs, double tolerance,
                          std::uint64_t seed = 0, double step = 1e-5);

}  // namespace limoseg::ad
