#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "owps/error.hpp"

namespace owps {

// Element type. OWPS_DOUBLE builds a float64 variant for gradient checking.
#ifdef OWPS_DOUBLE
using Real = double;
#else
using Real = float;
#endif

// 64-byte aligned storage. Eigen peels unaligned heads before vectorized
// reductions, so a fixed alignment keeps summation order, and therefore the
// result bits, independent of where the allocator happens to place a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    Buffer data;
    Buffer grad;  // empty means "no gradient yet"
    bool requires_grad = false;
    std::int64_t node = -1;   // index of the tape entry that produced this value
    std::uint64_t tape_generation = 0;

    // Zero-filled on first use.
    Real* grad_buffer();
};

// Shared handle to a dense array of Real. Copies alias the same storage;
// use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, Real value);
    static Tensor uniform(const Shape& shape, std::uint64_t seed, Real lo, Real hi);
    static Tensor from_data(const Shape& shape, std::vector<Real> values);
    static Tensor scalar(Real value) { return full({1}, value); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const Real> data() const { return impl_->data; }
    // Writable view; only valid when no pass holding this tensor is in flight.
    std::span<Real> mutable_data() { return impl_->data; }
    Real item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag);

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const Real> grad() const { return impl_->grad; }
    std::span<Real> mutable_grad() { return {impl_->grad_buffer(), numel()}; }
    void clear_grad() { impl_->grad.clear(); }

    Tensor clone() const;
    // Same values, cut from the tape and without gradient tracking.
    Tensor detach() const { return clone(); }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend class Tape;
    friend Tensor make_result(const Shape&, Buffer);

    std::shared_ptr<TensorImpl> impl_;
};

Tensor make_result(const Shape& shape, Buffer values);

// Define-by-run record of differentiable operations. Each thread owns one.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const Real> out_grad)>;

    static Tape& current();

    // Appends an entry when gradient mode is on and any input requires a
    // gradient; marks `output` accordingly. Inputs must already be recorded
    // (or be leaves), so entries stay in topological order.
    void record(std::initializer_list<Tensor> inputs, Tensor& output, BackwardFn backward);
    void record(const std::vector<Tensor>& inputs, Tensor& output, BackwardFn backward);

    // Reverse replay from `loss`; gradients accumulate into every tensor
    // that requires one.
    void backward(const Tensor& loss);

    void clear();
    std::size_t size() const { return entries_.size(); }
    // Tape node ids of the inputs of entry `index` (-1 for leaves).
    std::vector<std::int64_t> input_nodes(std::size_t index) const;
    std::uint64_t generation() const { return generation_; }

private:
    struct Entry {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        BackwardFn backward;
    };

    std::vector<Entry> entries_;
    std::uint64_t generation_ = 1;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline void backward(const Tensor& loss) { Tape::current().backward(loss); }

}  // namespace owps
