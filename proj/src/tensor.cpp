#include "owps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace owps {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidShape: return "invalid shape";
        case ErrorKind::ShapeMismatch: return "shape mismatch";
        case ErrorKind::Domain: return "domain error";
        case ErrorKind::InvalidConfig: return "invalid config";
        case ErrorKind::Io: return "I/O error";
        case ErrorKind::Corrupt: return "corrupt file";
        case ErrorKind::Incompatible: return "incompatible file";
        case ErrorKind::State: return "invalid state";
        case ErrorKind::Diverged: return "diverged";
    }
    return "error";
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) throw Error(ErrorKind::InvalidShape, "rank-0 shape");
    for (auto e : shape) {
        if (e < 1) throw Error(ErrorKind::InvalidShape, "extent < 1 in " + shape_str(shape));
    }
}

thread_local bool t_grad_enabled = true;

}  // namespace

Real* TensorImpl::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad.data();
}

Tensor make_result(const Shape& shape, Buffer values) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0f); }

Tensor Tensor::full(const Shape& shape, Real value) {
    check_shape(shape);
    return make_result(shape, Buffer(static_cast<std::size_t>(shape_numel(shape)), value));
}

Tensor Tensor::uniform(const Shape& shape, std::uint64_t seed, Real lo, Real hi) {
    check_shape(shape);
    std::mt19937_64 rng(seed);
    // Scaled 24-bit draws rather than std::uniform_real_distribution, whose
    // output is implementation-defined.
    Buffer values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) {
        const double u = static_cast<double>(rng() >> 40) / static_cast<double>(1ull << 24);
        v = static_cast<Real>(lo + (hi - lo) * u);
    }
    return make_result(shape, std::move(values));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<Real> values) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw Error(ErrorKind::InvalidShape, "data length " + std::to_string(values.size()) +
                                                 " does not match " + shape_str(shape));
    }
    return make_result(shape, Buffer(values.begin(), values.end()));
}

Real Tensor::item() const {
    if (numel() != 1) throw Error(ErrorKind::InvalidShape, "item() on " + shape_str(shape()));
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
}

Tensor Tensor::clone() const { return make_result(impl_->shape, impl_->data); }

// --- tape -------------------------------------------------------------------

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::initializer_list<Tensor> inputs, Tensor& output, BackwardFn backward) {
    record(std::vector<Tensor>(inputs), output, std::move(backward));
}

void Tape::record(const std::vector<Tensor>& inputs, Tensor& output, BackwardFn backward) {
    if (!t_grad_enabled) return;
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (!any) return;

    Entry entry;
    entry.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
        if (in.defined()) entry.inputs.push_back(in.impl());
    }
    entry.output = output.impl();
    entry.backward = std::move(backward);
    output.impl()->requires_grad = true;
    output.impl()->node = static_cast<std::int64_t>(entries_.size());
    output.impl()->tape_generation = generation_;
    entries_.push_back(std::move(entry));
}

std::vector<std::int64_t> Tape::input_nodes(std::size_t index) const {
    std::vector<std::int64_t> nodes;
    for (const auto& in : entries_.at(index).inputs) {
        nodes.push_back(in->tape_generation == generation_ ? in->node : -1);
    }
    return nodes;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw Error(ErrorKind::InvalidShape, "backward needs a scalar loss");
    }
    auto& impl = *loss.impl();
    if (!impl.requires_grad) return;
    if (impl.node < 0) {
        // Loss is itself a leaf.
        impl.grad_buffer()[0] += 1.0f;
        return;
    }
    if (impl.tape_generation != generation_ || impl.node >= static_cast<std::int64_t>(entries_.size())) {
        throw Error(ErrorKind::State, "loss is not on the current tape");
    }
    impl.grad_buffer()[0] += 1.0f;
    for (std::int64_t i = impl.node; i >= 0; --i) {
        auto& entry = entries_[static_cast<std::size_t>(i)];
        if (entry.output->grad.empty()) continue;
        entry.backward(entry.output->grad);
    }
}

void Tape::clear() {
    entries_.clear();
    ++generation_;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace owps
