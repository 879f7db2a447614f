#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mrgseq {

/// Raised when operand extents are incompatible.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace num {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape route gradients back to parameters held elsewhere.  Use
/// clone() for a deep copy.
class Tensor {
public:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        for (auto e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
        if (shape_size(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }

    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() {
        ensure_grad();
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    void ensure_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
        return t;
    }

    /// Same storage viewed with a new shape of equal size.
    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size()) {
            throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<Impl>(Impl{std::move(shape), impl_->data, {}, false});
        return t;
    }

    Impl* impl() const { return impl_.get(); }
    std::shared_ptr<Impl> shared_impl() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations.  Each thread owns one active
/// tape, so independent models can train on separate threads.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    static Tape& current() {
        thread_local Tape tape;
        return tape;
    }

    void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    /// Replays the tape in reverse.  Nodes were appended in forward order, so
    /// reverse replay is a valid reverse-topological traversal.
    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

    static bool& grad_enabled() {
        thread_local bool enabled = true;
        return enabled;
    }

private:
    std::vector<BackwardFn> nodes_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(Tape::grad_enabled()) { Tape::grad_enabled() = false; }
    ~NoGradGuard() { Tape::grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

inline bool tracks(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::grad_enabled()) return false;
    for (auto* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

inline std::vector<double>& grad_of(const std::shared_ptr<Tensor::Impl>& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    return impl->grad;
}

}  // namespace detail

/// Populates grads of every requires_grad tensor reachable from `loss` and
/// clears the tape.
inline void backward(Tensor loss) {
    if (loss.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        Tape::current().clear();
        return;
    }
    loss.mutable_grad()[0] += 1.0;
    Tape::current().run_backward();
}

}  // namespace num
}  // namespace mrgseq
