#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sflow {

/// Raised when operand extents disagree. The message names the dimension.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an elementwise op is applied outside its domain (e.g. log of 0).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct Shape {
    std::uint32_t b = 1;
    std::uint32_t c = 1;
    std::uint32_t h = 1;
    std::uint32_t w = 1;

    std::size_t numel() const { return std::size_t{b} * c * h * w; }
    std::size_t plane() const { return std::size_t{h} * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until something is accumulated
    bool requires_grad = false;

    void accumulate(std::span<const double> g);
    std::vector<double>& grad_buffer();
};

/// Dense rank-4 (B, C, H, W) array of doubles with an optional gradient.
///
/// Tensors are handles: copying a Tensor aliases the same storage. Use
/// clone() for a deep copy and detach() for an alias-free value without
/// gradient tracking.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const& { return impl_->data; }
    /// Owning copy for temporaries, so `for (double v : f().data())` is safe.
    std::vector<double> data() const&& { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::uint32_t b, std::uint32_t c, std::uint32_t y, std::uint32_t x) const;
    double& at(std::uint32_t b, std::uint32_t c, std::uint32_t y, std::uint32_t x);
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const;
    Tensor detach() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Define-by-run record of differentiable operations on the current thread.
///
/// Every op whose inputs require grad appends one entry; entries are stored in
/// execution order, which is a valid topological order of the graph.
class Tape {
public:
    using Backward = std::function<void(std::span<const double> grad_out)>;

    struct Entry {
        std::shared_ptr<TensorImpl> output;
        Backward backward;
    };

    static Tape& current();

    void record(const Tensor& output, Backward backward);
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    /// Replays the tape in reverse from `loss` (shape 1x1x1x1), then clears it.
    void backward(const Tensor& loss);

private:
    std::vector<Entry> entries_;
};

/// False while a NoGradGuard is alive on this thread.
bool grad_enabled();

/// Disables recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

void backward(const Tensor& loss);

}  // namespace sflow
