#include "sflow/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace sflow {

std::string Shape::str() const {
    std::ostringstream os;
    os << b << "x" << c << "x" << h << "x" << w;
    return os.str();
}

void TensorImpl::accumulate(std::span<const double> g) {
    auto& buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data.assign(shape.numel(), value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape.numel()) {
        throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape.str());
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return full(Shape{1, 1, 1, 1}, value, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
    // Explicit transform instead of std::uniform_real_distribution keeps the
    // stream identical across standard library implementations.
    Tensor t = zeros(shape, requires_grad);
    for (double& v : t.mutable_data()) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        v = lo + (hi - lo) * u;
    }
    return t;
}

double Tensor::at(std::uint32_t b, std::uint32_t c, std::uint32_t y, std::uint32_t x) const {
    const Shape& s = impl_->shape;
    return impl_->data[((std::size_t{b} * s.c + c) * s.h + y) * s.w + x];
}

double& Tensor::at(std::uint32_t b, std::uint32_t c, std::uint32_t y, std::uint32_t x) {
    const Shape& s = impl_->shape;
    return impl_->data[((std::size_t{b} * s.c + c) * s.h + y) * s.w + x];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape().str() + " is not a scalar");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
    Tensor t = clone();
    t.set_requires_grad(false);
    return t;
}

namespace {
thread_local bool tl_grad_enabled = true;
}  // namespace

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(const Tensor& output, Backward backward) {
    entries_.push_back(Entry{output.impl(), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1 || !(loss.shape() == Shape{1, 1, 1, 1})) {
        throw ShapeError("backward: loss must be 1x1x1x1, got " +
                         (loss.defined() ? loss.shape().str() : std::string("undefined")));
    }
    if (!loss.requires_grad()) {
        throw std::logic_error("backward: loss was not produced by recorded ops");
    }
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->backward(it->output->grad);
    }
    entries_.clear();
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

}  // namespace sflow
