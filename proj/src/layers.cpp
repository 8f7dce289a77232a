#include "sflow/layers.hpp"

#include <cmath>
#include <unordered_set>

namespace sflow {

void ParamList::add(std::string name, const Tensor& t) {
    for (const auto& p : items_) {
        if (p.tensor.same_storage(t)) return;
        if (p.name == name) throw std::invalid_argument("ParamList: duplicate name " + name);
    }
    items_.push_back(NamedParam{std::move(name), t});
}

std::size_t ParamList::numel() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
}

void ParamList::zero_grad() const {
    for (const auto& p : items_) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

Conv Conv::make(std::uint32_t in_channels, std::uint32_t out_channels, std::uint32_t k,
                std::uint32_t stride, std::uint32_t padding, std::mt19937_64& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in_channels * k * k));
    Conv c;
    c.kernel = Tensor::uniform(Shape{out_channels, in_channels, k, k}, -bound, bound, rng, true);
    c.bias = Tensor::uniform(Shape{1, out_channels, 1, 1}, -bound, bound, rng, true);
    c.stride = stride;
    c.padding = padding;
    return c;
}

Conv Conv::zeros(std::uint32_t in_channels, std::uint32_t out_channels, std::uint32_t k,
                 std::uint32_t stride, std::uint32_t padding) {
    Conv c;
    c.kernel = Tensor::zeros(Shape{out_channels, in_channels, k, k}, true);
    c.bias = Tensor::zeros(Shape{1, out_channels, 1, 1}, true);
    c.stride = stride;
    c.padding = padding;
    return c;
}

void Conv::collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + ".kernel", kernel);
    if (bias.defined()) out.add(prefix + ".bias", bias);
}

Conv make_resample_conv(ResampleFactor factor, std::uint32_t in_channels,
                        std::uint32_t out_channels, std::mt19937_64& rng) {
    if (factor == ResampleFactor::down4) return Conv::make(in_channels, out_channels, 5, 4, 1, rng);
    return Conv::same(in_channels, out_channels, 3, rng);
}

Tensor resample(const Tensor& input, ResampleFactor factor, const Conv& conv) {
    const Shape& s = input.shape();
    if (factor == ResampleFactor::down4) {
        if (s.h % 4 != 0) throw ShapeError("resample down4: height " + std::to_string(s.h) + " not divisible by 4");
        if (s.w % 4 != 0) throw ShapeError("resample down4: width " + std::to_string(s.w) + " not divisible by 4");
        if (conv.stride != 4 || conv.kernel.shape().h != 5 || conv.padding != 1) {
            throw std::invalid_argument("resample down4: expects a 5x5 stride-4 padding-1 convolution");
        }
        return conv(input);
    }
    if (conv.stride != 1 || conv.padding != conv.kernel.shape().h / 2) {
        throw std::invalid_argument("resample up4: expects a same-size convolution");
    }
    return conv(upsample_nearest(input, 4));
}

}  // namespace sflow
