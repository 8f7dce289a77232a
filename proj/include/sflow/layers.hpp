#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sflow/ops.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

/// A named trainable tensor. Tied parameters appear once.
struct NamedParam {
    std::string name;
    Tensor tensor;
};

/// Ordered parameter registry; insertion order is checkpoint order.
class ParamList {
public:
    void add(std::string name, const Tensor& t);
    const std::vector<NamedParam>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }
    std::size_t numel() const;
    void zero_grad() const;

private:
    std::vector<NamedParam> items_;
};

/// Convolution layer: kernel (Cout, Cin, K, K) plus channel bias.
struct Conv {
    Tensor kernel;
    Tensor bias;
    std::uint32_t stride = 1;
    std::uint32_t padding = 0;

    /// Uniform init in +-sqrt(1/fan_in) for kernel and bias.
    static Conv make(std::uint32_t in_channels, std::uint32_t out_channels, std::uint32_t k,
                     std::uint32_t stride, std::uint32_t padding, std::mt19937_64& rng);
    /// "Same"-size stride-1 convolution.
    static Conv same(std::uint32_t in_channels, std::uint32_t out_channels, std::uint32_t k,
                     std::mt19937_64& rng) {
        return make(in_channels, out_channels, k, 1, k / 2, rng);
    }
    static Conv zeros(std::uint32_t in_channels, std::uint32_t out_channels, std::uint32_t k,
                      std::uint32_t stride, std::uint32_t padding);

    std::uint32_t in_channels() const { return kernel.shape().c; }
    std::uint32_t out_channels() const { return kernel.shape().b; }

    Tensor operator()(const Tensor& x) const { return conv2d(x, kernel, bias, stride, padding); }
    void collect(ParamList& out, const std::string& prefix) const;
};

enum class ResampleFactor { down4, up4 };

/// Down by 4 via a stride-4 5x5 convolution; up by 4 via nearest-neighbour
/// replication followed by a same-size convolution.
Conv make_resample_conv(ResampleFactor factor, std::uint32_t in_channels,
                        std::uint32_t out_channels, std::mt19937_64& rng);
Tensor resample(const Tensor& input, ResampleFactor factor, const Conv& conv);

}  // namespace sflow
