#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sflow/tensor.hpp"

namespace sflow {

enum class Elementwise { add, sub, mul, div, sigmoid, tanh, exp, log, softplus };

/// Applies `op` to one (unary) or two (binary) operands of identical shape.
Tensor elementwise(Elementwise op, std::span<const Tensor> operands);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);

/// a * x + b with scalar constants.
Tensor affine(const Tensor& x, double a, double b);
inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }
inline Tensor one_minus(const Tensor& x) { return affine(x, -1.0, 1.0); }

/// 2D cross-correlation. `kernel` is (Cout, Cin, K, K) with odd K; `bias`
/// is either undefined or (1, Cout, 1, 1), the only broadcast the engine allows.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::uint32_t stride, std::uint32_t padding);

/// Repeats every cell into a factor x factor block.
Tensor upsample_nearest(const Tensor& input, std::uint32_t factor);

/// Softmax over the channel axis at every (b, y, x) cell.
Tensor softmax_channel(const Tensor& input);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& input, std::uint32_t begin, std::uint32_t count);
/// (B, 1, H, W) -> (B, channels, H, W) by explicit replication.
Tensor expand_channels(const Tensor& input, std::uint32_t channels);

/// Reductions to a 1x1x1x1 scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Weighted mean cross-entropy of channel logits against per-cell class
/// indices (size B*H*W). Normalized by the total weight of the target classes.
Tensor cross_entropy_channel(const Tensor& logits, std::span<const std::uint8_t> targets,
                             std::span<const double> class_weights);

/// Mean absolute (or squared) error over cells where mask != 0, counted per
/// channel. mask is (B, 1, H, W); returns 0 when the mask is empty.
Tensor masked_l1(const Tensor& pred, const Tensor& target, const Tensor& mask);
Tensor masked_l2(const Tensor& pred, const Tensor& target, const Tensor& mask);

}  // namespace sflow
