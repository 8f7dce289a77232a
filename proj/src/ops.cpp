#include "sflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>

namespace sflow {
namespace {

bool tracks(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

Tensor make_output(Shape shape, bool track) { return Tensor::zeros(shape, track); }

void require_defined(const Tensor& t, const char* op, const char* name) {
    if (!t.defined()) throw std::invalid_argument(std::string(op) + ": " + name + " is undefined");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    const Shape& x = a.shape();
    const Shape& y = b.shape();
    auto check = [&](std::uint32_t u, std::uint32_t v, const char* dim) {
        if (u != v) {
            throw ShapeError(std::string(op) + ": " + dim + " mismatch (" + std::to_string(u) +
                             " vs " + std::to_string(v) + ")");
        }
    };
    check(x.b, y.b, "batch");
    check(x.c, y.c, "channel");
    check(x.h, y.h, "height");
    check(x.w, y.w, "width");
}

double softplus_value(double x) {
    return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}

double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor unary(const Tensor& x, Elementwise op) {
    require_defined(x, "elementwise", "operand");
    const bool track = tracks({&x});
    Tensor out = make_output(x.shape(), track);
    auto in = x.data();
    auto o = out.mutable_data();
    const std::size_t n = in.size();
    switch (op) {
        case Elementwise::sigmoid:
            for (std::size_t i = 0; i < n; ++i) o[i] = sigmoid_value(in[i]);
            break;
        case Elementwise::tanh:
            for (std::size_t i = 0; i < n; ++i) o[i] = std::tanh(in[i]);
            break;
        case Elementwise::exp:
            for (std::size_t i = 0; i < n; ++i) o[i] = std::exp(in[i]);
            break;
        case Elementwise::log:
            for (std::size_t i = 0; i < n; ++i) {
                if (!(in[i] > 0.0)) {
                    throw DomainError("log: non-positive value " + std::to_string(in[i]) +
                                      " at index " + std::to_string(i));
                }
                o[i] = std::log(in[i]);
            }
            break;
        case Elementwise::softplus:
            for (std::size_t i = 0; i < n; ++i) o[i] = softplus_value(in[i]);
            break;
        default:
            throw std::invalid_argument("elementwise: binary op given one operand");
    }
    if (!track) return out;
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::current().record(out, [xi, oi, op](std::span<const double> g) {
        if (!xi->requires_grad) return;
        auto& gx = xi->grad_buffer();
        const auto& y = oi->data;
        const auto& v = xi->data;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            double d = 0.0;
            switch (op) {
                case Elementwise::sigmoid: d = y[i] * (1.0 - y[i]); break;
                case Elementwise::tanh: d = 1.0 - y[i] * y[i]; break;
                case Elementwise::exp: d = y[i]; break;
                case Elementwise::log: d = 1.0 / v[i]; break;
                case Elementwise::softplus: d = sigmoid_value(v[i]); break;
                default: break;
            }
            gx[i] += g[i] * d;
        }
    });
    return out;
}

Tensor binary(const Tensor& a, const Tensor& b, Elementwise op) {
    require_defined(a, "elementwise", "lhs");
    require_defined(b, "elementwise", "rhs");
    require_same_shape(a, b, "elementwise");
    const bool track = tracks({&a, &b});
    Tensor out = make_output(a.shape(), track);
    auto x = a.data();
    auto y = b.data();
    auto o = out.mutable_data();
    const std::size_t n = x.size();
    switch (op) {
        case Elementwise::add:
            for (std::size_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
            break;
        case Elementwise::sub:
            for (std::size_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
            break;
        case Elementwise::mul:
            for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
            break;
        case Elementwise::div:
            for (std::size_t i = 0; i < n; ++i) {
                if (y[i] == 0.0) {
                    throw DomainError("div: zero divisor at index " + std::to_string(i));
                }
                o[i] = x[i] / y[i];
            }
            break;
        default:
            throw std::invalid_argument("elementwise: unary op given two operands");
    }
    if (!track) return out;
    auto ai = a.impl();
    auto bi = b.impl();
    Tape::current().record(out, [ai, bi, op](std::span<const double> g) {
        const std::size_t n = g.size();
        if (ai->requires_grad) {
            auto& ga = ai->grad_buffer();
            switch (op) {
                case Elementwise::add:
                case Elementwise::sub:
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                    break;
                case Elementwise::mul:
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bi->data[i];
                    break;
                case Elementwise::div:
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / bi->data[i];
                    break;
                default: break;
            }
        }
        if (bi->requires_grad) {
            auto& gb = bi->grad_buffer();
            switch (op) {
                case Elementwise::add:
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                    break;
                case Elementwise::sub:
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                    break;
                case Elementwise::mul:
                    for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ai->data[i];
                    break;
                case Elementwise::div:
                    for (std::size_t i = 0; i < n; ++i) {
                        const double d = bi->data[i];
                        gb[i] -= g[i] * ai->data[i] / (d * d);
                    }
                    break;
                default: break;
            }
        }
    });
    return out;
}

// Shared loop nest for the three convolution passes. For every
// (b, co, ci, ky, kx) it visits the valid output row segments and hands the
// callback contiguous output row, strided input row, and kernel tap.
struct ConvGeometry {
    Shape in;
    Shape out;
    std::uint32_t k;
    std::uint32_t stride;
    std::uint32_t pad;
};

ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, std::uint32_t stride,
                           std::uint32_t padding) {
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    if (kernel.h != kernel.w) {
        throw ShapeError("conv2d: kernel height " + std::to_string(kernel.h) +
                         " differs from kernel width " + std::to_string(kernel.w));
    }
    if (kernel.h % 2 == 0) {
        throw ShapeError("conv2d: kernel spatial extent " + std::to_string(kernel.h) +
                         " must be odd");
    }
    if (kernel.c != in.c) {
        throw ShapeError("conv2d: input channel mismatch (input has " + std::to_string(in.c) +
                         ", kernel expects " + std::to_string(kernel.c) + ")");
    }
    const std::int64_t hh = std::int64_t{in.h} + 2 * padding - kernel.h;
    const std::int64_t ww = std::int64_t{in.w} + 2 * padding - kernel.w;
    if (hh < 0) throw ShapeError("conv2d: height " + std::to_string(in.h) + " smaller than kernel");
    if (ww < 0) throw ShapeError("conv2d: width " + std::to_string(in.w) + " smaller than kernel");
    Shape out{in.b, kernel.b, static_cast<std::uint32_t>(hh / stride + 1),
              static_cast<std::uint32_t>(ww / stride + 1)};
    return ConvGeometry{in, out, kernel.h, stride, padding};
}

// Range of output columns whose input column ox*s - p + kx lies in [0, W).
inline void valid_cols(const ConvGeometry& g, std::uint32_t kx, std::int64_t& lo, std::int64_t& hi) {
    const std::int64_t off = std::int64_t{kx} - g.pad;
    const std::int64_t s = g.stride;
    lo = off >= 0 ? 0 : (-off + s - 1) / s;
    hi = (std::int64_t{g.in.w} - 1 - off);
    hi = hi < 0 ? -1 : hi / s;
    hi = std::min<std::int64_t>(hi, std::int64_t{g.out.w} - 1);
}

void conv_forward(const ConvGeometry& g, const double* in, const double* k, const double* bias,
                  double* out) {
    const std::size_t in_plane = g.in.plane();
    const std::size_t out_plane = g.out.plane();
    const std::uint32_t kk = g.k;
    for (std::uint32_t b = 0; b < g.in.b; ++b) {
        for (std::uint32_t co = 0; co < g.out.c; ++co) {
            double* op = out + (std::size_t{b} * g.out.c + co) * out_plane;
            std::fill(op, op + out_plane, bias ? bias[co] : 0.0);
            for (std::uint32_t ci = 0; ci < g.in.c; ++ci) {
                const double* ip = in + (std::size_t{b} * g.in.c + ci) * in_plane;
                const double* kp = k + (std::size_t{co} * g.in.c + ci) * kk * kk;
                for (std::uint32_t ky = 0; ky < kk; ++ky) {
                    for (std::uint32_t kx = 0; kx < kk; ++kx) {
                        const double wv = kp[ky * kk + kx];
                        if (wv == 0.0) continue;
                        std::int64_t lo, hi;
                        valid_cols(g, kx, lo, hi);
                        if (lo > hi) continue;
                        const std::int64_t off = std::int64_t{kx} - g.pad;
                        for (std::uint32_t oy = 0; oy < g.out.h; ++oy) {
                            const std::int64_t iy = std::int64_t{oy} * g.stride + ky - g.pad;
                            if (iy < 0 || iy >= g.in.h) continue;
                            double* orow = op + std::size_t{oy} * g.out.w;
                            const double* irow = ip + iy * g.in.w + off;
                            if (g.stride == 1) {
                                for (std::int64_t ox = lo; ox <= hi; ++ox) orow[ox] += wv * irow[ox];
                            } else {
                                for (std::int64_t ox = lo; ox <= hi; ++ox)
                                    orow[ox] += wv * irow[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv_backward(const ConvGeometry& g, const double* in, const double* k, const double* gout,
                   double* gin, double* gk, double* gbias) {
    const std::size_t in_plane = g.in.plane();
    const std::size_t out_plane = g.out.plane();
    const std::uint32_t kk = g.k;
    for (std::uint32_t b = 0; b < g.in.b; ++b) {
        for (std::uint32_t co = 0; co < g.out.c; ++co) {
            const double* gp = gout + (std::size_t{b} * g.out.c + co) * out_plane;
            if (gbias) {
                double acc = 0.0;
                for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
                gbias[co] += acc;
            }
            for (std::uint32_t ci = 0; ci < g.in.c; ++ci) {
                const double* ip = in + (std::size_t{b} * g.in.c + ci) * in_plane;
                double* gip = gin ? gin + (std::size_t{b} * g.in.c + ci) * in_plane : nullptr;
                const double* kp = k + (std::size_t{co} * g.in.c + ci) * kk * kk;
                double* gkp = gk ? gk + (std::size_t{co} * g.in.c + ci) * kk * kk : nullptr;
                for (std::uint32_t ky = 0; ky < kk; ++ky) {
                    for (std::uint32_t kx = 0; kx < kk; ++kx) {
                        const double wv = kp[ky * kk + kx];
                        std::int64_t lo, hi;
                        valid_cols(g, kx, lo, hi);
                        if (lo > hi) continue;
                        const std::int64_t off = std::int64_t{kx} - g.pad;
                        double acc = 0.0;
                        for (std::uint32_t oy = 0; oy < g.out.h; ++oy) {
                            const std::int64_t iy = std::int64_t{oy} * g.stride + ky - g.pad;
                            if (iy < 0 || iy >= g.in.h) continue;
                            const double* grow = gp + std::size_t{oy} * g.out.w;
                            const double* irow = ip + iy * g.in.w + off;
                            if (g.stride == 1) {
                                if (gkp) {
                                    for (std::int64_t ox = lo; ox <= hi; ++ox) acc += grow[ox] * irow[ox];
                                }
                                if (gip && wv != 0.0) {
                                    double* girow = gip + iy * g.in.w + off;
                                    for (std::int64_t ox = lo; ox <= hi; ++ox) girow[ox] += wv * grow[ox];
                                }
                            } else {
                                for (std::int64_t ox = lo; ox <= hi; ++ox) {
                                    acc += grow[ox] * irow[ox * g.stride];
                                }
                                if (gip && wv != 0.0) {
                                    double* girow = gip + iy * g.in.w + off;
                                    for (std::int64_t ox = lo; ox <= hi; ++ox)
                                        girow[ox * g.stride] += wv * grow[ox];
                                }
                            }
                        }
                        if (gkp) gkp[ky * kk + kx] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor elementwise(Elementwise op, std::span<const Tensor> operands) {
    const bool is_binary = op == Elementwise::add || op == Elementwise::sub ||
                           op == Elementwise::mul || op == Elementwise::div;
    const std::size_t expected = is_binary ? 2 : 1;
    if (operands.size() != expected) {
        throw std::invalid_argument("elementwise: expected " + std::to_string(expected) +
                                    " operands, got " + std::to_string(operands.size()));
    }
    return is_binary ? binary(operands[0], operands[1], op) : unary(operands[0], op);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::div); }
Tensor sigmoid(const Tensor& x) { return unary(x, Elementwise::sigmoid); }
Tensor tanh(const Tensor& x) { return unary(x, Elementwise::tanh); }
Tensor exp(const Tensor& x) { return unary(x, Elementwise::exp); }
Tensor log(const Tensor& x) { return unary(x, Elementwise::log); }
Tensor softplus(const Tensor& x) { return unary(x, Elementwise::softplus); }

Tensor affine(const Tensor& x, double a, double b) {
    require_defined(x, "affine", "operand");
    const bool track = tracks({&x});
    Tensor out = make_output(x.shape(), track);
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = a * in[i] + b;
    if (track) {
        auto xi = x.impl();
        Tape::current().record(out, [xi, a](std::span<const double> g) {
            if (!xi->requires_grad) return;
            auto& gx = xi->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += a * g[i];
        });
    }
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::uint32_t stride,
              std::uint32_t padding) {
    require_defined(input, "conv2d", "input");
    require_defined(kernel, "conv2d", "kernel");
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
    if (bias.defined() && !(bias.shape() == Shape{1, g.out.c, 1, 1})) {
        throw ShapeError("conv2d: bias shape " + bias.shape().str() + " does not match " +
                         std::to_string(g.out.c) + " output channels");
    }
    const bool track = tracks({&input, &kernel, &bias});
    Tensor out = make_output(g.out, track);
    conv_forward(g, input.data().data(), kernel.data().data(),
                 bias.defined() ? bias.data().data() : nullptr, out.mutable_data().data());
    if (track) {
        auto xi = input.impl();
        auto ki = kernel.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        Tape::current().record(out, [g, xi, ki, bi](std::span<const double> go) {
            double* gin = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
            double* gk = ki->requires_grad ? ki->grad_buffer().data() : nullptr;
            double* gb = (bi && bi->requires_grad) ? bi->grad_buffer().data() : nullptr;
            conv_backward(g, xi->data.data(), ki->data.data(), go.data(), gin, gk, gb);
        });
    }
    return out;
}

Tensor upsample_nearest(const Tensor& input, std::uint32_t factor) {
    require_defined(input, "upsample_nearest", "input");
    if (factor == 0) throw std::invalid_argument("upsample_nearest: factor must be positive");
    const Shape s = input.shape();
    const Shape os{s.b, s.c, s.h * factor, s.w * factor};
    const bool track = tracks({&input});
    Tensor out = make_output(os, track);
    auto in = input.data();
    auto o = out.mutable_data();
    for (std::size_t p = 0; p < std::size_t{s.b} * s.c; ++p) {
        for (std::uint32_t y = 0; y < os.h; ++y) {
            const double* irow = in.data() + p * s.plane() + (y / factor) * s.w;
            double* orow = o.data() + p * os.plane() + std::size_t{y} * os.w;
            for (std::uint32_t x = 0; x < os.w; ++x) orow[x] = irow[x / factor];
        }
    }
    if (track) {
        auto xi = input.impl();
        Tape::current().record(out, [xi, s, os, factor](std::span<const double> g) {
            if (!xi->requires_grad) return;
            auto& gx = xi->grad_buffer();
            for (std::size_t p = 0; p < std::size_t{s.b} * s.c; ++p) {
                for (std::uint32_t y = 0; y < os.h; ++y) {
                    double* grow = gx.data() + p * s.plane() + (y / factor) * s.w;
                    const double* orow = g.data() + p * os.plane() + std::size_t{y} * os.w;
                    for (std::uint32_t x = 0; x < os.w; ++x) grow[x / factor] += orow[x];
                }
            }
        });
    }
    return out;
}

Tensor softmax_channel(const Tensor& input) {
    require_defined(input, "softmax_channel", "input");
    const Shape s = input.shape();
    if (s.c < 2) throw ShapeError("softmax_channel: channel count " + std::to_string(s.c) + " < 2");
    const bool track = tracks({&input});
    Tensor out = make_output(s, track);
    auto in = input.data();
    auto o = out.mutable_data();
    const std::size_t plane = s.plane();
    for (std::uint32_t b = 0; b < s.b; ++b) {
        const std::size_t base = std::size_t{b} * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            double mx = in[base + p];
            for (std::uint32_t c = 1; c < s.c; ++c) mx = std::max(mx, in[base + c * plane + p]);
            double z = 0.0;
            for (std::uint32_t c = 0; c < s.c; ++c) {
                const double e = std::exp(in[base + c * plane + p] - mx);
                o[base + c * plane + p] = e;
                z += e;
            }
            for (std::uint32_t c = 0; c < s.c; ++c) o[base + c * plane + p] /= z;
        }
    }
    if (track) {
        auto xi = input.impl();
        auto oi = out.impl();
        Tape::current().record(out, [xi, oi, s](std::span<const double> g) {
            if (!xi->requires_grad) return;
            auto& gx = xi->grad_buffer();
            const auto& y = oi->data;
            const std::size_t plane = s.plane();
            for (std::uint32_t b = 0; b < s.b; ++b) {
                const std::size_t base = std::size_t{b} * s.c * plane;
                for (std::size_t p = 0; p < plane; ++p) {
                    double dot = 0.0;
                    for (std::uint32_t c = 0; c < s.c; ++c) {
                        const std::size_t i = base + c * plane + p;
                        dot += g[i] * y[i];
                    }
                    for (std::uint32_t c = 0; c < s.c; ++c) {
                        const std::size_t i = base + c * plane + p;
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_defined(a, "concat_channels", "lhs");
    require_defined(b, "concat_channels", "rhs");
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    if (sa.b != sb.b) throw ShapeError("concat_channels: batch mismatch");
    if (sa.h != sb.h) throw ShapeError("concat_channels: height mismatch");
    if (sa.w != sb.w) throw ShapeError("concat_channels: width mismatch");
    const Shape os{sa.b, sa.c + sb.c, sa.h, sa.w};
    const bool track = tracks({&a, &b});
    Tensor out = make_output(os, track);
    auto o = out.mutable_data();
    const std::size_t na = std::size_t{sa.c} * sa.plane();
    const std::size_t nb = std::size_t{sb.c} * sb.plane();
    for (std::uint32_t n = 0; n < sa.b; ++n) {
        std::copy_n(a.data().data() + n * na, na, o.data() + n * (na + nb));
        std::copy_n(b.data().data() + n * nb, nb, o.data() + n * (na + nb) + na);
    }
    if (track) {
        auto ai = a.impl();
        auto bi = b.impl();
        const std::uint32_t batch = sa.b;
        Tape::current().record(out, [ai, bi, na, nb, batch](std::span<const double> g) {
            for (std::uint32_t n = 0; n < batch; ++n) {
                const double* gp = g.data() + n * (na + nb);
                if (ai->requires_grad) {
                    double* ga = ai->grad_buffer().data() + n * na;
                    for (std::size_t i = 0; i < na; ++i) ga[i] += gp[i];
                }
                if (bi->requires_grad) {
                    double* gb = bi->grad_buffer().data() + n * nb;
                    for (std::size_t i = 0; i < nb; ++i) gb[i] += gp[na + i];
                }
            }
        });
    }
    return out;
}

Tensor slice_channels(const Tensor& input, std::uint32_t begin, std::uint32_t count) {
    require_defined(input, "slice_channels", "input");
    const Shape s = input.shape();
    if (count == 0 || begin + count > s.c) {
        throw ShapeError("slice_channels: channel range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + std::to_string(s.c) +
                         " channels");
    }
    const Shape os{s.b, count, s.h, s.w};
    const bool track = tracks({&input});
    Tensor out = make_output(os, track);
    const std::size_t plane = s.plane();
    for (std::uint32_t n = 0; n < s.b; ++n) {
        std::copy_n(input.data().data() + (std::size_t{n} * s.c + begin) * plane, count * plane,
                    out.mutable_data().data() + std::size_t{n} * count * plane);
    }
    if (track) {
        auto xi = input.impl();
        Tape::current().record(out, [xi, s, begin, count](std::span<const double> g) {
            if (!xi->requires_grad) return;
            auto& gx = xi->grad_buffer();
            const std::size_t plane = s.plane();
            for (std::uint32_t n = 0; n < s.b; ++n) {
                double* dst = gx.data() + (std::size_t{n} * s.c + begin) * plane;
                const double* src = g.data() + std::size_t{n} * count * plane;
                for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor expand_channels(const Tensor& input, std::uint32_t channels) {
    require_defined(input, "expand_channels", "input");
    const Shape s = input.shape();
    if (s.c != 1) throw ShapeError("expand_channels: input has " + std::to_string(s.c) + " channels, expected 1");
    const Shape os{s.b, channels, s.h, s.w};
    const bool track = tracks({&input});
    Tensor out = make_output(os, track);
    const std::size_t plane = s.plane();
    for (std::uint32_t n = 0; n < s.b; ++n) {
        for (std::uint32_t c = 0; c < channels; ++c) {
            std::copy_n(input.data().data() + n * plane, plane,
                        out.mutable_data().data() + (std::size_t{n} * channels + c) * plane);
        }
    }
    if (track) {
        auto xi = input.impl();
        Tape::current().record(out, [xi, s, channels](std::span<const double> g) {
            if (!xi->requires_grad) return;
            auto& gx = xi->grad_buffer();
            const std::size_t plane = s.plane();
            for (std::uint32_t n = 0; n < s.b; ++n) {
                for (std::uint32_t c = 0; c < channels; ++c) {
                    const double* src = g.data() + (std::size_t{n} * channels + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) gx[n * plane + i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    require_defined(x, "sum", "operand");
    const bool track = tracks({&x});
    Tensor out = make_output(Shape{1, 1, 1, 1}, track);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.mutable_data()[0] = acc;
    if (track) {
        auto xi = x.impl();
        Tape::current().record(out, [xi](std::span<const double> g) {
            if (!xi->requires_grad) return;
            for (double& v : xi->grad_buffer()) v += g[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor cross_entropy_channel(const Tensor& logits, std::span<const std::uint8_t> targets,
                             std::span<const double> class_weights) {
    require_defined(logits, "cross_entropy_channel", "logits");
    const Shape s = logits.shape();
    const std::size_t plane = s.plane();
    if (targets.size() != std::size_t{s.b} * plane) {
        throw ShapeError("cross_entropy_channel: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(std::size_t{s.b} * plane) + " cells");
    }
    if (class_weights.size() != s.c) {
        throw ShapeError("cross_entropy_channel: " + std::to_string(class_weights.size()) +
                         " class weights for " + std::to_string(s.c) + " channels");
    }
    const bool track = tracks({&logits});
    Tensor out = make_output(Shape{1, 1, 1, 1}, track);
    auto in = logits.data();
    std::vector<double> probs(in.size());
    double total = 0.0;
    double weight_sum = 0.0;
    for (std::uint32_t b = 0; b < s.b; ++b) {
        const std::size_t base = std::size_t{b} * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            const std::uint8_t y = targets[b * plane + p];
            if (y >= s.c) throw std::out_of_range("cross_entropy_channel: target class out of range");
            double mx = in[base + p];
            for (std::uint32_t c = 1; c < s.c; ++c) mx = std::max(mx, in[base + c * plane + p]);
            double z = 0.0;
            for (std::uint32_t c = 0; c < s.c; ++c) z += std::exp(in[base + c * plane + p] - mx);
            for (std::uint32_t c = 0; c < s.c; ++c) {
                probs[base + c * plane + p] = std::exp(in[base + c * plane + p] - mx) / z;
            }
            const double logp = in[base + y * plane + p] - mx - std::log(z);
            total -= class_weights[y] * logp;
            weight_sum += class_weights[y];
        }
    }
    out.mutable_data()[0] = weight_sum > 0.0 ? total / weight_sum : 0.0;
    if (track && weight_sum > 0.0) {
        auto xi = logits.impl();
        std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
        std::vector<double> cw(class_weights.begin(), class_weights.end());
        Tape::current().record(out, [xi, s, probs = std::move(probs), tgt = std::move(tgt),
                                     cw = std::move(cw), weight_sum](std::span<const double> g) {
            if (!xi->requires_grad) return;
            auto& gx = xi->grad_buffer();
            const std::size_t plane = s.plane();
            for (std::uint32_t b = 0; b < s.b; ++b) {
                const std::size_t base = std::size_t{b} * s.c * plane;
                for (std::size_t p = 0; p < plane; ++p) {
                    const std::uint8_t y = tgt[b * plane + p];
                    const double scale = g[0] * cw[y] / weight_sum;
                    for (std::uint32_t c = 0; c < s.c; ++c) {
                        const std::size_t i = base + c * plane + p;
                        gx[i] += scale * (probs[i] - (c == y ? 1.0 : 0.0));
                    }
                }
            }
        });
    }
    return out;
}

namespace {

Tensor masked_regression(const Tensor& pred, const Tensor& target, const Tensor& mask, bool squared) {
    const char* op = squared ? "masked_l2" : "masked_l1";
    require_defined(pred, op, "pred");
    require_defined(target, op, "target");
    require_defined(mask, op, "mask");
    require_same_shape(pred, target, op);
    const Shape s = pred.shape();
    const Shape ms = mask.shape();
    if (ms.c != 1 || ms.b != s.b || ms.h != s.h || ms.w != s.w) {
        throw ShapeError(std::string(op) + ": mask shape " + ms.str() + " incompatible with " + s.str());
    }
    const bool track = tracks({&pred, &target});
    Tensor out = make_output(Shape{1, 1, 1, 1}, track);
    const std::size_t plane = s.plane();
    double count = 0.0;
    double acc = 0.0;
    for (std::uint32_t b = 0; b < s.b; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
            if (mask.data()[b * plane + p] == 0.0) continue;
            for (std::uint32_t c = 0; c < s.c; ++c) {
                const std::size_t i = (std::size_t{b} * s.c + c) * plane + p;
                const double d = pred.data()[i] - target.data()[i];
                acc += squared ? d * d : std::abs(d);
                count += 1.0;
            }
        }
    }
    out.mutable_data()[0] = count > 0.0 ? acc / count : 0.0;
    if (track && count > 0.0) {
        auto pi = pred.impl();
        auto ti = target.impl();
        auto mi = mask.impl();
        Tape::current().record(out, [pi, ti, mi, s, count, squared](std::span<const double> g) {
            const std::size_t plane = s.plane();
            for (std::uint32_t b = 0; b < s.b; ++b) {
                for (std::size_t p = 0; p < plane; ++p) {
                    if (mi->data[b * plane + p] == 0.0) continue;
                    for (std::uint32_t c = 0; c < s.c; ++c) {
                        const std::size_t i = (std::size_t{b} * s.c + c) * plane + p;
                        const double d = pi->data[i] - ti->data[i];
                        const double slope = squared ? 2.0 * d : (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                        const double gv = g[0] * slope / count;
                        if (pi->requires_grad) pi->grad_buffer()[i] += gv;
                        if (ti->requires_grad) ti->grad_buffer()[i] -= gv;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor masked_l1(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    return masked_regression(pred, target, mask, false);
}

Tensor masked_l2(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    return masked_regression(pred, target, mask, true);
}

}  // namespace sflow
