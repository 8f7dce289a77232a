#include "sflow/gru_ode.hpp"

#include <stdexcept>

namespace sflow {
namespace {

Conv without_bias(Conv c) {
    c.bias = Tensor();
    return c;
}

// W x + U h (+ bias). Tied kernels share storage, so W (x + h) is the same
// sum computed with one convolution.
Tensor gate_preactivation(const Conv& w, const Conv& u, const Tensor& x, const Tensor& h,
                          bool tied) {
    if (tied) return w(add(x, h));
    return add(w(x), u(h));
}

void require_state_shape(const Tensor& x, const Tensor& h, std::uint32_t channels) {
    if (!(x.shape() == h.shape())) {
        throw ShapeError("gru: input " + x.shape().str() + " and state " + h.shape().str() +
                         " differ");
    }
    if (x.shape().c != channels) {
        throw ShapeError("gru: channel mismatch (tensor has " + std::to_string(x.shape().c) +
                         ", cell expects " + std::to_string(channels) + ")");
    }
}

}  // namespace

SpatialGruParams SpatialGruParams::make(std::uint32_t channels, bool weight_tying,
                                        std::mt19937_64& rng, std::uint32_t kernel,
                                        std::uint32_t candidate_depth) {
    SpatialGruParams p;
    p.weight_tying = weight_tying;
    p.w_r = Conv::same(channels, channels, kernel, rng);
    p.w_z = Conv::same(channels, channels, kernel, rng);
    if (weight_tying) {
        p.w_z.bias = p.w_r.bias;
        p.u_r = without_bias(p.w_r);
        p.u_z = without_bias(p.w_z);
    } else {
        p.u_r = without_bias(Conv::same(channels, channels, kernel, rng));
        p.u_z = without_bias(Conv::same(channels, channels, kernel, rng));
    }
    p.w_h = Conv::same(channels, channels, kernel, rng);
    p.u_h = without_bias(Conv::same(channels, channels, kernel, rng));
    for (std::uint32_t i = 1; i < candidate_depth; ++i) {
        p.candidate_extra.push_back(Conv::same(channels, channels, kernel, rng));
    }
    return p;
}

SpatialGruParams SpatialGruParams::zeros(std::uint32_t channels, bool weight_tying,
                                         std::uint32_t kernel) {
    SpatialGruParams p;
    p.weight_tying = weight_tying;
    const std::uint32_t pad = kernel / 2;
    p.w_r = Conv::zeros(channels, channels, kernel, 1, pad);
    p.w_z = Conv::zeros(channels, channels, kernel, 1, pad);
    if (weight_tying) {
        p.w_z.bias = p.w_r.bias;
        p.u_r = without_bias(p.w_r);
        p.u_z = without_bias(p.w_z);
    } else {
        p.u_r = without_bias(Conv::zeros(channels, channels, kernel, 1, pad));
        p.u_z = without_bias(Conv::zeros(channels, channels, kernel, 1, pad));
    }
    p.w_h = Conv::zeros(channels, channels, kernel, 1, pad);
    p.u_h = without_bias(Conv::zeros(channels, channels, kernel, 1, pad));
    return p;
}

void SpatialGruParams::collect(ParamList& out, const std::string& prefix) const {
    w_r.collect(out, prefix + ".w_r");
    w_z.collect(out, prefix + ".w_z");
    u_r.collect(out, prefix + ".u_r");
    u_z.collect(out, prefix + ".u_z");
    w_h.collect(out, prefix + ".w_h");
    u_h.collect(out, prefix + ".u_h");
    for (std::size_t i = 0; i < candidate_extra.size(); ++i) {
        candidate_extra[i].collect(out, prefix + ".cand" + std::to_string(i + 1));
    }
}

Gates gru_gates(const SpatialGruParams& params, const Tensor& x, const Tensor& h,
                const GateOverride* override_gates) {
    require_state_shape(x, h, params.channels());
    const bool tied = params.weight_tying;
    Gates out;
    if (override_gates && override_gates->r) {
        out.r = *override_gates->r;
    } else {
        out.r = sigmoid(gate_preactivation(params.w_r, params.u_r, x, h, tied));
    }
    if (override_gates && override_gates->z) {
        out.z = *override_gates->z;
    } else {
        out.z = sigmoid(gate_preactivation(params.w_z, params.u_z, x, h, tied));
    }
    if (override_gates && override_gates->g) {
        out.g = *override_gates->g;
    } else {
        Tensor pre = add(params.w_h(x), params.u_h(mul(out.r, h)));
        for (const Conv& layer : params.candidate_extra) pre = layer(tanh(pre));
        out.g = tanh(pre);
    }
    return out;
}

Tensor gru_discrete_step(const SpatialGruParams& params, const Tensor& x, const Tensor& h,
                         const GateOverride* override_gates) {
    const Gates gates = gru_gates(params, x, h, override_gates);
    return add(mul(gates.z, h), mul(one_minus(gates.z), gates.g));
}

Tensor gru_derivative(const SpatialGruParams& params, const Tensor& x, const Tensor& h,
                      const GateOverride* override_gates) {
    const Gates gates = gru_gates(params, x, h, override_gates);
    return mul(one_minus(gates.z), sub(gates.g, h));
}

void SolverConfig::validate() const {
    if (step_mode == StepMode::fixed && fixed_step.count <= 0) {
        throw std::invalid_argument("SolverConfig: fixed step must be positive");
    }
    if (min_step.count <= 0) throw std::invalid_argument("SolverConfig: min_step must be positive");
}

std::string to_string(SolverMethod m) { return m == SolverMethod::euler ? "euler" : "midpoint"; }
std::string to_string(StepMode m) { return m == StepMode::fixed ? "fixed" : "variable"; }

SolverMethod parse_solver_method(const std::string& s) {
    if (s == "euler") return SolverMethod::euler;
    if (s == "midpoint") return SolverMethod::midpoint;
    throw std::invalid_argument("unknown solver method: " + s);
}

GruOdeState ode_step(const SolverConfig& solver, const SpatialGruParams& params, const Tensor& x,
                     const GruOdeState& state, Micros dt, const GateOverride* override_gates) {
    if (dt.count <= 0) {
        throw std::invalid_argument("ode_step: dt must be positive (got " +
                                    std::to_string(dt.count) + " us)");
    }
    const double step = dt.seconds();
    const Tensor slope = gru_derivative(params, x, state.h, override_gates);
    GruOdeState next;
    next.clock = state.clock + dt;
    if (solver.method == SolverMethod::euler) {
        next.h = add(state.h, scale(slope, step));
    } else {
        const Tensor half = add(state.h, scale(slope, 0.5 * step));
        const Tensor mid_slope = gru_derivative(params, x, half, override_gates);
        next.h = add(state.h, scale(mid_slope, step));
    }
    return next;
}

}  // namespace sflow
