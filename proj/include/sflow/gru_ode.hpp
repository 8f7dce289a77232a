#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sflow/layers.hpp"
#include "sflow/tensor.hpp"
#include "sflow/time.hpp"

namespace sflow {

/// Convolutional GRU weights. With weight tying the input and state kernels
/// of both gates share one tensor and the two gate biases share one tensor.
struct SpatialGruParams {
    Conv w_r, u_r;
    Conv w_z, u_z;
    Conv w_h, u_h;
    /// Extra conv+tanh layers of the candidate CNN block (empty = single conv).
    std::vector<Conv> candidate_extra;
    bool weight_tying = true;

    static SpatialGruParams make(std::uint32_t channels, bool weight_tying, std::mt19937_64& rng,
                                 std::uint32_t kernel = 3, std::uint32_t candidate_depth = 1);
    /// All kernels and biases zero (tying structure preserved).
    static SpatialGruParams zeros(std::uint32_t channels, bool weight_tying,
                                  std::uint32_t kernel = 3);

    std::uint32_t channels() const { return w_h.out_channels(); }
    void collect(ParamList& out, const std::string& prefix) const;
};

/// Gate values; `g` is the candidate state.
struct Gates {
    Tensor r;
    Tensor z;
    Tensor g;
};

/// Test hook: replaces individual gate outputs with fixed tensors.
struct GateOverride {
    std::optional<Tensor> r;
    std::optional<Tensor> z;
    std::optional<Tensor> g;
};

Gates gru_gates(const SpatialGruParams& params, const Tensor& x, const Tensor& h,
                const GateOverride* override_gates = nullptr);

/// h' = z*h + (1-z)*g
Tensor gru_discrete_step(const SpatialGruParams& params, const Tensor& x, const Tensor& h,
                         const GateOverride* override_gates = nullptr);

/// dh/dt = (1-z)*(g-h)
Tensor gru_derivative(const SpatialGruParams& params, const Tensor& x, const Tensor& h,
                      const GateOverride* override_gates = nullptr);

enum class SolverMethod { euler, midpoint };
enum class StepMode { fixed, variable };

struct SolverConfig {
    SolverMethod method = SolverMethod::euler;
    StepMode step_mode = StepMode::fixed;
    Micros fixed_step = Micros(100'000);
    Micros min_step = Micros(1);

    /// Throws std::invalid_argument when a step size is non-positive.
    void validate() const;
};

std::string to_string(SolverMethod m);
std::string to_string(StepMode m);
SolverMethod parse_solver_method(const std::string& s);

struct GruOdeState {
    Tensor h;
    Micros clock;
};

/// One solver step of length dt. Midpoint re-evaluates the derivative at the
/// half step with the same input x.
GruOdeState ode_step(const SolverConfig& solver, const SpatialGruParams& params, const Tensor& x,
                     const GruOdeState& state, Micros dt,
                     const GateOverride* override_gates = nullptr);

}  // namespace sflow
