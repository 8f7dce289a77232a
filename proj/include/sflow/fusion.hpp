#pragma once

#include <random>
#include <stdexcept>

#include "sflow/gru_ode.hpp"
#include "sflow/layers.hpp"
#include "sflow/observation.hpp"

namespace sflow {

/// An observation arrived with a timestamp earlier than the state clock.
class OutOfOrderObservation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-cell univariate Gaussians, mean and variance both (B, 1, H, W).
struct DistributionPair {
    Tensor mean;
    Tensor variance;
};

enum class DistributionBranch { state, measurement };

struct FusionParams {
    Conv implicit_encoder;  // (C, H, W) -> (C, H/4, W/4)
    Conv state_head;        // C -> (mean, variance logit)
    Conv measurement_head;
    SpatialGruParams observation_path;  // x = observation, h = state
    SpatialGruParams prediction_path;   // x = state, h = observation
    Conv trust_gate;                    // 1x1 over concat(paths) -> 2 logits

    static FusionParams make(std::uint32_t channels, bool weight_tying, std::mt19937_64& rng);
    void collect(ParamList& out, const std::string& prefix) const;
};

struct FusionOptions {
    /// Stop the KLD gradient at the measurement branch.
    bool kld_state_only = false;
};

/// Strided-conv down-mapping followed by tanh, which keeps encoded
/// observations inside [-1, 1] like the hidden state.
Tensor implicit_encode(const FusionParams& params, const Tensor& feature);

constexpr double kVarianceFloor = 1e-6;

DistributionPair distribution_head(const FusionParams& params, const Tensor& features,
                                   DistributionBranch branch);

/// Mean over cells of KL(N(m1, v1) || N(m2, v2)).
Tensor kld_loss(const DistributionPair& state, const DistributionPair& measurement);

struct UpdateResult {
    GruOdeState state;
    Tensor kld;
    Tensor trust;  // (B, 2, H, W) softmax weights: observation path, prediction path
};

/// Folds an encoded observation into a state already propagated to (or
/// before) the observation time. Ignores the modality tag.
UpdateResult ode_update(const FusionParams& params, const GruOdeState& state,
                        const StampedObservation& observation, const FusionOptions& options = {});

/// Synchronized channel-concat fusion of two full-resolution features.
/// Throws std::invalid_argument when timestamps differ by more than 1 ms.
StampedObservation sync_fusion_baseline(const Conv& fusion_conv, const StampedObservation& lidar,
                                        const StampedObservation& camera);

constexpr Micros kSyncTolerance{1000};

}  // namespace sflow
