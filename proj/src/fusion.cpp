#include "sflow/fusion.hpp"

#include <cstdlib>

namespace sflow {

std::string to_string(Modality m) {
    switch (m) {
        case Modality::lidar: return "lidar";
        case Modality::camera: return "camera";
        case Modality::fused: return "fused";
    }
    return "unknown";
}

Modality parse_modality(const std::string& s) {
    if (s == "lidar") return Modality::lidar;
    if (s == "camera") return Modality::camera;
    if (s == "fused") return Modality::fused;
    throw std::invalid_argument("unknown modality: " + s);
}

FusionParams FusionParams::make(std::uint32_t channels, bool weight_tying, std::mt19937_64& rng) {
    FusionParams p;
    p.implicit_encoder = make_resample_conv(ResampleFactor::down4, channels, channels, rng);
    p.state_head = Conv::same(channels, 2, 3, rng);
    p.measurement_head = Conv::same(channels, 2, 3, rng);
    p.observation_path = SpatialGruParams::make(channels, weight_tying, rng);
    p.prediction_path = SpatialGruParams::make(channels, weight_tying, rng);
    p.trust_gate = Conv::make(2 * channels, 2, 1, 1, 0, rng);
    return p;
}

void FusionParams::collect(ParamList& out, const std::string& prefix) const {
    implicit_encoder.collect(out, prefix + ".implicit_encoder");
    state_head.collect(out, prefix + ".state_head");
    measurement_head.collect(out, prefix + ".measurement_head");
    observation_path.collect(out, prefix + ".observation_path");
    prediction_path.collect(out, prefix + ".prediction_path");
    trust_gate.collect(out, prefix + ".trust_gate");
}

Tensor implicit_encode(const FusionParams& params, const Tensor& feature) {
    return tanh(resample(feature, ResampleFactor::down4, params.implicit_encoder));
}

DistributionPair distribution_head(const FusionParams& params, const Tensor& features,
                                   DistributionBranch branch) {
    const Conv& head = branch == DistributionBranch::state ? params.state_head : params.measurement_head;
    const Tensor out = head(features);
    DistributionPair d;
    d.mean = slice_channels(out, 0, 1);
    d.variance = affine(softplus(slice_channels(out, 1, 1)), 1.0, kVarianceFloor);
    return d;
}

Tensor kld_loss(const DistributionPair& p, const DistributionPair& q) {
    for (const Tensor* v : {&p.variance, &q.variance}) {
        for (std::size_t i = 0; i < v->numel(); ++i) {
            if (!((*v)[i] > 0.0)) {
                throw DomainError("kld_loss: non-positive variance at index " + std::to_string(i));
            }
        }
    }
    // log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2, with s^2 = variance.
    const Tensor diff = sub(p.mean, q.mean);
    const Tensor log_ratio = scale(sub(log(q.variance), log(p.variance)), 0.5);
    const Tensor quad = div(add(p.variance, mul(diff, diff)), scale(q.variance, 2.0));
    return mean(affine(add(log_ratio, quad), 1.0, -0.5));
}

UpdateResult ode_update(const FusionParams& params, const GruOdeState& state,
                        const StampedObservation& observation, const FusionOptions& options) {
    if (observation.timestamp < state.clock) {
        throw OutOfOrderObservation("ode_update: observation at " +
                                    std::to_string(observation.timestamp.count) +
                                    " us precedes state clock " + std::to_string(state.clock.count) +
                                    " us");
    }
    const Tensor& m = observation.feature;
    const Tensor& h = state.h;
    const Tensor from_obs = gru_discrete_step(params.observation_path, m, h);
    const Tensor from_pred = gru_discrete_step(params.prediction_path, h, m);
    const Tensor weights = softmax_channel(params.trust_gate(concat_channels(from_obs, from_pred)));
    const std::uint32_t channels = h.shape().c;
    const Tensor mixed = add(mul(expand_channels(slice_channels(weights, 0, 1), channels), from_obs),
                             mul(expand_channels(slice_channels(weights, 1, 1), channels), from_pred));

    const DistributionPair prior = distribution_head(params, h, DistributionBranch::state);
    DistributionPair meas = distribution_head(params, m, DistributionBranch::measurement);
    if (options.kld_state_only) meas = DistributionPair{meas.mean.detach(), meas.variance.detach()};

    UpdateResult result;
    result.state = GruOdeState{mixed, observation.timestamp};
    result.kld = kld_loss(prior, meas);
    result.trust = weights;
    return result;
}

StampedObservation sync_fusion_baseline(const Conv& fusion_conv, const StampedObservation& lidar,
                                        const StampedObservation& camera) {
    const std::int64_t gap = std::llabs((lidar.timestamp - camera.timestamp).count);
    if (gap > kSyncTolerance.count) {
        throw std::invalid_argument("sync_fusion_baseline: timestamps differ by " +
                                    std::to_string(gap) + " us (tolerance 1000 us)");
    }
    const Shape& a = lidar.feature.shape();
    const Shape& b = camera.feature.shape();
    if (a.h != b.h || a.w != b.w) {
        throw ShapeError("sync_fusion_baseline: spatial extents " + a.str() + " vs " + b.str());
    }
    StampedObservation out;
    out.timestamp = lidar.timestamp;
    out.modality = Modality::fused;
    out.feature = fusion_conv(concat_channels(lidar.feature, camera.feature));
    return out;
}

}  // namespace sflow
