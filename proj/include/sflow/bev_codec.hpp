#pragma once

#include <filesystem>
#include <random>
#include <vector>

#include "sflow/frame.hpp"
#include "sflow/layers.hpp"
#include "sflow/observation.hpp"

namespace sflow {

/// Toy per-modality encoders and the shared decoder trunk with its heads.
struct CodecParams {
    Conv lidar_in, lidar_out;
    Conv camera_in, camera_out;
    Conv decoder_up;  // implicit decoder: nearest x4, then this conv
    Conv trunk;
    Conv seg_head, center_head, offset_head, flow_head;

    static CodecParams make(std::uint32_t channels, std::mt19937_64& rng);
    std::uint32_t channels() const { return trunk.out_channels(); }
    void collect(ParamList& out, const std::string& prefix) const;
};

/// (B, 1, H, W) raw sensor grid -> (B, C, H, W). Fused grids are not raw
/// sensor data and are rejected.
Tensor encode_modality(const CodecParams& params, const Tensor& raw, Modality modality);

struct DecodedFrame {
    Tensor seg_logits;  // (B, 2, H, W): background, foreground
    Tensor centerness;  // (B, 1, H, W) in (0, 1)
    Tensor offset;      // (B, 2, H, W) cells towards the instance centre
    Tensor flow;        // (B, 2, H, W) cells per label interval
};

DecodedFrame decode(const CodecParams& params, const Tensor& state);

struct Targets {
    Micros timestamp;
    std::vector<std::uint8_t> seg;  // H*W class indices
    Tensor centerness;              // (1, 1, H, W)
    Tensor offset;                  // (1, 2, H, W)
    Tensor flow;                    // (1, 2, H, W)
    Tensor foreground;              // (1, 1, H, W) 0/1 mask
};

constexpr double kCenternessSigma = 3.0;

/// Instance centre = mean cell position. Centerness is the max over
/// instances of a Gaussian splat at the centre.
Targets make_targets(const InstanceFrame& gt, double sigma = kCenternessSigma);

enum class RegressionLoss { l1, l2 };

struct LossWeights {
    double seg = 1.0;
    double spatial = 1.0;
    double kld = 1.0;
    double foreground_class_weight = 2.0;
    RegressionLoss regression = RegressionLoss::l1;
    /// When defined, (1, 3, 1, 1) learned log-variances s_i; each term
    /// becomes exp(-s_i) * L_i + s_i and the fixed weights are ignored.
    Tensor log_vars;

    bool uncertainty() const { return log_vars.defined(); }
};

struct LossBreakdown {
    Tensor total;
    double seg = 0.0;
    double spatial = 0.0;
    double kld = 0.0;
    double total_value = 0.0;
};

/// Sums per-frame segmentation and spatial terms over the labelled frames.
/// Centerness regresses over every cell; offset and flow over foreground.
LossBreakdown total_loss(const std::vector<DecodedFrame>& decoded, const std::vector<Targets>& targets,
                         const Tensor& kld_total, const LossWeights& weights);

struct PostprocessConfig {
    double threshold = 0.1;
    std::uint32_t nms_radius = 2;
};

/// Centerness local maxima above the threshold become centres; each
/// foreground cell joins the centre nearest to where its offset points.
/// Returns ids 1..K in centre raster order and flow masked to foreground.
InstanceFrame instance_postprocess(const DecodedFrame& frame, Micros timestamp, const PostprocessConfig& config = {},
                                   std::uint32_t batch = 0);

/// Re-labels frames[1..] so ids follow their flow-warped predecessor:
/// greedy nearest matching between warped centres and current centres
/// within `max_distance` cells. Unmatched instances get fresh ids.
/// Flow is per `label_interval`, frames may be spaced arbitrarily.
void link_instances(std::vector<InstanceFrame>& frames, Micros label_interval, double max_distance = 6.0);

/// PGM + JSON sidecar per field: fg probability, centerness, offset and
/// flow components (8-bit, value = pixel * scale + offset), instance ids
/// (16-bit).
void export_frame(const DecodedFrame& frame, const InstanceFrame& instances, const std::filesystem::path& dir,
                  const std::string& stem);

}  // namespace sflow
