#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <tuple>
#include <vector>

#include "sflow/frame.hpp"

namespace sflow {

struct IouCounts {
    std::size_t intersection = 0;
    std::size_t union_ = 0;

    /// 1 when both masks are empty.
    double value() const { return union_ == 0 ? 1.0 : static_cast<double>(intersection) / union_; }
    IouCounts& operator+=(const IouCounts& o) {
        intersection += o.intersection;
        union_ += o.union_;
        return *this;
    }
};

/// Masks are nonzero = set. Throws std::invalid_argument on size mismatch.
IouCounts iou_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Foreground (id > 0) occupancy of a frame.
std::vector<std::uint8_t> foreground(const InstanceFrame& f);

struct FrameTally {
    std::vector<std::pair<std::int32_t, std::int32_t>> matches;  // (pred id, gt id)
    double iou_sum = 0.0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    std::size_t tp() const { return matches.size(); }
    /// Panoptic quality of this frame; 1 for a frame with no instances at all.
    double pq() const;
};

struct PanopticResult {
    double vpq = 1.0;
    double pq = 1.0;
    double sq = 1.0;
    double rq = 1.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::vector<FrameTally> frames;
};

/// Pairs with IoU > 0.5 across the instances of one frame.
std::vector<std::tuple<std::int32_t, std::int32_t, double>> candidate_matches(const InstanceFrame& pred,
                                                                              const InstanceFrame& gt);

/// Video panoptic quality over aligned sequences. A pair counts as a TP
/// only while it agrees with earlier matches of both its tracks; a pair
/// that contradicts one becomes FP + FN. VPQ averages the per-frame
/// quotient over frames that contain at least one instance.
PanopticResult vpq(const std::vector<InstanceFrame>& pred, const std::vector<InstanceFrame>& gt);

}  // namespace sflow
