#pragma once

#include <string>

#include "sflow/tensor.hpp"
#include "sflow/time.hpp"

namespace sflow {

/// Sensor modality. Declaration order is the tie-break order for
/// observations that share a timestamp.
enum class Modality { lidar = 0, camera = 1, fused = 2 };

std::string to_string(Modality m);
Modality parse_modality(const std::string& s);

struct StampedObservation {
    Micros timestamp;
    Modality modality = Modality::lidar;
    Tensor feature;
};

}  // namespace sflow
