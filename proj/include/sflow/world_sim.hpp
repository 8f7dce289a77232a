#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sflow/frame.hpp"
#include "sflow/observation.hpp"

namespace sflow {

/// From `start_s` on, the agent follows this speed and yaw rate.
struct MotionSegment {
    double start_s = 0.0;
    double speed = 0.0;
    double yaw_rate = 0.0;
};

struct Agent {
    std::int32_t id = 1;
    double length = 4.0;
    double width = 2.0;
    double x = 0.0;
    double y = 0.0;
    double yaw = 0.0;
    double speed = 0.0;
    double yaw_rate = 0.0;
    std::vector<MotionSegment> program;  // sorted by start_s, all > 0
};

struct Pose {
    double x = 0.0;
    double y = 0.0;
    double yaw = 0.0;
};

struct NoiseSpec {
    double dropout = 0.0;      // lidar: P(occupied cell reads empty)
    double salt = 0.0;         // lidar: P(empty cell reads occupied)
    double gain_jitter = 0.0;  // camera: frame gain uniform in 1 +- jitter
    double cell_noise = 0.0;   // camera: per-cell multiplicative factor 1 +- noise
};

struct DegradationSpec {
    double range_attenuation = 0.0;  // camera: exp(-k * range_m)
    double occlusion_prob = 0.0;     // camera: P(frame has an occluded sector)
    double occlusion_width_deg = 0.0;
};

struct SensorSpec {
    Modality modality = Modality::lidar;
    double rate_hz = 5.0;
    double phase_s = 0.0;
    NoiseSpec noise;
    DegradationSpec degradation;

    Micros period() const { return Micros::from_seconds(1.0 / rate_hz); }
};

struct Scenario {
    std::string name;
    double extent_m = 32.0;
    double resolution_m = 0.5;
    double duration_s = 8.0;
    double label_interval_s = 0.5;
    std::uint64_t seed = 0;
    std::vector<Agent> agents;
    std::vector<SensorSpec> sensors;

    std::uint32_t grid_size() const;
    /// Throws std::invalid_argument on duplicate or non-positive ids,
    /// non-positive rates, or an extent that is not a multiple of the resolution.
    void validate() const;
    const SensorSpec& sensor(Modality m) const;
};

void to_json(nlohmann::json& j, const Scenario& s);
void from_json(const nlohmann::json& j, Scenario& s);
Scenario load_scenario(const std::filesystem::path& path);
void save_scenario(const Scenario& s, const std::filesystem::path& path);

/// Closed-form constant-speed / constant-yaw-rate integration over the
/// agent's motion program. Throws std::out_of_range for t outside
/// [0, duration] and std::invalid_argument for an unknown id.
Pose agent_pose(const Scenario& s, std::int32_t agent_id, double t);
/// Same integration with no range check; used for labels past the end.
Pose integrate_pose(const Agent& a, double t);

/// Cell-centre coordinates in meters (x along columns, y along rows).
double cell_center(const Scenario& s, std::uint32_t index);

/// Rasterized ids at t (cell centre inside the rectangle; ties go to the
/// smaller id) and rigid-motion flow towards t + label_interval.
InstanceFrame render_ground_truth(const Scenario& s, double t);

/// One raw sensor grid (1, 1, H, W) in [0, 1]. Deterministic in
/// (scenario seed, modality, timestamp).
Tensor sense(const Scenario& s, Modality m, Micros t);

/// Timestamps phase + k * period that lie within [0, duration].
std::vector<Micros> sensor_timestamps(const SensorSpec& sensor, double duration_s);

/// Raw observation streams, one per declared sensor, in declaration order.
std::vector<std::vector<StampedObservation>> emit_streams(const Scenario& s);

struct SuiteOptions {
    std::uint32_t min_agents = 3;
    std::uint32_t max_agents = 5;
    double min_speed = 1.0;
    double max_speed = 4.0;
    double max_yaw_rate = 0.2;
    double central_half_width_m = 8.0;
};

std::vector<SensorSpec> default_sensors();

/// `count` scenarios named prefix_0.. with seeds derived from `seed`.
/// Agents are placed so that their mid-duration pose lies in the central area.
std::vector<Scenario> generate_suite(std::uint64_t seed, std::uint32_t count, const std::string& prefix,
                                     const SuiteOptions& options = {});

/// Writes one PGM per observation plus manifest.json listing
/// {modality, timestamp_us, file}.
void write_stream_dump(const std::vector<std::vector<StampedObservation>>& streams,
                       const std::filesystem::path& dir);
/// Reads a dump back as one time-ordered list in manifest order.
std::vector<StampedObservation> read_stream_dump(const std::filesystem::path& dir);

}  // namespace sflow
