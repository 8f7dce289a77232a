#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "sflow/pgm.hpp"
#include "sflow/predictor.hpp"
#include "sflow/random.hpp"
#include "sflow/world_sim.hpp"

using namespace sflow;

namespace {

Scenario one_agent(double speed, double yaw_rate, double yaw = 0.0) {
    Scenario s;
    s.name = "one";
    s.sensors = default_sensors();
    Agent a;
    a.id = 1;
    a.yaw = yaw;
    a.speed = speed;
    a.yaw_rate = yaw_rate;
    s.agents.push_back(a);
    return s;
}

/// RK4 on (x, y, yaw) with the motion program applied by start time.
Pose rk4_pose(const Agent& a, double t, double h) {
    double x = a.x, y = a.y, yaw = a.yaw;
    auto params = [&](double time) {
        double v = a.speed, w = a.yaw_rate;
        for (const auto& seg : a.program)
            if (seg.start_s <= time) v = seg.speed, w = seg.yaw_rate;
        return std::pair{v, w};
    };
    const auto steps = static_cast<long>(std::llround(t / h));
    for (long i = 0; i < steps; ++i) {
        const auto [v, w] = params(i * h + 0.5 * h);
        auto f = [&](double th) { return std::array{v * std::cos(th), v * std::sin(th), w}; };
        const auto k1 = f(yaw);
        const auto k2 = f(yaw + 0.5 * h * k1[2]);
        const auto k3 = f(yaw + 0.5 * h * k2[2]);
        const auto k4 = f(yaw + h * k3[2]);
        x += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]);
        y += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]);
        yaw += h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]);
    }
    return {x, y, yaw};
}

/// Point-in-convex-polygon over the rectangle's corners.
bool inside_corners(const Pose& p, const Agent& a, double x, double y) {
    const double c = std::cos(p.yaw), s = std::sin(p.yaw);
    const double hl = a.length / 2, hw = a.width / 2;
    const std::array<std::pair<double, double>, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    std::array<std::pair<double, double>, 4> w;
    for (int i = 0; i < 4; ++i) w[i] = {p.x + c * local[i].first - s * local[i].second, p.y + s * local[i].first + c * local[i].second};
    for (int i = 0; i < 4; ++i) {
        const auto [x0, y0] = w[i];
        const auto [x1, y1] = w[(i + 1) % 4];
        if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < -1e-9) return false;
    }
    return true;
}

}  // namespace

TEST(AgentPose, StraightLine) {
    auto s = one_agent(2.0, 0.0);
    const Pose p = agent_pose(s, 1, 1.5);
    EXPECT_NEAR(p.x, 3.0, 1e-12);
    EXPECT_NEAR(p.y, 0.0, 1e-12);
}

TEST(AgentPose, HalfCircleFlipsHeading) {
    const double v = 2.0, w = 0.5;
    auto s = one_agent(v, w);
    const Pose p = agent_pose(s, 1, std::numbers::pi / w);
    EXPECT_NEAR(std::cos(p.yaw), -1.0, 1e-12);
    EXPECT_NEAR(p.x, 0.0, 1e-12);
    EXPECT_NEAR(p.y, 2 * v / w, 1e-12);
}

TEST(AgentPose, MatchesNumericIntegration) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        Scenario s = one_agent(uniform(rng, 0.5, 4), uniform(rng, -0.5, 0.5), uniform(rng, -3, 3));
        if (trial % 2) s.agents[0].program = {{1.3, uniform(rng, 0, 3), uniform(rng, -1, 1)}, {5.1, 1.0, 0.0}};
        for (double t : {0.7, 2.5, 8.0}) {
            const Pose exact = agent_pose(s, 1, t);
            const Pose numeric = rk4_pose(s.agents[0], t, 1e-4);
            EXPECT_NEAR(exact.x, numeric.x, 1e-6);
            EXPECT_NEAR(exact.y, numeric.y, 1e-6);
        }
    }
}

TEST(AgentPose, Errors) {
    auto s = one_agent(1, 0);
    EXPECT_THROW(agent_pose(s, 7, 1.0), std::invalid_argument);
    EXPECT_THROW(agent_pose(s, 1, -0.1), std::out_of_range);
    EXPECT_THROW(agent_pose(s, 1, 8.01), std::out_of_range);
}

TEST(AgentPose, Continuity) {
    for (const auto& s : generate_suite(3, 5, "c")) {
        for (const auto& a : s.agents) {
            for (double t = 0; t < 7.9; t += 0.37) {
                const double eps = 1e-3;
                const Pose p = agent_pose(s, a.id, t), q = agent_pose(s, a.id, t + eps);
                EXPECT_LE(std::hypot(q.x - p.x, q.y - p.y), a.speed * eps + 1e-9);
            }
        }
    }
}

TEST(RenderGroundTruth, AxisAlignedRectangleCellCount) {
    auto s = one_agent(0, 0);
    const InstanceFrame f = render_ground_truth(s, 0.0);
    EXPECT_EQ(f.height, 64u);
    EXPECT_EQ(std::count(f.ids.begin(), f.ids.end(), 1), 32);
}

TEST(RenderGroundTruth, StaticAgentHasZeroFlow) {
    auto s = one_agent(0, 0, 0.3);
    const InstanceFrame f = render_ground_truth(s, 2.0);
    for (double v : f.flow) EXPECT_EQ(v, 0.0);
}

TEST(RenderGroundTruth, MovingAgentFlowIsDisplacementInCells) {
    auto s = one_agent(2.0, 0.0);
    const InstanceFrame f = render_ground_truth(s, 1.0);
    for (std::size_t k = 0; k < f.cells(); ++k) {
        if (f.ids[k] == 0) {
            EXPECT_EQ(f.flow_x(k), 0.0);
            EXPECT_EQ(f.flow_y(k), 0.0);
        } else {
            EXPECT_NEAR(f.flow_x(k), 2.0 * 0.5 / 0.5, 1e-12);
            EXPECT_NEAR(f.flow_y(k), 0.0, 1e-12);
        }
    }
}

TEST(RenderGroundTruth, AgreesWithBruteForceRasterizer) {
    std::mt19937_64 rng(5);
    for (int scene = 0; scene < 20; ++scene) {
        Scenario s;
        for (int k = 0; k < 4; ++k) {
            Agent a;
            a.id = 4 - k;  // declaration order differs from id order
            a.length = uniform(rng, 2, 8);
            a.width = uniform(rng, 1, 4);
            a.x = uniform(rng, -3, 3);
            a.y = uniform(rng, -3, 3);
            a.yaw = uniform(rng, -3.2, 3.2);
            s.agents.push_back(a);
        }
        const InstanceFrame f = render_ground_truth(s, 0.0);
        std::size_t overlaps = 0;
        for (std::uint32_t r = 0; r < f.height; ++r) {
            for (std::uint32_t c = 0; c < f.width; ++c) {
                std::int32_t expect = 0;
                int hits = 0;
                for (std::int32_t id = 1; id <= 4; ++id) {
                    const Agent& a = *std::find_if(s.agents.begin(), s.agents.end(), [&](const Agent& x) { return x.id == id; });
                    if (inside_corners(Pose{a.x, a.y, a.yaw}, a, cell_center(s, c), cell_center(s, r))) {
                        ++hits;
                        if (expect == 0) expect = id;
                    }
                }
                overlaps += hits > 1;
                EXPECT_EQ(f.id(r, c), expect);
            }
        }
        EXPECT_GT(overlaps, 0u) << "scene " << scene << " exercises no tie";
    }
}

TEST(RenderGroundTruth, FlowWarpKeepsIds) {
    for (const auto& base : generate_suite(0, 5, "w")) {
        for (double delta : {0.1, 0.25, 0.5}) {
            Scenario s = base;
            s.label_interval_s = delta;
            for (double t = 0.5; t <= 7.0; t += 1.3) {
                const InstanceFrame a = render_ground_truth(s, t);
                const InstanceFrame b = render_ground_truth(s, t + delta);
                std::size_t landed = 0, on_foreground = 0, agree = 0;
                for (std::uint32_t r = 0; r < a.height; ++r) {
                    for (std::uint32_t c = 0; c < a.width; ++c) {
                        const std::size_t k = std::size_t{r} * a.width + c;
                        if (a.ids[k] == 0) continue;
                        const long c2 = std::lround(c + a.flow_x(k)), r2 = std::lround(r + a.flow_y(k));
                        if (c2 < 0 || r2 < 0 || c2 >= static_cast<long>(a.width) || r2 >= static_cast<long>(a.height)) continue;
                        ++landed;
                        const std::int32_t target = b.id(static_cast<std::uint32_t>(r2), static_cast<std::uint32_t>(c2));
                        if (target == 0) continue;
                        ++on_foreground;
                        agree += target == a.ids[k];
                    }
                }
                if (on_foreground > 0) {
                    EXPECT_GE(static_cast<double>(agree) / on_foreground, 0.95) << base.name << " t=" << t << " delta=" << delta;
                    // Rectangle edges lose cells to rounding; most landings still hit the agent.
                    EXPECT_GE(static_cast<double>(on_foreground) / landed, 0.75) << base.name << " t=" << t;
                }
            }
        }
    }
}

TEST(Sense, NoiselessLidarEqualsOccupancy) {
    auto s = one_agent(1.0, 0.1);
    s.sensors[0].noise = {};
    const Tensor g = sense(s, Modality::lidar, Micros(1'200'000));
    const InstanceFrame f = render_ground_truth(s, 1.2);
    for (std::size_t k = 0; k < f.cells(); ++k) EXPECT_EQ(g[k], f.ids[k] ? 1.0 : 0.0);
}

TEST(Sense, EmptyWorldCameraIsZero) {
    Scenario s;
    s.sensors = default_sensors();
    for (double v : sense(s, Modality::camera, Micros(500'000)).data()) EXPECT_EQ(v, 0.0);
}

TEST(Sense, CameraIsBlurredAndQuantized) {
    auto s = one_agent(0, 0);
    s.sensors[1].noise = {};
    s.sensors[1].degradation = {};
    const Tensor g = sense(s, Modality::camera, Micros(0));
    // Centre of a 8x4 block: the 5x5 window sees 5 x 4 occupied cells.
    EXPECT_NEAR(g.at(0, 0, 32, 32), std::round(20.0 / 25.0 * 255) / 255, 1e-15);
    for (double v : g.data()) EXPECT_EQ(v, std::round(v * 255) / 255);
    EXPECT_THROW(sense(s, Modality::fused, Micros(0)), std::invalid_argument);
}

TEST(Sense, SeededReproducibility) {
    const auto suite = generate_suite(9, 1, "r");
    for (Modality m : {Modality::lidar, Modality::camera}) {
        const Tensor a = sense(suite[0], m, Micros(400'000));
        const Tensor b = sense(suite[0], m, Micros(400'000));
        for (std::size_t k = 0; k < a.numel(); ++k) EXPECT_EQ(a[k], b[k]);
    }
    const auto again = generate_suite(9, 1, "r");
    EXPECT_EQ(nlohmann::json(suite[0]).dump(), nlohmann::json(again[0]).dump());
}

TEST(EmitStreams, TimestampsFollowRateAndPhase) {
    SensorSpec five;
    five.rate_hz = 5;
    std::vector<std::int64_t> got;
    for (Micros t : sensor_timestamps(five, 1.0)) got.push_back(t.count);
    EXPECT_EQ(got, (std::vector<std::int64_t>{0, 200000, 400000, 600000, 800000, 1000000}));
    SensorSpec two;
    two.rate_hz = 2;
    two.phase_s = 0.1;
    got.clear();
    for (Micros t : sensor_timestamps(two, 1.0)) got.push_back(t.count);
    EXPECT_EQ(got, (std::vector<std::int64_t>{100000, 600000}));
}

TEST(EmitStreams, MergedCountMatchesOracle) {
    auto s = generate_suite(1, 1, "m")[0];
    s.duration_s = 1.0;
    const auto streams = emit_streams(s);
    ASSERT_EQ(streams.size(), 2u);
    std::size_t total = 0;
    for (const auto& st : streams) {
        total += st.size();
        for (std::size_t i = 1; i < st.size(); ++i) EXPECT_LT(st[i - 1].timestamp, st[i].timestamp);
    }
    EXPECT_EQ(merge_streams(streams).size(), total);
    EXPECT_EQ(total, 9u);
}

TEST(Scenario, ValidationAndJsonRoundTrip) {
    auto s = generate_suite(2, 1, "j")[0];
    s.agents[0].program = {{2.0, 1.0, 0.1}};
    const nlohmann::json j = s;
    const Scenario back = j.get<Scenario>();
    EXPECT_EQ(nlohmann::json(back).dump(), j.dump());

    Scenario dup = s;
    dup.agents[1].id = dup.agents[0].id;
    EXPECT_THROW(dup.validate(), std::invalid_argument);
    Scenario ext = s;
    ext.extent_m = 32.2;
    EXPECT_THROW(ext.validate(), std::invalid_argument);
    Scenario rate = s;
    rate.sensors[0].rate_hz = 0;
    EXPECT_THROW(rate.validate(), std::invalid_argument);
}

TEST(Suite, AgentsAreCentralAtMidDuration) {
    const SuiteOptions o;
    for (const auto& s : generate_suite(0, 20, "train")) {
        ASSERT_GE(s.agents.size(), o.min_agents);
        ASSERT_LE(s.agents.size(), o.max_agents);
        for (const auto& a : s.agents) {
            const Pose p = agent_pose(s, a.id, 4.0);
            EXPECT_LE(std::abs(p.x), o.central_half_width_m + 1e-9);
            EXPECT_LE(std::abs(p.y), o.central_half_width_m + 1e-9);
            EXPECT_GE(a.speed, o.min_speed);
            EXPECT_LE(a.speed, o.max_speed);
        }
    }
}

TEST(StreamDump, RoundTripsExactly) {
    auto s = generate_suite(4, 1, "d")[0];
    s.duration_s = 1.0;
    const auto streams = emit_streams(s);
    const auto dir = std::filesystem::temp_directory_path() / "sflow_dump_test";
    std::filesystem::remove_all(dir);
    write_stream_dump(streams, dir);
    const auto back = read_stream_dump(dir);
    const auto merged = merge_streams(streams);
    ASSERT_EQ(back.size(), merged.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].timestamp, merged[i].timestamp);
        EXPECT_EQ(back[i].modality, merged[i].modality);
        for (std::size_t k = 0; k < back[i].feature.numel(); ++k) ASSERT_EQ(back[i].feature[k], merged[i].feature[k]);
    }
    std::filesystem::remove_all(dir);
}

TEST(Pgm, SixteenBitRoundTrip) {
    GrayImage img{3, 2, 65535, {0, 1, 256, 65535, 300, 7}};
    const auto path = std::filesystem::temp_directory_path() / "sflow_pgm16.pgm";
    write_pgm(path, img);
    const GrayImage back = read_pgm(path);
    EXPECT_EQ(back.width, 3u);
    EXPECT_EQ(back.height, 2u);
    EXPECT_EQ(back.pixels, img.pixels);
    std::filesystem::remove(path);
}

TEST(Suite, GeneratedAgentsNeverOverlap) {
    for (const auto& s : generate_suite(0, 25, "o")) {
        for (double t = 0.0; t <= s.duration_s; t += 0.25) {
            for (std::uint32_t r = 0; r < s.grid_size(); r += 2) {
                for (std::uint32_t c = 0; c < s.grid_size(); c += 2) {
                    int hits = 0;
                    for (const auto& a : s.agents) hits += inside_corners(agent_pose(s, a.id, t), a, cell_center(s, c), cell_center(s, r));
                    ASSERT_LE(hits, 1) << s.name << " t=" << t;
                }
            }
        }
    }
}
