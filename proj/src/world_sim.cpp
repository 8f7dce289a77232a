#include "sflow/world_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "sflow/pgm.hpp"
#include "sflow/random.hpp"

namespace sflow {

std::uint32_t Scenario::grid_size() const {
    return static_cast<std::uint32_t>(std::llround(extent_m / resolution_m));
}

void Scenario::validate() const {
    if (!(resolution_m > 0) || !(extent_m > 0)) throw std::invalid_argument("scenario: extent and resolution must be positive");
    const double cells = extent_m / resolution_m;
    if (std::abs(cells - std::round(cells)) > 1e-9) {
        throw std::invalid_argument("scenario: extent " + std::to_string(extent_m) +
                                    " m is not a multiple of the resolution");
    }
    if (!(duration_s > 0) || !(label_interval_s > 0)) throw std::invalid_argument("scenario: duration and label interval must be positive");
    std::set<std::int32_t> ids;
    for (const auto& a : agents) {
        if (a.id <= 0) throw std::invalid_argument("scenario: agent id must be positive");
        if (!ids.insert(a.id).second) throw std::invalid_argument("scenario: duplicate agent id " + std::to_string(a.id));
        for (std::size_t i = 0; i < a.program.size(); ++i) {
            if (a.program[i].start_s <= (i ? a.program[i - 1].start_s : 0.0)) {
                throw std::invalid_argument("scenario: motion program of agent " + std::to_string(a.id) +
                                            " must have increasing positive start times");
            }
        }
    }
    for (const auto& s : sensors) {
        if (!(s.rate_hz > 0)) throw std::invalid_argument("scenario: sensor rate must be positive");
    }
}

const SensorSpec& Scenario::sensor(Modality m) const {
    for (const auto& s : sensors)
        if (s.modality == m) return s;
    throw std::invalid_argument("scenario " + name + ": modality " + to_string(m) + " not declared");
}

// JSON ------------------------------------------------------------------

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MotionSegment, start_s, speed, yaw_rate)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Agent, id, length, width, x, y, yaw, speed, yaw_rate, program)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseSpec, dropout, salt, gain_jitter, cell_noise)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DegradationSpec, range_attenuation, occlusion_prob,
                                                occlusion_width_deg)

void to_json(nlohmann::json& j, const SensorSpec& s) {
    j = nlohmann::json{{"modality", to_string(s.modality)},
                       {"rate_hz", s.rate_hz},
                       {"phase_s", s.phase_s},
                       {"noise", s.noise},
                       {"degradation", s.degradation}};
}

void from_json(const nlohmann::json& j, SensorSpec& s) {
    s.modality = parse_modality(j.at("modality").get<std::string>());
    s.rate_hz = j.at("rate_hz").get<double>();
    s.phase_s = j.value("phase_s", 0.0);
    s.noise = j.value("noise", NoiseSpec{});
    s.degradation = j.value("degradation", DegradationSpec{});
}

void to_json(nlohmann::json& j, const Scenario& s) {
    j = nlohmann::json{{"name", s.name},
                       {"extent_m", s.extent_m},
                       {"resolution_m", s.resolution_m},
                       {"duration_s", s.duration_s},
                       {"label_interval_s", s.label_interval_s},
                       {"seed", s.seed},
                       {"agents", s.agents},
                       {"sensors", s.sensors}};
}

void from_json(const nlohmann::json& j, Scenario& s) {
    const Scenario d;
    s.name = j.value("name", d.name);
    s.extent_m = j.value("extent_m", d.extent_m);
    s.resolution_m = j.value("resolution_m", d.resolution_m);
    s.duration_s = j.value("duration_s", d.duration_s);
    s.label_interval_s = j.value("label_interval_s", d.label_interval_s);
    s.seed = j.value("seed", d.seed);
    s.agents = j.value("agents", std::vector<Agent>{});
    s.sensors = j.contains("sensors") ? j["sensors"].get<std::vector<SensorSpec>>() : default_sensors();
    s.validate();
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scenario " + path.string());
    return nlohmann::json::parse(in).get<Scenario>();
}

void save_scenario(const Scenario& s, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write scenario " + path.string());
    out << nlohmann::json(s).dump(2) << '\n';
}

// Kinematics ------------------------------------------------------------

namespace {

void advance(Pose& p, double speed, double yaw_rate, double tau) {
    if (tau <= 0) return;
    if (std::abs(yaw_rate) < 1e-12) {
        p.x += speed * tau * std::cos(p.yaw);
        p.y += speed * tau * std::sin(p.yaw);
    } else {
        const double yaw1 = p.yaw + yaw_rate * tau;
        const double r = speed / yaw_rate;
        p.x += r * (std::sin(yaw1) - std::sin(p.yaw));
        p.y -= r * (std::cos(yaw1) - std::cos(p.yaw));
        p.yaw = yaw1;
    }
}

const Agent& find_agent(const Scenario& s, std::int32_t id) {
    for (const auto& a : s.agents)
        if (a.id == id) return a;
    throw std::invalid_argument("agent_pose: unknown agent id " + std::to_string(id));
}

}  // namespace

Pose integrate_pose(const Agent& a, double t) {
    Pose p{a.x, a.y, a.yaw};
    double clock = 0.0, speed = a.speed, yaw_rate = a.yaw_rate;
    for (const auto& seg : a.program) {
        if (seg.start_s >= t) break;
        advance(p, speed, yaw_rate, seg.start_s - clock);
        clock = seg.start_s;
        speed = seg.speed;
        yaw_rate = seg.yaw_rate;
    }
    advance(p, speed, yaw_rate, t - clock);
    return p;
}

Pose agent_pose(const Scenario& s, std::int32_t agent_id, double t) {
    const Agent& a = find_agent(s, agent_id);
    if (t < 0 || t > s.duration_s) {
        throw std::out_of_range("agent_pose: t = " + std::to_string(t) + " s outside [0, " +
                                std::to_string(s.duration_s) + "]");
    }
    return integrate_pose(a, t);
}

double cell_center(const Scenario& s, std::uint32_t index) {
    return -0.5 * s.extent_m + (index + 0.5) * s.resolution_m;
}

InstanceFrame render_ground_truth(const Scenario& s, double t) {
    const std::uint32_t n = s.grid_size();
    InstanceFrame f = InstanceFrame::empty(Micros::from_seconds(t), n, n);
    const std::size_t cells = f.cells();
    for (const auto& a : s.agents) {
        const Pose p = integrate_pose(a, t);
        const Pose q = integrate_pose(a, t + s.label_interval_s);
        const double c = std::cos(p.yaw), sn = std::sin(p.yaw);
        const double cq = std::cos(q.yaw), sq = std::sin(q.yaw);
        for (std::uint32_t row = 0; row < n; ++row) {
            const double y = cell_center(s, row);
            for (std::uint32_t col = 0; col < n; ++col) {
                const double x = cell_center(s, col);
                const double u = c * (x - p.x) + sn * (y - p.y);
                const double v = -sn * (x - p.x) + c * (y - p.y);
                if (std::abs(u) > 0.5 * a.length || std::abs(v) > 0.5 * a.width) continue;
                const std::size_t k = std::size_t{row} * n + col;
                if (f.ids[k] != 0 && f.ids[k] < a.id) continue;
                f.ids[k] = a.id;
                // Written as pose differences so a static agent gets exactly zero.
                f.flow[k] = ((q.x - p.x) + (cq - c) * u - (sq - sn) * v) / s.resolution_m;
                f.flow[cells + k] = ((q.y - p.y) + (sq - sn) * u + (cq - c) * v) / s.resolution_m;
            }
        }
    }
    return f;
}

// Sensing ---------------------------------------------------------------

Tensor sense(const Scenario& s, Modality m, Micros t) {
    const SensorSpec& spec = s.sensor(m);
    const InstanceFrame gt = render_ground_truth(s, t.seconds());
    const std::uint32_t n = gt.height;
    std::mt19937_64 rng(hash_seed({s.seed, static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(t.count)}));
    Tensor out = Tensor::zeros({1, 1, n, n});
    auto cells = out.mutable_data();

    if (m == Modality::lidar) {
        for (std::size_t k = 0; k < cells.size(); ++k) {
            const double draw = uniform01(rng);
            cells[k] = gt.ids[k] != 0 ? (draw < spec.noise.dropout ? 0.0 : 1.0) : (draw < spec.noise.salt ? 1.0 : 0.0);
        }
        return out;
    }
    if (m != Modality::camera) throw std::invalid_argument("sense: modality " + to_string(m) + " has no sensor model");

    // 5x5 box blur of the occupancy, zero outside the grid.
    std::vector<double> occ(gt.cells());
    for (std::size_t k = 0; k < occ.size(); ++k) occ[k] = gt.ids[k] != 0 ? 1.0 : 0.0;
    const double gain = 1.0 + uniform(rng, -spec.noise.gain_jitter, spec.noise.gain_jitter);
    const bool occluded = uniform01(rng) < spec.degradation.occlusion_prob;
    const double sector_center = uniform(rng, -std::numbers::pi, std::numbers::pi);
    const double half_width = 0.5 * spec.degradation.occlusion_width_deg * std::numbers::pi / 180.0;
    for (std::uint32_t row = 0; row < n; ++row) {
        for (std::uint32_t col = 0; col < n; ++col) {
            double acc = 0.0;
            for (int dy = -2; dy <= 2; ++dy) {
                for (int dx = -2; dx <= 2; ++dx) {
                    const int r = static_cast<int>(row) + dy, c = static_cast<int>(col) + dx;
                    if (r >= 0 && c >= 0 && r < static_cast<int>(n) && c < static_cast<int>(n)) acc += occ[r * n + c];
                }
            }
            const double x = cell_center(s, col), y = cell_center(s, row);
            double v = acc / 25.0 * std::exp(-spec.degradation.range_attenuation * std::hypot(x, y));
            if (occluded) {
                const double off = std::remainder(std::atan2(y, x) - sector_center, 2 * std::numbers::pi);
                if (std::abs(off) <= half_width) v = 0.0;
            }
            v *= gain * (1.0 + uniform(rng, -spec.noise.cell_noise, spec.noise.cell_noise));
            cells[std::size_t{row} * n + col] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
        }
    }
    return out;
}

std::vector<Micros> sensor_timestamps(const SensorSpec& sensor, double duration_s) {
    std::vector<Micros> out;
    const Micros end = Micros::from_seconds(duration_s);
    const Micros period = sensor.period();
    for (Micros t = Micros::from_seconds(sensor.phase_s); t <= end; t += period) out.push_back(t);
    return out;
}

std::vector<std::vector<StampedObservation>> emit_streams(const Scenario& s) {
    s.validate();
    std::vector<std::vector<StampedObservation>> streams;
    for (const auto& spec : s.sensors) {
        auto& stream = streams.emplace_back();
        for (Micros t : sensor_timestamps(spec, s.duration_s)) stream.push_back({t, spec.modality, sense(s, spec.modality, t)});
    }
    return streams;
}

// Suites ----------------------------------------------------------------

std::vector<SensorSpec> default_sensors() {
    SensorSpec lidar;
    lidar.modality = Modality::lidar;
    lidar.rate_hz = 5.0;
    lidar.noise.dropout = 0.1;
    lidar.noise.salt = 0.005;
    SensorSpec camera;
    camera.modality = Modality::camera;
    camera.rate_hz = 2.0;
    camera.noise.gain_jitter = 0.1;
    camera.noise.cell_noise = 0.2;
    camera.degradation.range_attenuation = 0.03;
    camera.degradation.occlusion_prob = 0.3;
    camera.degradation.occlusion_width_deg = 45.0;
    return {lidar, camera};
}

std::vector<Scenario> generate_suite(std::uint64_t seed, std::uint32_t count, const std::string& prefix,
                                     const SuiteOptions& o) {
    std::vector<Scenario> suite;
    for (std::uint32_t i = 0; i < count; ++i) {
        Scenario s;
        s.name = prefix + "_" + std::to_string(i);
        s.seed = hash_seed({seed, i, 0x5375697465ULL});
        s.sensors = default_sensors();
        std::mt19937_64 rng(s.seed);
        const auto n_agents = static_cast<std::uint32_t>(o.min_agents + uniform_index(rng, o.max_agents - o.min_agents + 1));
        const double mid = 0.5 * s.duration_s;
        // Rejection-sample each agent so that no two centres come closer than
        // the sum of their half diagonals (plus a margin) at any sampled time,
        // including the label interval past the end.
        auto clearance = [&](const Agent& a, const Agent& b) {
            return 0.5 * (std::hypot(a.length, a.width) + std::hypot(b.length, b.width)) + 0.5;
        };
        auto collides = [&](const Agent& a) {
            for (const Agent& b : s.agents) {
                for (double t = 0.0; t <= s.duration_s + s.label_interval_s + 1e-9; t += 0.1) {
                    const Pose p = integrate_pose(a, t), q = integrate_pose(b, t);
                    if (std::hypot(p.x - q.x, p.y - q.y) < clearance(a, b)) return true;
                }
            }
            return false;
        };
        for (std::uint32_t k = 0; k < n_agents; ++k) {
            Agent a;
            for (int attempt = 0; attempt < 200; ++attempt) {
                const Pose m{uniform(rng, -o.central_half_width_m, o.central_half_width_m),
                             uniform(rng, -o.central_half_width_m, o.central_half_width_m),
                             uniform(rng, -std::numbers::pi, std::numbers::pi)};
                a = Agent{};
                a.id = static_cast<std::int32_t>(k + 1);
                a.length = uniform(rng, 3.5, 5.0);
                a.width = uniform(rng, 1.6, 2.2);
                a.speed = uniform(rng, o.min_speed, o.max_speed);
                a.yaw_rate = uniform(rng, -o.max_yaw_rate, o.max_yaw_rate);
                // Run the motion backwards from the mid-duration pose.
                Agent reverse = a;
                reverse.x = m.x;
                reverse.y = m.y;
                reverse.yaw = m.yaw;
                reverse.speed = -a.speed;
                reverse.yaw_rate = -a.yaw_rate;
                const Pose start = integrate_pose(reverse, mid);
                a.x = start.x;
                a.y = start.y;
                a.yaw = start.yaw;
                if (!collides(a)) break;
            }
            s.agents.push_back(a);
        }
        s.validate();
        suite.push_back(std::move(s));
    }
    return suite;
}

// Stream dumps ----------------------------------------------------------

void write_stream_dump(const std::vector<std::vector<StampedObservation>>& streams, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<const StampedObservation*> all;
    for (const auto& s : streams)
        for (const auto& o : s) all.push_back(&o);
    std::stable_sort(all.begin(), all.end(), [](const auto* a, const auto* b) {
        return std::pair{a->timestamp, a->modality} < std::pair{b->timestamp, b->modality};
    });
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto* o : all) {
        const Shape& sh = o->feature.shape();
        GrayImage img{sh.w, sh.h, 255, {}};
        img.pixels.reserve(sh.plane());
        for (std::size_t k = 0; k < sh.plane(); ++k) {
            img.pixels.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(o->feature[k], 0.0, 1.0) * 255.0)));
        }
        const std::string file = to_string(o->modality) + "_" + std::to_string(o->timestamp.count) + ".pgm";
        write_pgm(dir / file, img);
        manifest.push_back({{"modality", to_string(o->modality)}, {"timestamp_us", o->timestamp.count}, {"file", file}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<StampedObservation> read_stream_dump(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("stream dump: missing manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(in);
    std::vector<StampedObservation> out;
    for (const auto& e : manifest) {
        const GrayImage img = read_pgm(dir / e.at("file").get<std::string>());
        Tensor t = Tensor::zeros({1, 1, img.height, img.width});
        auto d = t.mutable_data();
        for (std::size_t k = 0; k < d.size(); ++k) d[k] = img.pixels[k] / 255.0;
        out.push_back({Micros(e.at("timestamp_us").get<std::int64_t>()),
                       parse_modality(e.at("modality").get<std::string>()), t});
    }
    return out;
}

}  // namespace sflow
