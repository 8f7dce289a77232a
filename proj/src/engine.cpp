#include "sflow/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "sflow/random.hpp"
#include "sflow/snapshot.hpp"

namespace sflow {

namespace {

constexpr std::uint64_t kModelTag = 0x6d6f64656cULL;
constexpr std::uint64_t kEpochTag = 0x65706f6368ULL;

StepMode parse_step_mode(const std::string& s) {
    if (s == "fixed") return StepMode::fixed;
    if (s == "variable") return StepMode::variable;
    throw std::invalid_argument("unknown step mode '" + s + "' (expected fixed|variable)");
}

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("run config: " + msg);
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string to_string(FusionMode m) { return m == FusionMode::gru_ode ? "gru-ode" : "sync-baseline"; }

FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "gru-ode") return FusionMode::gru_ode;
    if (s == "sync-baseline") return FusionMode::sync_baseline;
    throw std::invalid_argument("unknown fusion mode '" + s + "' (expected gru-ode|sync-baseline)");
}

// ---------------------------------------------------------------- config

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{
        {"train_suite", c.train_suite.string()},
        {"eval_suite", c.eval_suite.string()},
        {"channels", c.channels},
        {"grid", c.grid},
        {"weight_tying", c.weight_tying},
        {"candidate_depth", c.candidate_depth},
        {"solver",
         {{"method", to_string(c.solver.method)},
          {"step_mode", to_string(c.solver.step_mode)},
          {"fixed_step_us", c.solver.fixed_step.count},
          {"min_step_us", c.solver.min_step.count}}},
        {"lidar_hz", c.lidar_hz},
        {"camera_hz", c.camera_hz},
        {"past_s", c.past_s},
        {"label_offsets_s", c.label_offsets_s},
        {"window_starts_s", c.window_starts_s},
        {"windows_per_scenario", c.windows_per_scenario},
        {"eval_window_starts_s", c.eval_window_starts_s},
        {"optimizer",
         {{"learning_rate", c.optimizer.learning_rate},
          {"min_learning_rate", c.optimizer.min_learning_rate},
          {"weight_decay", c.optimizer.weight_decay},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"epsilon", c.optimizer.epsilon},
          {"clip_norm", c.optimizer.clip_norm}}},
        {"loss",
         {{"seg", c.loss.seg},
          {"spatial", c.loss.spatial},
          {"kld", c.loss.kld},
          {"foreground_class_weight", c.loss.foreground_class_weight},
          {"regression", c.loss.regression == RegressionLoss::l1 ? "l1" : "l2"},
          {"uncertainty", c.loss.uncertainty}}},
        {"epochs", c.epochs},
        {"seed", c.seed},
        {"fusion", to_string(c.fusion)},
        {"kld_state_only", c.kld_state_only},
        {"postprocess", {{"threshold", c.postprocess.threshold}, {"nms_radius", c.postprocess.nms_radius}}},
    };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    c = RunConfig{};
    c.train_suite = j.value("train_suite", std::string());
    c.eval_suite = j.value("eval_suite", std::string());
    c.channels = j.value("channels", c.channels);
    c.grid = j.value("grid", c.grid);
    c.weight_tying = j.value("weight_tying", c.weight_tying);
    c.candidate_depth = j.value("candidate_depth", c.candidate_depth);
    if (j.contains("solver")) {
        const auto& s = j["solver"];
        if (s.contains("method")) c.solver.method = parse_solver_method(s["method"].get<std::string>());
        if (s.contains("step_mode")) c.solver.step_mode = parse_step_mode(s["step_mode"].get<std::string>());
        c.solver.fixed_step = Micros(s.value("fixed_step_us", c.solver.fixed_step.count));
        c.solver.min_step = Micros(s.value("min_step_us", c.solver.min_step.count));
    }
    c.lidar_hz = j.value("lidar_hz", c.lidar_hz);
    c.camera_hz = j.value("camera_hz", c.camera_hz);
    c.past_s = j.value("past_s", c.past_s);
    c.label_offsets_s = j.value("label_offsets_s", c.label_offsets_s);
    c.window_starts_s = j.value("window_starts_s", c.window_starts_s);
    c.windows_per_scenario = j.value("windows_per_scenario", c.windows_per_scenario);
    c.eval_window_starts_s = j.value("eval_window_starts_s", c.eval_window_starts_s);
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
        c.optimizer.min_learning_rate = o.value("min_learning_rate", c.optimizer.min_learning_rate);
        c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
        c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
        c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
        c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
        c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
    }
    if (j.contains("loss")) {
        const auto& l = j["loss"];
        c.loss.seg = l.value("seg", c.loss.seg);
        c.loss.spatial = l.value("spatial", c.loss.spatial);
        c.loss.kld = l.value("kld", c.loss.kld);
        c.loss.foreground_class_weight = l.value("foreground_class_weight", c.loss.foreground_class_weight);
        const std::string reg = l.value("regression", std::string("l1"));
        if (reg != "l1" && reg != "l2") throw std::invalid_argument("run config: regression must be l1 or l2");
        c.loss.regression = reg == "l1" ? RegressionLoss::l1 : RegressionLoss::l2;
        c.loss.uncertainty = l.value("uncertainty", c.loss.uncertainty);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    if (j.contains("fusion")) c.fusion = parse_fusion_mode(j["fusion"].get<std::string>());
    c.kld_state_only = j.value("kld_state_only", c.kld_state_only);
    if (j.contains("postprocess")) {
        c.postprocess.threshold = j["postprocess"].value("threshold", c.postprocess.threshold);
        c.postprocess.nms_radius = j["postprocess"].value("nms_radius", c.postprocess.nms_radius);
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open run config " + path.string());
    RunConfig c = nlohmann::json::parse(in).get<RunConfig>();
    const auto base = path.parent_path();
    for (auto* p : {&c.train_suite, &c.eval_suite})
        if (!p->empty() && p->is_relative()) *p = (base / *p).lexically_normal();
    return c;
}

void RunConfig::validate() const {
    require(channels > 0, "channels must be positive");
    require(grid > 0 && grid % 4 == 0, "grid must be a positive multiple of 4");
    require(past_s >= 0, "past_s must be non-negative");
    require(lidar_hz > 0 && camera_hz > 0, "stream rates must be positive");
    require(!label_offsets_s.empty(), "label_offsets_s is empty");
    for (std::size_t i = 0; i < label_offsets_s.size(); ++i) {
        require(label_offsets_s[i] >= 0, "label offsets must be non-negative");
        require(i == 0 || label_offsets_s[i] > label_offsets_s[i - 1], "label offsets must increase");
    }
    require(!window_starts_s.empty() && windows_per_scenario > 0, "no training windows");
    require(optimizer.learning_rate > 0 && optimizer.min_learning_rate >= 0, "learning rates must be positive");
    require(optimizer.weight_decay >= 0, "weight decay must be non-negative");
    require(loss.seg >= 0 && loss.spatial >= 0 && loss.kld >= 0, "loss weights must be non-negative");
    solver.validate();
    require(!train_suite.empty() && std::filesystem::is_directory(train_suite),
            "train_suite '" + train_suite.string() + "' is not a directory");
    require(eval_suite.empty() || std::filesystem::is_directory(eval_suite),
            "eval_suite '" + eval_suite.string() + "' is not a directory");
}

void RunConfig::validate_against(const std::vector<Scenario>& suite) const {
    for (const Scenario& s : suite) {
        require(s.grid_size() == grid, "scenario " + s.name + " has grid " + std::to_string(s.grid_size()) +
                                           ", config expects " + std::to_string(grid));
        for (double start : window_starts_s) {
            require(start >= 0, "window starts must be non-negative");
            const double last = start + past_s + label_offsets_s.back();
            require(last <= s.duration_s + 1e-9, "label time " + std::to_string(last) + " s exceeds scenario " +
                                                     s.name + " duration " + std::to_string(s.duration_s) + " s");
        }
    }
}

std::uint64_t RunConfig::config_hash() const { return fnv1a(nlohmann::json(*this).dump()); }

std::uint64_t RunConfig::arch_hash() const {
    const nlohmann::json a{{"channels", channels},     {"grid", grid},
                           {"weight_tying", weight_tying}, {"candidate_depth", candidate_depth},
                           {"fusion", to_string(fusion)},  {"uncertainty", loss.uncertainty}};
    return fnv1a(a.dump());
}

std::vector<Scenario> load_suite(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("suite " + dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::invalid_argument("suite " + dir.string() + " holds no scenario files");
    std::vector<Scenario> out;
    for (const auto& f : files) out.push_back(load_scenario(f));
    return out;
}

void save_suite(const std::vector<Scenario>& suite, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const Scenario& s : suite) save_scenario(s, dir / (s.name + ".json"));
}

Scenario with_rates(Scenario s, double lidar_hz, double camera_hz) {
    for (auto& sensor : s.sensors) {
        if (sensor.modality == Modality::lidar) sensor.rate_hz = lidar_hz;
        if (sensor.modality == Modality::camera) sensor.rate_hz = camera_hz;
    }
    return s;
}

// ---------------------------------------------------------------- model

Model Model::make(const RunConfig& config) {
    std::mt19937_64 rng(hash_seed({config.seed, kModelTag}));
    Model m;
    m.codec = CodecParams::make(config.channels, rng);
    m.predictor = PredictorParams::make(config.channels, config.weight_tying, rng, config.candidate_depth);
    if (config.fusion == FusionMode::sync_baseline) m.sync_fusion = Conv::same(2 * config.channels, config.channels, 1, rng);
    if (config.loss.uncertainty) m.log_vars = Tensor::zeros({1, 3, 1, 1}, true);
    return m;
}

ParamList Model::params(const RunConfig& config) const {
    ParamList out;
    codec.collect(out, "codec");
    predictor.collect(out, "predictor");
    if (config.fusion == FusionMode::sync_baseline) sync_fusion.collect(out, "sync_fusion");
    if (config.loss.uncertainty) out.add("loss.log_vars", log_vars);
    return out;
}

ScenarioData ScenarioData::make(const Scenario& s) {
    ScenarioData d;
    d.scenario = s;
    for (auto& stream : emit_streams(s)) {
        if (stream.empty()) continue;
        auto& dst = stream.front().modality == Modality::lidar ? d.lidar : d.camera;
        dst = std::move(stream);
    }
    return d;
}

// ---------------------------------------------------------------- forward

namespace {

std::vector<StampedObservation> encode_observations(const Model& model, const RunConfig& config,
                                                    const std::vector<StampedObservation>& raw) {
    const auto& fusion = model.predictor.fusion;
    std::vector<StampedObservation> out;
    if (config.fusion == FusionMode::gru_ode) {
        for (const auto& o : raw) {
            out.push_back({o.timestamp, o.modality,
                           implicit_encode(fusion, encode_modality(model.codec, o.feature, o.modality))});
        }
        return out;
    }
    // Synchronized arm: only camera frames with a lidar sweep inside the
    // tolerance contribute, one fused observation each.
    for (const auto& cam : raw) {
        if (cam.modality != Modality::camera) continue;
        const StampedObservation* best = nullptr;
        for (const auto& l : raw) {
            if (l.modality != Modality::lidar) continue;
            const auto gap = std::llabs((l.timestamp - cam.timestamp).count);
            if (gap <= kSyncTolerance.count && (!best || gap < std::llabs((best->timestamp - cam.timestamp).count)))
                best = &l;
        }
        if (!best) continue;
        const StampedObservation lf{best->timestamp, Modality::lidar,
                                    encode_modality(model.codec, best->feature, Modality::lidar)};
        const StampedObservation cf{cam.timestamp, Modality::camera,
                                    encode_modality(model.codec, cam.feature, Modality::camera)};
        StampedObservation fused = sync_fusion_baseline(model.sync_fusion, lf, cf);
        fused.feature = implicit_encode(fusion, fused.feature);
        out.push_back(std::move(fused));
    }
    if (out.empty()) throw std::invalid_argument("sync-baseline: no synchronized lidar/camera pair in the window");
    return out;
}

}  // namespace

WindowResult run_observations(const Model& model, const RunConfig& config, const std::vector<StampedObservation>& raw,
                              Micros present, const std::vector<double>& offsets_s, bool record_trace) {
    const std::vector<StampedObservation> obs = encode_observations(model, config, raw);
    const Micros last = obs.back().timestamp;
    WindowResult w;
    w.present = present;
    PredictionRequest request;
    request.solver = config.solver;
    for (double off : offsets_s) {
        const Micros t = present + Micros::from_seconds(off);
        if (t < last) throw std::invalid_argument("run_observations: requested time precedes the last observation");
        w.times.push_back(t);
        if (t > last) request.horizons.push_back(t);
    }
    w.rollout = rollout(model.predictor, obs, request, RolloutOptions{{config.kld_state_only}, record_trace});
    for (Micros t : w.times) {
        const SavedState* s = t == last ? &w.rollout.states[obs.size() - 1] : w.rollout.future_state(t);
        if (!s) throw std::logic_error("run_observations: no saved state at requested time");
        w.decoded.push_back(decode(model.codec, s->h));
    }
    return w;
}

WindowResult run_window(const Model& model, const RunConfig& config, const ScenarioData& data, double start_s,
                        const std::vector<double>& offsets_s, bool record_trace) {
    const Micros start = Micros::from_seconds(start_s);
    const Micros present = start + Micros::from_seconds(config.past_s);
    std::vector<std::vector<StampedObservation>> streams(2);
    for (const auto* src : {&data.lidar, &data.camera}) {
        auto& dst = streams[src == &data.lidar ? 0 : 1];
        for (const auto& o : *src)
            if (o.timestamp >= start && o.timestamp <= present) dst.push_back(o);
    }
    std::vector<StampedObservation> raw = merge_streams(streams);
    if (raw.empty()) throw std::invalid_argument("run_window: no observations in window of " + data.scenario.name);
    return run_observations(model, config, raw, present, offsets_s, record_trace);
}

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(const ParamList& params, OptimizerConfig config) : params_(params), config_(config) {
    for (const auto& p : params_.items()) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

double AdamW::step(double lr) {
    double sq = 0.0;
    for (const auto& p : params_.items())
        for (double g : p.tensor.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double clip = config_.clip_norm > 0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor t = params_.items()[k].tensor;
        auto data = t.mutable_data();
        const auto grad = t.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad.empty() ? 0.0 : grad[i] * clip;
            m[i] = config_.beta1 * m[i] + (1 - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1 - config_.beta2) * g * g;
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            data[i] -= lr * (mh / (std::sqrt(vh) + config_.epsilon) + config_.weight_decay * data[i]);
        }
        t.zero_grad();
    }
    return norm;
}

void AdamW::save(std::ostream& os) const {
    os.write(reinterpret_cast<const char*>(&t_), sizeof t_);
    for (std::size_t k = 0; k < m_.size(); ++k) {
        const Shape s = params_.items()[k].tensor.shape();
        write_snapshot(os, Tensor::from(s, m_[k]));
        write_snapshot(os, Tensor::from(s, v_[k]));
    }
}

void AdamW::load(std::istream& is) {
    is.read(reinterpret_cast<char*>(&t_), sizeof t_);
    if (!is) throw std::runtime_error("optimizer state: truncated header");
    for (std::size_t k = 0; k < m_.size(); ++k) {
        const Tensor m = read_snapshot(is), v = read_snapshot(is);
        if (m.numel() != m_[k].size() || v.numel() != v_[k].size())
            throw std::runtime_error("optimizer state: moment size mismatch for " + params_.items()[k].name);
        m_[k].assign(m.data().begin(), m.data().end());
        v_[k].assign(v.data().begin(), v.data().end());
    }
}

double cosine_lr(const OptimizerConfig& c, std::uint64_t step, std::uint64_t total_steps) {
    if (total_steps <= 1) return c.learning_rate;
    const double progress = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
    return c.min_learning_rate + 0.5 * (c.learning_rate - c.min_learning_rate) * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------- training

namespace {

LossWeights loss_weights(const RunConfig& config, const Model& model) {
    LossWeights w;
    w.seg = config.loss.seg;
    w.spatial = config.loss.spatial;
    w.kld = config.loss.kld;
    w.foreground_class_weight = config.loss.foreground_class_weight;
    w.regression = config.loss.regression;
    if (config.loss.uncertainty) w.log_vars = model.log_vars;
    return w;
}

std::vector<ScenarioData> prepare(const std::vector<Scenario>& suite, double lidar_hz, double camera_hz) {
    std::vector<ScenarioData> out;
    for (const Scenario& s : suite) {
        const double l = lidar_hz > 0 ? lidar_hz : s.sensor(Modality::lidar).rate_hz;
        const double c = camera_hz > 0 ? camera_hz : s.sensor(Modality::camera).rate_hz;
        out.push_back(ScenarioData::make(with_rates(s, l, c)));
    }
    return out;
}

}  // namespace

Checkpoint train(const RunConfig& config, std::vector<HistoryRow>* history, const ProgressFn& progress) {
    config.validate();
    const std::vector<Scenario> suite = load_suite(config.train_suite);
    config.validate_against(suite);
    const std::vector<ScenarioData> data = prepare(suite, config.lidar_hz, config.camera_hz);

    Checkpoint ckpt{config, Model::make(config), 0, {}};
    const ParamList params = ckpt.model.params(config);
    AdamW opt(params, config.optimizer);
    const LossWeights weights = loss_weights(config, ckpt.model);
    const std::uint64_t total_steps = std::uint64_t{config.epochs} * data.size() * config.windows_per_scenario;

    std::vector<Targets> targets;
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 order_rng(hash_seed({config.seed, kEpochTag, epoch}));
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(order_rng, i)]);

        HistoryRow row;
        row.epoch = epoch + 1;
        std::size_t windows = 0;
        for (std::size_t idx : order) {
            const ScenarioData& d = data[idx];
            for (std::uint32_t w = 0; w < config.windows_per_scenario; ++w) {
                const std::uint64_t window_seed = hash_seed({config.seed, epoch, idx, w});
                std::mt19937_64 wrng(window_seed);
                const double start = config.window_starts_s[uniform_index(wrng, config.window_starts_s.size())];

                auto diverged = [&](const std::string& why) {
                    Tape::current().clear();
                    std::ostringstream msg;
                    msg << "train: " << why << " at epoch " << epoch + 1 << ", scenario " << d.scenario.name
                        << ", window start " << start << " s (batch seed 0x" << hex(window_seed) << ")";
                    return DivergenceError(msg.str());
                };
                LossBreakdown loss;
                try {
                    WindowResult res = run_window(ckpt.model, config, d, start, config.label_offsets_s);
                    targets.clear();
                    for (Micros t : res.times) targets.push_back(make_targets(d.ground_truth(t.seconds())));
                    loss = total_loss(res.decoded, targets, res.rollout.kld_total, weights);
                } catch (const DomainError& e) {
                    throw diverged(std::string("numerical failure (") + e.what() + ")");
                }
                if (!std::isfinite(loss.total_value)) throw diverged("non-finite loss");
                backward(loss.total);
                const double lr = cosine_lr(config.optimizer, opt.steps(), total_steps);
                row.grad_norm += opt.step(lr);
                row.lr = lr;
                row.total += loss.total_value;
                row.seg += loss.seg;
                row.spatial += loss.spatial;
                row.kld += loss.kld;
                ++windows;
            }
        }
        const double n = static_cast<double>(std::max<std::size_t>(windows, 1));
        row.total /= n, row.seg /= n, row.spatial /= n, row.kld /= n, row.grad_norm /= n;
        ckpt.epoch = epoch + 1;
        if (history) history->push_back(row);
        if (progress) progress(row);
    }
    std::ostringstream os;
    opt.save(os);
    ckpt.optimizer_state = os.str();
    return ckpt;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "epoch,lr,total,seg,spatial,kld,grad_norm\n" << std::setprecision(17);
    for (const auto& r : rows)
        out << r.epoch << ',' << r.lr << ',' << r.total << ',' << r.seg << ',' << r.spatial << ',' << r.kld << ','
            << r.grad_norm << '\n';
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const ParamList params = ckpt.model.params(ckpt.config);
    nlohmann::json names = nlohmann::json::array();
    {
        std::ofstream out(dir / "params.bin", std::ios::binary);
        for (const auto& p : params.items()) {
            write_snapshot(out, p.tensor);
            const Shape s = p.tensor.shape();
            names.push_back({{"name", p.name}, {"shape", {s.b, s.c, s.h, s.w}}});
        }
        if (!out) throw std::runtime_error("cannot write " + (dir / "params.bin").string());
    }
    {
        std::ofstream out(dir / "optimizer.bin", std::ios::binary);
        out << ckpt.optimizer_state;
    }
    std::ofstream(dir / "config.json") << nlohmann::json(ckpt.config).dump(2) << '\n';
    const nlohmann::json manifest{{"format", 1},
                                  {"epoch", ckpt.epoch},
                                  {"weight_tying", ckpt.config.weight_tying},
                                  {"config_hash", hex(ckpt.config.config_hash())},
                                  {"arch_hash", hex(ckpt.config.arch_hash())},
                                  {"params", names}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, const RunConfig* expected) {
    std::ifstream mf(dir / "manifest.json"), cf(dir / "config.json");
    if (!mf || !cf) throw std::runtime_error("checkpoint " + dir.string() + " lacks manifest.json or config.json");
    const nlohmann::json manifest = nlohmann::json::parse(mf);
    Checkpoint ckpt;
    ckpt.config = nlohmann::json::parse(cf).get<RunConfig>();
    const std::string arch = manifest.at("arch_hash").get<std::string>();
    if (arch != hex(ckpt.config.arch_hash()))
        throw std::runtime_error("checkpoint: arch hash " + arch + " does not match its config");
    if (expected && arch != hex(expected->arch_hash()))
        throw std::runtime_error("checkpoint: arch hash " + arch + " does not match the run config (" +
                                 hex(expected->arch_hash()) + ")");
    ckpt.epoch = manifest.at("epoch").get<std::uint32_t>();
    ckpt.model = Model::make(ckpt.config);
    const ParamList params = ckpt.model.params(ckpt.config);
    const auto& listed = manifest.at("params");
    if (listed.size() != params.size())
        throw std::runtime_error("checkpoint: " + std::to_string(listed.size()) + " parameters listed, model has " +
                                 std::to_string(params.size()));
    std::ifstream pin(dir / "params.bin", std::ios::binary);
    if (!pin) throw std::runtime_error("checkpoint: cannot open params.bin");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& p = params.items()[k];
        if (listed[k].at("name").get<std::string>() != p.name)
            throw std::runtime_error("checkpoint: parameter " + std::to_string(k) + " is " +
                                     listed[k].at("name").get<std::string>() + ", expected " + p.name);
        const Tensor stored = read_snapshot(pin);
        if (!(stored.shape() == p.tensor.shape()))
            throw ShapeError("checkpoint: " + p.name + " stored as " + stored.shape().str() + ", model has " +
                             p.tensor.shape().str());
        Tensor dst = p.tensor;
        std::copy(stored.data().begin(), stored.data().end(), dst.mutable_data().begin());
    }
    std::ifstream oin(dir / "optimizer.bin", std::ios::binary);
    ckpt.optimizer_state.assign(std::istreambuf_iterator<char>(oin), {});
    return ckpt;
}

// ---------------------------------------------------------------- evaluation

unsigned thread_count() {
    if (const char* env = std::getenv("SFLOW_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return 1;
}

std::vector<double> expand_horizons(const std::vector<double>& horizons_s, double interval_s) {
    std::vector<double> out = horizons_s;
    if (interval_s > 0 && !horizons_s.empty()) {
        const double top = *std::max_element(horizons_s.begin(), horizons_s.end());
        for (int k = 1; k * interval_s <= top + 1e-9; ++k) out.push_back(k * interval_s);
    }
    // Dedup at microsecond resolution.
    std::sort(out.begin(), out.end());
    std::vector<double> uniq;
    for (double h : out)
        if (uniq.empty() || Micros::from_seconds(h) != Micros::from_seconds(uniq.back())) uniq.push_back(h);
    return uniq;
}

namespace {

struct Accum {
    IouCounts iou;
    std::size_t tp = 0, fp = 0, fn = 0;
    double iou_sum = 0.0, vpq_sum = 0.0;
    std::size_t sequences = 0;

    void operator+=(const Accum& o) {
        iou += o.iou;
        tp += o.tp, fp += o.fp, fn += o.fn;
        iou_sum += o.iou_sum, vpq_sum += o.vpq_sum;
        sequences += o.sequences;
    }
    MetricRow row(const std::string& name, double h) const {
        MetricRow r{name, h, iou.value(), sequences ? vpq_sum / static_cast<double>(sequences) : 1.0, 1.0, 1.0, 1.0};
        const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
        if (denom > 0) {
            r.pq = iou_sum / denom;
            r.sq = tp ? iou_sum / static_cast<double>(tp) : 0.0;
            r.rq = static_cast<double>(tp) / denom;
        }
        return r;
    }
};

}  // namespace

std::vector<MetricRow> score(const std::vector<ScenarioData>& suite, const EvalOptions& options,
                             const WindowPredictor& predict) {
    std::vector<double> horizons = options.horizons_s;
    std::sort(horizons.begin(), horizons.end());
    if (horizons.empty()) throw std::invalid_argument("evaluate: no horizons requested");
    for (double h : horizons)
        if (!(h >= 0)) throw std::invalid_argument("evaluate: horizons must be non-negative");
    const std::size_t nh = horizons.size();
    std::vector<std::vector<Accum>> per(suite.size(), std::vector<Accum>(nh));

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(suite.size());
    auto worker = [&] {
        NoGradGuard guard;
        for (std::size_t i; (i = next++) < suite.size();) {
            try {
                const ScenarioData& d = suite[i];
                for (double start : options.window_starts_s) {
                    std::vector<InstanceFrame> pred = predict(d, start, horizons);
                    if (pred.size() != nh) throw std::logic_error("evaluate: predictor returned wrong frame count");
                    std::vector<InstanceFrame> gt;
                    for (std::size_t k = 0; k < nh; ++k) gt.push_back(d.ground_truth(pred[k].timestamp.seconds()));
                    const PanopticResult r = vpq(pred, gt);
                    double pq_sum = 0.0;
                    std::size_t scored = 0;
                    for (std::size_t k = 0; k < nh; ++k) {
                        const FrameTally& f = r.frames[k];
                        Accum& a = per[i][k];
                        a.iou += iou_counts(foreground(pred[k]), foreground(gt[k]));
                        a.tp += f.tp(), a.fp += f.fp, a.fn += f.fn;
                        a.iou_sum += f.iou_sum;
                        if (f.tp() + f.fp + f.fn > 0) pq_sum += f.pq(), ++scored;
                        a.vpq_sum += scored ? pq_sum / static_cast<double>(scored) : 1.0;
                        ++a.sequences;
                    }
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(options.threads ? options.threads : thread_count(),
                                                             static_cast<unsigned>(suite.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::vector<MetricRow> rows;
    std::vector<Accum> all(nh);
    for (std::size_t i = 0; i < suite.size(); ++i) {
        for (std::size_t k = 0; k < nh; ++k) {
            rows.push_back(per[i][k].row(suite[i].scenario.name, horizons[k]));
            all[k] += per[i][k];
        }
    }
    for (std::size_t k = 0; k < nh; ++k) rows.push_back(all[k].row("ALL", horizons[k]));
    return rows;
}

std::vector<MetricRow> evaluate(const Checkpoint& ckpt, const std::vector<Scenario>& suite, const EvalOptions& options) {
    const RunConfig& config = ckpt.config;
    for (const Scenario& s : suite)
        if (s.grid_size() != config.grid)
            throw std::invalid_argument("evaluate: scenario " + s.name + " has grid " + std::to_string(s.grid_size()) +
                                        ", checkpoint expects " + std::to_string(config.grid));
    EvalOptions opts = options;
    if (opts.window_starts_s.empty()) opts.window_starts_s = config.eval_window_starts_s;
    const std::vector<ScenarioData> data = prepare(suite, opts.lidar_hz > 0 ? opts.lidar_hz : config.lidar_hz,
                                                   opts.camera_hz > 0 ? opts.camera_hz : config.camera_hz);
    return score(data, opts, [&](const ScenarioData& d, double start, const std::vector<double>& horizons) {
        const WindowResult w = run_window(ckpt.model, config, d, start, horizons);
        std::vector<InstanceFrame> frames;
        for (std::size_t k = 0; k < w.decoded.size(); ++k)
            frames.push_back(instance_postprocess(w.decoded[k], w.times[k], config.postprocess));
        link_instances(frames, Micros::from_seconds(d.scenario.label_interval_s));
        return frames;
    });
}

namespace {

/// 4-connected components of mask, numbered in raster order of their first cell.
std::vector<std::int32_t> components(const std::vector<std::uint8_t>& mask, std::uint32_t h, std::uint32_t w) {
    std::vector<std::int32_t> ids(mask.size(), 0);
    std::int32_t next = 1;
    std::vector<std::size_t> stack;
    for (std::size_t k = 0; k < mask.size(); ++k) {
        if (!mask[k] || ids[k]) continue;
        ids[k] = next;
        stack.push_back(k);
        while (!stack.empty()) {
            const std::size_t c = stack.back();
            stack.pop_back();
            const std::size_t y = c / w, x = c % w;
            const std::size_t nb[4] = {y > 0 ? c - w : c, y + 1 < h ? c + w : c, x > 0 ? c - 1 : c, x + 1 < w ? c + 1 : c};
            for (std::size_t n : nb) {
                if (n != c && mask[n] && !ids[n]) {
                    ids[n] = next;
                    stack.push_back(n);
                }
            }
        }
        ++next;
    }
    return ids;
}

}  // namespace

std::vector<MetricRow> static_baseline(const std::vector<Scenario>& suite, const EvalOptions& options, double past_s) {
    EvalOptions opts = options;
    if (opts.window_starts_s.empty()) opts.window_starts_s = RunConfig{}.eval_window_starts_s;
    const std::vector<ScenarioData> data = prepare(suite, opts.lidar_hz, opts.camera_hz);
    return score(data, opts, [&](const ScenarioData& d, double start, const std::vector<double>& horizons) {
        const Micros present = Micros::from_seconds(start) + Micros::from_seconds(past_s);
        const StampedObservation* last = nullptr;
        for (const auto& o : d.lidar)
            if (o.timestamp <= present) last = &o;
        if (!last) throw std::invalid_argument("static_baseline: no lidar sweep before the present");
        const Shape s = last->feature.shape();
        std::vector<std::uint8_t> mask(s.plane());
        for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = last->feature[k] > 0.5;
        const std::vector<std::int32_t> ids = components(mask, s.h, s.w);
        std::vector<InstanceFrame> frames;
        for (double h : horizons) {
            InstanceFrame f = InstanceFrame::empty(present + Micros::from_seconds(h), s.h, s.w);
            f.ids = ids;
            frames.push_back(std::move(f));
        }
        return frames;
    });
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "scenario,horizon_s,iou,vpq,pq,sq,rq\n" << std::setprecision(17);
    for (const auto& r : rows)
        out << r.scenario << ',' << r.horizon_s << ',' << r.iou << ',' << r.vpq << ',' << r.pq << ',' << r.sq << ','
            << r.rq << '\n';
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        MetricRow r;
        std::string field;
        std::getline(ls, r.scenario, ',');
        double* dst[6] = {&r.horizon_s, &r.iou, &r.vpq, &r.pq, &r.sq, &r.rq};
        for (double* d : dst) {
            if (!std::getline(ls, field, ',')) throw std::runtime_error("metrics csv: short row '" + line + "'");
            *d = std::stod(field);
        }
        rows.push_back(r);
    }
    return rows;
}

const MetricRow& aggregate_row(const std::vector<MetricRow>& rows, double horizon_s) {
    for (const auto& r : rows)
        if (r.scenario == "ALL" && std::abs(r.horizon_s - horizon_s) < 1e-9) return r;
    throw std::out_of_range("no aggregate row at horizon " + std::to_string(horizon_s));
}

// ---------------------------------------------------------------- replay

std::size_t stream_replay(const Checkpoint& ckpt, const std::filesystem::path& dump, const std::vector<double>& offsets_s,
                          const std::filesystem::path& out) {
    NoGradGuard guard;
    const std::vector<StampedObservation> raw = read_stream_dump(dump);
    if (raw.empty()) throw std::invalid_argument("stream_replay: empty dump " + dump.string());
    std::vector<double> offsets = offsets_s;
    std::sort(offsets.begin(), offsets.end());
    for (double o : offsets)
        if (!(o > 0)) throw std::invalid_argument("stream_replay: offsets must be positive");
    Micros present = raw.front().timestamp;
    for (const auto& o : raw) present = std::max(present, o.timestamp);
    const WindowResult w = run_observations(ckpt.model, ckpt.config, raw, present, offsets, true);

    std::filesystem::create_directories(out);
    std::vector<InstanceFrame> frames;
    for (std::size_t k = 0; k < w.decoded.size(); ++k)
        frames.push_back(instance_postprocess(w.decoded[k], w.times[k], ckpt.config.postprocess));
    link_instances(frames, Micros::from_seconds(0.5));
    nlohmann::json listing = nlohmann::json::array();
    for (std::size_t k = 0; k < frames.size(); ++k) {
        const std::string stem = "pred_" + std::to_string(w.times[k].count);
        export_frame(w.decoded[k], frames[k], out, stem);
        listing.push_back({{"timestamp_us", w.times[k].count}, {"stem", stem}});
    }
    {
        std::ofstream trace(out / "trace.jsonl");
        write_trace_jsonl(trace, w.rollout.trace);
    }
    const nlohmann::json manifest{{"present_us", present.count},
                                  {"observations", raw.size()},
                                  {"arch_hash", hex(ckpt.config.arch_hash())},
                                  {"frames", listing}};
    std::ofstream(out / "manifest.json") << manifest.dump(2) << '\n';
    return frames.size();
}

}  // namespace sflow
