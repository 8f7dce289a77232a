#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "sflow/bev_codec.hpp"
#include "sflow/metrics.hpp"
#include "sflow/predictor.hpp"
#include "sflow/world_sim.hpp"

namespace sflow {

enum class FusionMode { gru_ode, sync_baseline };

std::string to_string(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);

struct OptimizerConfig {
    double learning_rate = 1e-4;
    double min_learning_rate = 0.0;  // cosine floor
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0;  // global L2 norm; <= 0 disables clipping
};

struct LossConfig {
    double seg = 1.0;
    double spatial = 1.0;
    double kld = 1.0;
    double foreground_class_weight = 2.0;
    RegressionLoss regression = RegressionLoss::l1;
    bool uncertainty = false;
};

struct RunConfig {
    std::filesystem::path train_suite;  // directory of scenario JSON files
    std::filesystem::path eval_suite;
    std::uint32_t channels = 8;
    std::uint32_t grid = 64;
    bool weight_tying = false;
    std::uint32_t candidate_depth = 1;
    SolverConfig solver;
    double lidar_hz = 5.0;
    double camera_hz = 2.0;
    /// Observation window length before the present.
    double past_s = 1.0;
    /// Supervised label times relative to the present.
    std::vector<double> label_offsets_s{0.0, 0.5, 1.0, 1.5, 2.0};
    /// Candidate window starts; each epoch draws `windows_per_scenario` of them.
    std::vector<double> window_starts_s{0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
    std::uint32_t windows_per_scenario = 1;
    std::vector<double> eval_window_starts_s{0.0, 1.0, 2.0, 3.0};
    OptimizerConfig optimizer;
    LossConfig loss;
    std::uint32_t epochs = 50;
    std::uint64_t seed = 0;
    FusionMode fusion = FusionMode::gru_ode;
    bool kld_state_only = false;
    PostprocessConfig postprocess;

    /// Structural checks; suite paths must exist. Throws std::invalid_argument.
    void validate() const;
    /// Label times inside every scenario's duration for every window start.
    void validate_against(const std::vector<Scenario>& suite) const;
    std::uint64_t config_hash() const;
    /// Hash of the fields that determine parameter shapes and meaning.
    std::uint64_t arch_hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
/// Relative suite paths resolve against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

/// Sorted by file name. Throws if the directory holds no scenarios.
std::vector<Scenario> load_suite(const std::filesystem::path& dir);
void save_suite(const std::vector<Scenario>& suite, const std::filesystem::path& dir);

/// Overrides both sensor rates, keeping noise and phase.
Scenario with_rates(Scenario s, double lidar_hz, double camera_hz);

struct Model {
    CodecParams codec;
    PredictorParams predictor;
    Conv sync_fusion;  // 2C -> C, sync-baseline arm only
    Tensor log_vars;   // (1, 3, 1, 1), uncertainty weighting only

    static Model make(const RunConfig& config);
    ParamList params(const RunConfig& config) const;
};

/// Raw streams and ground truth for one scenario, precomputed once.
struct ScenarioData {
    Scenario scenario;
    std::vector<StampedObservation> lidar;
    std::vector<StampedObservation> camera;

    static ScenarioData make(const Scenario& s);
    InstanceFrame ground_truth(double t) const { return render_ground_truth(scenario, t); }
};

struct WindowResult {
    Micros present;
    std::vector<Micros> times;
    std::vector<DecodedFrame> decoded;
    RolloutResult rollout;
};

/// Encodes the window's observations, rolls out to present + offsets and
/// decodes there. Offsets may include 0 (the present).
WindowResult run_window(const Model& model, const RunConfig& config, const ScenarioData& data, double start_s,
                        const std::vector<double>& offsets_s, bool record_trace = false);
/// Same, on an explicit observation list of raw grids.
WindowResult run_observations(const Model& model, const RunConfig& config,
                              const std::vector<StampedObservation>& raw, Micros present,
                              const std::vector<double>& offsets_s, bool record_trace = false);

class AdamW {
public:
    AdamW(const ParamList& params, OptimizerConfig config);
    /// Clips, then applies one decoupled-weight-decay Adam step at `lr`.
    /// Returns the pre-clip global gradient norm.
    double step(double lr);
    std::uint64_t steps() const { return t_; }
    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    ParamList params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t t_ = 0;
};

/// Cosine annealing from config.learning_rate to config.min_learning_rate.
double cosine_lr(const OptimizerConfig& config, std::uint64_t step, std::uint64_t total_steps);

struct HistoryRow {
    std::uint32_t epoch = 0;
    double lr = 0.0;
    double total = 0.0;
    double seg = 0.0;
    double spatial = 0.0;
    double kld = 0.0;
    double grad_norm = 0.0;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    RunConfig config;
    Model model;
    std::uint32_t epoch = 0;
    std::string optimizer_state;  // serialized AdamW moments, opaque
};

using ProgressFn = std::function<void(const HistoryRow&)>;

/// Trains on config.train_suite. Throws DivergenceError naming the window
/// seed when a loss turns non-finite.
Checkpoint train(const RunConfig& config, std::vector<HistoryRow>* history = nullptr,
                 const ProgressFn& progress = {});

/// Directory with params.bin, optimizer.bin, config.json and manifest.json.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Refuses checkpoints whose arch hash does not match their config or
/// `expected` (when given), and parameter lists that do not line up.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const RunConfig* expected = nullptr);

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

struct EvalOptions {
    std::vector<double> horizons_s;      // relative to the present, >= 0
    std::vector<double> window_starts_s;  // empty: config.eval_window_starts_s
    double lidar_hz = 0.0;                // 0: config rate (scenario rate for baselines)
    double camera_hz = 0.0;
    unsigned threads = 0;  // 0: SFLOW_THREADS or 1
};

/// `--interval` expansion: every multiple of `interval` up to max(horizons),
/// merged with the horizons themselves.
std::vector<double> expand_horizons(const std::vector<double>& horizons_s, double interval_s);

struct MetricRow {
    std::string scenario;  // "ALL" for the aggregate
    double horizon_s = 0.0;
    double iou = 0.0;
    double vpq = 0.0;  // over the horizon sequence up to this horizon
    double pq = 0.0;
    double sq = 0.0;
    double rq = 0.0;
};

/// Predictor for one window: returns predicted instance frames at
/// present + horizons, given the scenario and window start.
using WindowPredictor = std::function<std::vector<InstanceFrame>(const ScenarioData&, double start_s,
                                                                 const std::vector<double>& horizons_s)>;

/// Shared scoring path for the model and for baselines: per-scenario rows
/// then ALL rows, horizons ascending.
std::vector<MetricRow> score(const std::vector<ScenarioData>& suite, const EvalOptions& options,
                             const WindowPredictor& predict);

std::vector<MetricRow> evaluate(const Checkpoint& ckpt, const std::vector<Scenario>& suite,
                                const EvalOptions& options);

/// Last lidar grid at or before the present, thresholded at 0.5 and split
/// into 4-connected components, copied unchanged to every horizon.
std::vector<MetricRow> static_baseline(const std::vector<Scenario>& suite, const EvalOptions& options,
                                       double past_s = 1.0);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);
/// Horizon row of the aggregate, or throws.
const MetricRow& aggregate_row(const std::vector<MetricRow>& rows, double horizon_s);

/// Replays a stream dump through the model: predictions at present + each
/// offset are exported as PGM/JSON, the rollout trace as trace.jsonl.
/// Returns the number of exported prediction frames.
std::size_t stream_replay(const Checkpoint& ckpt, const std::filesystem::path& dump,
                          const std::vector<double>& offsets_s, const std::filesystem::path& out);

/// Thread count from SFLOW_THREADS, defaulting to 1.
unsigned thread_count();

/// 64-bit FNV-1a, for config and file fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace sflow
