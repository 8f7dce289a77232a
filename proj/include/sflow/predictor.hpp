#pragma once

#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

#include "sflow/fusion.hpp"
#include "sflow/gru_ode.hpp"

namespace sflow {

/// Everything the rollout needs beyond the encoders.
struct PredictorParams {
    SpatialGruParams dynamics;
    FusionParams fusion;
    /// Infers the next ODE input from the state once no observations remain.
    Conv input_inference;

    static PredictorParams make(std::uint32_t channels, bool weight_tying, std::mt19937_64& rng,
                                std::uint32_t candidate_depth = 1);
    void collect(ParamList& out, const std::string& prefix) const;
};

struct PredictionRequest {
    std::vector<Micros> horizons;  // absolute timestamps, sorted, unique, all > present
    SolverConfig solver;
};

enum class TraceKind { predict, update, save };

struct TraceEvent {
    Micros clock;
    TraceKind kind = TraceKind::predict;
    std::optional<Modality> modality;  // update events
    std::optional<double> kld;         // update events
    std::optional<Micros> dt;          // predict events
};

struct SavedState {
    Micros timestamp;
    Tensor h;
    bool future = false;
};

struct RolloutResult {
    std::vector<SavedState> states;
    Tensor kld_total;
    std::vector<TraceEvent> trace;

    std::size_t count(TraceKind kind) const;
    /// The saved future state at `t`, or nullptr.
    const SavedState* future_state(Micros t) const;
};

std::string to_string(TraceKind k);

/// One JSON object per line: {clock_us, kind, modality?, kld?, dt_us?}.
void write_trace_jsonl(std::ostream& out, const std::vector<TraceEvent>& trace);
std::vector<TraceEvent> read_trace_jsonl(std::istream& in);

/// Merges per-modality streams into one sequence ordered by (timestamp,
/// modality). Throws std::invalid_argument on a stream that is not strictly
/// increasing or on a duplicate (timestamp, modality) pair.
std::vector<StampedObservation> merge_streams(const std::vector<std::vector<StampedObservation>>& streams);

struct RolloutOptions {
    FusionOptions fusion;
    bool record_trace = true;
};

/// Past phase: propagate to each observation, update, save. Future phase:
/// propagate to each requested horizon, save. Observations must already be
/// encoded to the hidden resolution.
RolloutResult rollout(const PredictorParams& params, const std::vector<StampedObservation>& observations,
                      const PredictionRequest& request, const RolloutOptions& options = {});

/// Rollout at horizons beyond those seen in training. Same code path.
RolloutResult zero_shot_extend(const PredictorParams& params,
                               const std::vector<StampedObservation>& observations,
                               const PredictionRequest& request, const RolloutOptions& options = {});

}  // namespace sflow
