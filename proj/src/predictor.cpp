#include "sflow/predictor.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include "json.hpp"

namespace sflow {

PredictorParams PredictorParams::make(std::uint32_t channels, bool weight_tying, std::mt19937_64& rng,
                                      std::uint32_t candidate_depth) {
    PredictorParams p;
    p.dynamics = SpatialGruParams::make(channels, weight_tying, rng, 3, candidate_depth);
    p.fusion = FusionParams::make(channels, weight_tying, rng);
    p.input_inference = Conv::same(channels, channels, 3, rng);
    return p;
}

void PredictorParams::collect(ParamList& out, const std::string& prefix) const {
    dynamics.collect(out, prefix + ".dynamics");
    fusion.collect(out, prefix + ".fusion");
    input_inference.collect(out, prefix + ".input_inference");
}

std::size_t RolloutResult::count(TraceKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(trace.begin(), trace.end(), [&](const TraceEvent& e) { return e.kind == kind; }));
}

const SavedState* RolloutResult::future_state(Micros t) const {
    for (const auto& s : states) {
        if (s.future && s.timestamp == t) return &s;
    }
    return nullptr;
}

std::string to_string(TraceKind k) {
    switch (k) {
        case TraceKind::predict: return "predict";
        case TraceKind::update: return "update";
        case TraceKind::save: return "save";
    }
    return "unknown";
}

void write_trace_jsonl(std::ostream& out, const std::vector<TraceEvent>& trace) {
    for (const auto& e : trace) {
        nlohmann::json j{{"clock_us", e.clock.count}, {"kind", to_string(e.kind)}};
        if (e.modality) j["modality"] = to_string(*e.modality);
        if (e.kld) j["kld"] = *e.kld;
        if (e.dt) j["dt_us"] = e.dt->count;
        out << j.dump() << '\n';
    }
}

std::vector<TraceEvent> read_trace_jsonl(std::istream& in) {
    std::vector<TraceEvent> trace;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        TraceEvent e;
        e.clock = Micros(j.at("clock_us").get<std::int64_t>());
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "predict") e.kind = TraceKind::predict;
        else if (kind == "update") e.kind = TraceKind::update;
        else if (kind == "save") e.kind = TraceKind::save;
        else throw std::invalid_argument("trace: unknown kind " + kind);
        if (j.contains("modality")) e.modality = parse_modality(j["modality"].get<std::string>());
        if (j.contains("kld")) e.kld = j["kld"].get<double>();
        if (j.contains("dt_us")) e.dt = Micros(j["dt_us"].get<std::int64_t>());
        trace.push_back(e);
    }
    return trace;
}

std::vector<StampedObservation> merge_streams(const std::vector<std::vector<StampedObservation>>& streams) {
    std::vector<StampedObservation> merged;
    for (const auto& s : streams) {
        for (std::size_t i = 1; i < s.size(); ++i) {
            if (!(s[i - 1].timestamp < s[i].timestamp)) {
                throw std::invalid_argument("merge_streams: stream not strictly increasing at " +
                                            std::to_string(s[i].timestamp.count) + " us");
            }
        }
        merged.insert(merged.end(), s.begin(), s.end());
    }
    auto key = [](const StampedObservation& o) { return std::pair{o.timestamp, o.modality}; };
    std::stable_sort(merged.begin(), merged.end(),
                     [&](const auto& a, const auto& b) { return key(a) < key(b); });
    for (std::size_t i = 1; i < merged.size(); ++i) {
        if (key(merged[i - 1]) == key(merged[i])) {
            throw std::invalid_argument("merge_streams: duplicate " + to_string(merged[i].modality) +
                                        " observation at " + std::to_string(merged[i].timestamp.count) +
                                        " us");
        }
    }
    return merged;
}

namespace {

class Propagator {
public:
    Propagator(const PredictorParams& params, const SolverConfig& solver, GruOdeState& state,
               std::vector<TraceEvent>* trace)
        : params_(params), solver_(solver), state_(state), trace_(trace) {}

    /// Steps until the clock equals `target`. The last fixed step is
    /// shortened so that the clock lands on the target exactly.
    /// `x` undefined means: infer the input from the state before every step.
    void to(Micros target, const Tensor& x) {
        while (state_.clock < target) {
            const Micros remaining = target - state_.clock;
            const Micros dt = solver_.step_mode == StepMode::variable ? remaining
                                                                       : std::min(solver_.fixed_step, remaining);
            const Tensor input = x.defined() ? x : tanh(params_.input_inference(state_.h));
            state_ = ode_step(solver_, params_.dynamics, input, state_, dt);
            if (trace_) trace_->push_back(TraceEvent{state_.clock, TraceKind::predict, {}, {}, dt});
        }
    }

private:
    const PredictorParams& params_;
    const SolverConfig& solver_;
    GruOdeState& state_;
    std::vector<TraceEvent>* trace_;
};

}  // namespace

RolloutResult rollout(const PredictorParams& params, const std::vector<StampedObservation>& observations,
                      const PredictionRequest& request, const RolloutOptions& options) {
    if (observations.empty()) throw std::invalid_argument("rollout: no observations");
    request.solver.validate();
    const Micros present = observations.back().timestamp;
    for (std::size_t i = 0; i < request.horizons.size(); ++i) {
        if (!(request.horizons[i] > present)) {
            throw std::invalid_argument("rollout: horizon " + std::to_string(request.horizons[i].count) +
                                        " us is not after present " + std::to_string(present.count) + " us");
        }
        if (i > 0 && !(request.horizons[i - 1] < request.horizons[i])) {
            throw std::invalid_argument("rollout: horizons must be sorted and unique");
        }
    }

    RolloutResult result;
    std::vector<TraceEvent>* trace = options.record_trace ? &result.trace : nullptr;
    const Shape hidden = observations.front().feature.shape();
    GruOdeState state{Tensor::zeros(hidden), observations.front().timestamp};
    Propagator propagate(params, request.solver, state, trace);

    Tensor x = observations.front().feature;
    for (const auto& o : observations) {
        propagate.to(o.timestamp, x);
        UpdateResult up = ode_update(params.fusion, state, o, options.fusion);
        state = up.state;
        result.kld_total = result.kld_total.defined() ? add(result.kld_total, up.kld) : up.kld;
        if (trace) {
            trace->push_back(TraceEvent{state.clock, TraceKind::update, o.modality, up.kld.item(), {}});
            trace->push_back(TraceEvent{state.clock, TraceKind::save, {}, {}, {}});
        }
        result.states.push_back(SavedState{state.clock, state.h, false});
        x = o.feature;
    }
    for (Micros t : request.horizons) {
        propagate.to(t, Tensor{});
        if (trace) trace->push_back(TraceEvent{state.clock, TraceKind::save, {}, {}, {}});
        result.states.push_back(SavedState{state.clock, state.h, true});
    }
    return result;
}

RolloutResult zero_shot_extend(const PredictorParams& params,
                               const std::vector<StampedObservation>& observations,
                               const PredictionRequest& request, const RolloutOptions& options) {
    return rollout(params, observations, request, options);
}

}  // namespace sflow
