#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sflow/engine.hpp"

using namespace sflow;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sflow_engine_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<Scenario> small_suite(std::uint64_t seed, std::uint32_t count) {
    SuiteOptions o;
    o.central_half_width_m = 3.0;
    o.min_agents = 1;
    o.max_agents = 2;
    auto suite = generate_suite(seed, count, "s", o);
    for (auto& s : suite) {
        s.extent_m = 16.0;
        s.duration_s = 4.0;
    }
    return suite;
}

RunConfig small_config(const fs::path& root) {
    save_suite(small_suite(3, 2), root / "train");
    save_suite(small_suite(4, 1), root / "eval");
    RunConfig c;
    c.train_suite = root / "train";
    c.eval_suite = root / "eval";
    c.channels = 4;
    c.grid = 32;
    c.label_offsets_s = {0.0, 0.5, 1.0};
    c.window_starts_s = {0.0, 1.0};
    c.eval_window_starts_s = {0.0, 1.0};
    c.epochs = 1;
    c.optimizer.learning_rate = 1e-3;
    return c;
}

EvalOptions at(std::vector<double> horizons, std::vector<double> starts = {}) {
    EvalOptions o;
    o.horizons_s = std::move(horizons);
    o.window_starts_s = std::move(starts);
    return o;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndHashes) {
    RunConfig c;
    c.train_suite = "/a";
    c.channels = 6;
    c.solver.method = SolverMethod::midpoint;
    c.solver.step_mode = StepMode::variable;
    c.fusion = FusionMode::sync_baseline;
    c.loss.uncertainty = true;
    c.loss.regression = RegressionLoss::l2;
    c.label_offsets_s = {0.0, 0.25};
    const RunConfig back = nlohmann::json(c).get<RunConfig>();
    EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(c).dump());
    EXPECT_EQ(back.config_hash(), c.config_hash());
    EXPECT_EQ(back.arch_hash(), c.arch_hash());

    RunConfig lr = c;
    lr.optimizer.learning_rate = 0.5;
    EXPECT_NE(lr.config_hash(), c.config_hash());
    EXPECT_EQ(lr.arch_hash(), c.arch_hash());
    RunConfig wide = c;
    wide.channels = 7;
    EXPECT_NE(wide.arch_hash(), c.arch_hash());
}

TEST(RunConfig, ValidationRejectsBadInputs) {
    const fs::path root = temp_dir("validate");
    RunConfig c = small_config(root);
    EXPECT_NO_THROW(c.validate());
    RunConfig missing = c;
    missing.train_suite = root / "nope";
    EXPECT_THROW(missing.validate(), std::invalid_argument);
    RunConfig unsorted = c;
    unsorted.label_offsets_s = {0.5, 0.5};
    EXPECT_THROW(unsorted.validate(), std::invalid_argument);
    RunConfig late = c;
    late.window_starts_s = {2.5};
    EXPECT_THROW(late.validate_against(load_suite(c.train_suite)), std::invalid_argument);
    RunConfig grid = c;
    grid.grid = 64;
    EXPECT_THROW(grid.validate_against(load_suite(c.train_suite)), std::invalid_argument);
    EXPECT_THROW(nlohmann::json({{"fusion", "late"}}).get<RunConfig>(), std::invalid_argument);
}

TEST(RunConfig, RelativeSuitePathsResolveAgainstConfigFile) {
    const fs::path root = temp_dir("relative");
    std::ofstream(root / "c.json") << R"({"train_suite": "suites/train", "epochs": 2})";
    const RunConfig c = load_run_config(root / "c.json");
    EXPECT_EQ(c.train_suite, root / "suites/train");
    EXPECT_EQ(c.epochs, 2u);
    EXPECT_EQ(c.optimizer.weight_decay, 0.01);
}

TEST(Optimizer, CosineScheduleEndpoints) {
    OptimizerConfig o;
    o.learning_rate = 1e-3;
    o.min_learning_rate = 1e-5;
    EXPECT_DOUBLE_EQ(cosine_lr(o, 0, 11), 1e-3);
    EXPECT_NEAR(cosine_lr(o, 5, 11), 0.5 * (1e-3 + 1e-5), 1e-15);
    EXPECT_NEAR(cosine_lr(o, 10, 11), 1e-5, 1e-15);
    for (std::uint64_t s = 1; s < 11; ++s) EXPECT_LE(cosine_lr(o, s, 11), cosine_lr(o, s - 1, 11));
}

TEST(Optimizer, AdamWStepMatchesHandComputation) {
    Tensor p = Tensor::from({1, 1, 1, 2}, {1.0, -2.0}, true);
    ParamList list;
    list.add("p", p);
    OptimizerConfig o;
    o.weight_decay = 0.1;
    o.clip_norm = 0.0;
    AdamW opt(list, o);
    backward(sum(mul(p, Tensor::from({1, 1, 1, 2}, {3.0, 4.0}))));
    opt.step(0.01);
    // First step: m_hat = g, v_hat = g^2, so the update is sign(g) plus decay.
    EXPECT_NEAR(p[0], 1.0 - 0.01 * (3.0 / (3.0 + 1e-8) + 0.1 * 1.0), 1e-15);
    EXPECT_NEAR(p[1], -2.0 - 0.01 * (4.0 / (4.0 + 1e-8) + 0.1 * -2.0), 1e-15);
    EXPECT_FALSE(p.has_grad());
}

TEST(Optimizer, ClippingScalesToGlobalNorm) {
    Tensor a = Tensor::from({1, 1, 1, 1}, {0.0}, true), b = Tensor::from({1, 1, 1, 1}, {0.0}, true);
    ParamList list;
    list.add("a", a);
    list.add("b", b);
    OptimizerConfig o;
    o.weight_decay = 0.0;
    o.clip_norm = 1.0;
    // A large epsilon makes the first Adam step depend on the gradient scale.
    o.epsilon = 1.0;
    AdamW opt(list, o);
    backward(add(scale(a, 30.0), scale(b, 40.0)));
    EXPECT_NEAR(opt.step(1.0), 50.0, 1e-12);
    EXPECT_NEAR(a[0], -0.6 / 1.6, 1e-12);
    EXPECT_NEAR(b[0], -0.8 / 1.8, 1e-12);
    std::stringstream ss;
    opt.save(ss);
    AdamW other(list, o);
    other.load(ss);
    EXPECT_EQ(other.steps(), 1u);
}

TEST(Engine, ExpandHorizonsAndThreads) {
    EXPECT_EQ(expand_horizons({1.0, 2.0}, 0.0), (std::vector<double>{1.0, 2.0}));
    EXPECT_EQ(expand_horizons({1.0, 2.0}, 0.5).size(), 4u);
    EXPECT_EQ(expand_horizons({1.0, 2.0}, 0.25).size(), 8u);
    EXPECT_EQ(expand_horizons({0.3}, 0.25), (std::vector<double>{0.25, 0.3}));
    ::setenv("SFLOW_THREADS", "3", 1);
    EXPECT_EQ(thread_count(), 3u);
    ::setenv("SFLOW_THREADS", "junk", 1);
    EXPECT_EQ(thread_count(), 1u);
    ::unsetenv("SFLOW_THREADS");
}

TEST(Engine, LossDecompositionMatchesWeights) {
    const fs::path root = temp_dir("decomp");
    RunConfig c = small_config(root);
    c.loss.seg = 0.7;
    c.loss.spatial = 1.3;
    c.loss.kld = 0.4;
    const Model m = Model::make(c);
    const ScenarioData d = ScenarioData::make(load_suite(c.train_suite)[0]);
    const WindowResult w = run_window(m, c, d, 0.0, c.label_offsets_s);
    std::vector<Targets> t;
    for (Micros ts : w.times) t.push_back(make_targets(d.ground_truth(ts.seconds())));
    LossWeights lw;
    lw.seg = 0.7;
    lw.spatial = 1.3;
    lw.kld = 0.4;
    const LossBreakdown l = total_loss(w.decoded, t, w.rollout.kld_total, lw);
    EXPECT_NEAR(l.total_value, 0.7 * l.seg + 1.3 * l.spatial + 0.4 * l.kld, 1e-9);
    Tape::current().clear();
    EXPECT_EQ(w.times.front(), Micros(1'000'000));
    EXPECT_EQ(w.decoded.size(), 3u);
}

TEST(Engine, TrainSmokeDeterminismAndCheckpointRoundTrip) {
    const fs::path root = temp_dir("train");
    const RunConfig c = small_config(root);
    std::vector<HistoryRow> h1, h2;
    const Checkpoint a = train(c, &h1);
    const Checkpoint b = train(c, &h2);
    ASSERT_EQ(h1.size(), 1u);
    EXPECT_TRUE(std::isfinite(h1[0].total));
    EXPECT_EQ(h1[0].total, h2[0].total);
    save_checkpoint(a, root / "ca");
    save_checkpoint(b, root / "cb");
    for (const char* f : {"params.bin", "optimizer.bin", "manifest.json", "config.json"})
        EXPECT_EQ(slurp(root / "ca" / f), slurp(root / "cb" / f)) << f;

    EvalOptions opts;
    opts.horizons_s = {0.5, 1.0};
    const auto suite = load_suite(c.eval_suite);
    const auto before = evaluate(a, suite, opts);
    const Checkpoint loaded = load_checkpoint(root / "ca", &c);
    const auto after = evaluate(loaded, suite, opts);
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        EXPECT_EQ(before[i].iou, after[i].iou);
        EXPECT_EQ(before[i].vpq, after[i].vpq);
        EXPECT_EQ(before[i].pq, after[i].pq);
    }
    EXPECT_EQ(loaded.epoch, 1u);
    write_metrics_csv(root / "m1.csv", before);
    write_metrics_csv(root / "m2.csv", after);
    EXPECT_EQ(slurp(root / "m1.csv"), slurp(root / "m2.csv"));
    const auto parsed = read_metrics_csv(root / "m1.csv");
    ASSERT_EQ(parsed.size(), before.size());
    EXPECT_EQ(parsed.back().iou, before.back().iou);

    RunConfig other = c;
    other.channels = 5;
    EXPECT_THROW(load_checkpoint(root / "ca", &other), std::runtime_error);

    // Threaded evaluation gives the same rows.
    opts.threads = 2;
    const auto threaded = evaluate(a, load_suite(c.train_suite), opts);
    opts.threads = 1;
    const auto serial = evaluate(a, load_suite(c.train_suite), opts);
    for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_EQ(serial[i].iou, threaded[i].iou);
}

TEST(Engine, EvaluateRowsAndMismatch) {
    const fs::path root = temp_dir("rows");
    RunConfig c = small_config(root);
    const Checkpoint ck{c, Model::make(c), 0, {}};
    const auto suite = load_suite(c.eval_suite);
    const EvalOptions coarse = at(expand_horizons({1.0}, 0.5)), fine = at(expand_horizons({1.0}, 0.25));
    const auto a = evaluate(ck, suite, coarse);
    const auto b = evaluate(ck, suite, fine);
    EXPECT_EQ(a.size(), 2u * (suite.size() + 1));
    EXPECT_EQ(b.size(), 4u * (suite.size() + 1));
    for (const auto& r : a) {
        EXPECT_GE(r.iou, 0.0);
        EXPECT_LE(r.iou, 1.0);
        EXPECT_NO_THROW(aggregate_row(b, r.horizon_s));
    }
    auto big = suite;
    big[0].extent_m = 32.0;
    EXPECT_THROW(evaluate(ck, big, coarse), std::invalid_argument);
    EXPECT_THROW(evaluate(ck, suite, EvalOptions{}), std::invalid_argument);
}

TEST(Engine, DivergenceGuardNamesTheBatch) {
    const fs::path root = temp_dir("diverge");
    RunConfig c = small_config(root);
    c.optimizer.learning_rate = 1e300;
    c.optimizer.clip_norm = 0.0;
    c.epochs = 3;
    try {
        train(c);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("batch seed"), std::string::npos);
    }
    EXPECT_EQ(Tape::current().size(), 0u);
}

TEST(Engine, SyncBaselineArmTrainsAndEvaluates) {
    const fs::path root = temp_dir("sync");
    RunConfig c = small_config(root);
    c.fusion = FusionMode::sync_baseline;
    const Checkpoint ck = train(c);
    const EvalOptions opts = at({0.5, 1.0});
    const auto rows = evaluate(ck, load_suite(c.eval_suite), opts);
    EXPECT_EQ(rows.size(), 4u);
    ParamList p = ck.model.params(c);
    bool has_sync = false;
    for (const auto& n : p.items()) has_sync |= n.name.rfind("sync_fusion", 0) == 0;
    EXPECT_TRUE(has_sync);
}

TEST(StaticBaseline, StaticNoiselessWorldScoresOne) {
    auto suite = small_suite(5, 2);
    for (auto& s : suite) {
        for (auto& a : s.agents) {
            a.speed = 0.0;
            a.yaw_rate = 0.0;
            a.program.clear();
        }
        for (auto& sensor : s.sensors) sensor.noise = NoiseSpec{};
    }
    const EvalOptions opts = at({0.5, 1.0, 2.0}, {0.0, 1.0});
    for (const auto& r : static_baseline(suite, opts)) {
        EXPECT_EQ(r.iou, 1.0) << r.scenario << " " << r.horizon_s;
        EXPECT_EQ(r.vpq, 1.0);
    }
}

TEST(StaticBaseline, MovingAgentsDecayWithHorizon) {
    const auto suite = generate_suite(0, 25, "scn");
    const std::vector<Scenario> eval(suite.begin() + 20, suite.end());
    const EvalOptions opts = at({0.5, 1.0, 1.5, 2.0});
    const auto rows = static_baseline(eval, opts);
    for (std::size_t k = 1; k < opts.horizons_s.size(); ++k)
        EXPECT_LT(aggregate_row(rows, opts.horizons_s[k]).iou, aggregate_row(rows, opts.horizons_s[k - 1]).iou);
}

TEST(StreamReplay, DenseExportAndAsynchronyTolerance) {
    const fs::path root = temp_dir("replay");
    RunConfig c = small_config(root);
    const Checkpoint ck{c, Model::make(c), 0, {}};
    Scenario s = load_suite(c.eval_suite)[0];
    s.duration_s = 1.0;
    write_stream_dump(emit_streams(s), root / "dump");

    std::vector<double> at;
    for (int k = 1; k <= 40; ++k) at.push_back(0.05 * k);
    EXPECT_EQ(stream_replay(ck, root / "dump", at, root / "out"), 40u);
    std::size_t pgms = 0;
    for (const auto& e : fs::directory_iterator(root / "out"))
        pgms += e.path().extension() == ".pgm" && e.path().filename().string().find("_instances") != std::string::npos;
    EXPECT_EQ(pgms, 40u);
    std::ifstream trace(root / "out" / "trace.jsonl");
    const auto events = read_trace_jsonl(trace);
    std::size_t updates = 0;
    for (const auto& e : events) updates += e.kind == TraceKind::update;
    EXPECT_EQ(updates, 6u + 3u);

    // Drop the first camera frame from the manifest.
    nlohmann::json m = nlohmann::json::parse(slurp(root / "dump" / "manifest.json"));
    for (auto it = m.begin(); it != m.end(); ++it) {
        if ((*it)["modality"] == "camera") {
            m.erase(it);
            break;
        }
    }
    std::ofstream(root / "dump" / "manifest.json") << m.dump();
    EXPECT_EQ(stream_replay(ck, root / "dump", {0.5, 1.0}, root / "out2"), 2u);

    // Swap two entries: the predictor rejects the out-of-order stream.
    std::swap(m[0], m[m.size() - 1]);
    std::ofstream(root / "dump" / "manifest.json") << m.dump();
    EXPECT_THROW(stream_replay(ck, root / "dump", {0.5}, root / "out3"), OutOfOrderObservation);
}
