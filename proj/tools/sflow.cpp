#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sflow/engine.hpp"
#include "sflow/pgm.hpp"

using namespace sflow;
namespace fs = std::filesystem;

namespace {

void write_manifest(const fs::path& dir, const std::string& command, nlohmann::json extra) {
    fs::create_directories(dir);
    extra["command"] = command;
    std::ofstream(dir / "manifest.json") << extra.dump(2) << '\n';
}

/// "step:end" -> step, 2*step, ... <= end; "start:end:step" -> start, start+step, ...
std::vector<double> parse_range(const std::string& spec) {
    std::vector<double> parts;
    std::stringstream ss(spec);
    for (std::string item; std::getline(ss, item, ':');) parts.push_back(std::stod(item));
    if (parts.size() < 2 || parts.size() > 3) throw CLI::ValidationError("--at", "expected step:end or start:end:step");
    const double start = parts[0], end = parts[1], step = parts.size() == 3 ? parts[2] : parts[0];
    if (!(step > 0) || !(start > 0) || end < start) throw CLI::ValidationError("--at", "range must be positive");
    std::vector<double> out;
    for (int k = 0;; ++k) {
        const double t = start + k * step;
        if (t > end + 1e-9) break;
        out.push_back(t);
    }
    return out;
}

void print_rows(const std::vector<MetricRow>& rows) {
    for (const auto& r : rows)
        if (r.scenario == "ALL")
            std::printf("horizon %.3f s  iou %.4f  vpq %.4f  pq %.4f  sq %.4f  rq %.4f\n", r.horizon_s, r.iou, r.vpq, r.pq,
                        r.sq, r.rq);
}

void export_labels(const Scenario& s, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json list = nlohmann::json::array();
    const int n = static_cast<int>(std::floor(s.duration_s / s.label_interval_s + 1e-9));
    for (int k = 0; k <= n; ++k) {
        const InstanceFrame f = render_ground_truth(s, k * s.label_interval_s);
        GrayImage img{f.width, f.height, 65535, {}};
        for (auto v : f.ids) img.pixels.push_back(static_cast<std::uint16_t>(v));
        const std::string file = "instances_" + std::to_string(f.timestamp.count) + ".pgm";
        write_pgm(dir / file, img);
        list.push_back({{"timestamp_us", f.timestamp.count}, {"file", file}});
    }
    std::ofstream(dir / "labels.json") << list.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continuous-time BEV occupancy forecasting"};
    app.require_subcommand(1);

    // gen-suite
    auto* gen = app.add_subcommand("gen-suite", "Generate train/eval scenario suites");
    std::uint64_t gen_seed = 0;
    std::uint32_t n_train = 20, n_eval = 5;
    fs::path gen_out;
    gen->add_option("--seed", gen_seed, "Suite seed");
    gen->add_option("--train", n_train, "Training scenarios");
    gen->add_option("--eval", n_eval, "Evaluation scenarios");
    gen->add_option("--out", gen_out, "Output directory")->required();

    // simulate
    auto* sim = app.add_subcommand("simulate", "Render sensor streams and labels for one scenario");
    fs::path sim_scenario, sim_out;
    double sim_lidar = 0, sim_camera = 0;
    sim->add_option("--scenario", sim_scenario, "Scenario JSON")->required()->check(CLI::ExistingFile);
    sim->add_option("--out", sim_out, "Output directory")->required();
    sim->add_option("--lidar-hz", sim_lidar, "Override lidar rate");
    sim->add_option("--camera-hz", sim_camera, "Override camera rate");

    // train
    auto* tr = app.add_subcommand("train", "Train a model");
    fs::path train_config, train_out;
    tr->add_option("--config", train_config, "Run config JSON")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", train_out, "Checkpoint directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    fs::path eval_ckpt, eval_suite, eval_out, eval_config;
    std::vector<double> eval_horizons, eval_starts;
    double eval_interval = 0, eval_lidar = 0, eval_camera = 0;
    ev->add_option("--ckpt", eval_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--suite", eval_suite, "Scenario suite directory (default: config eval suite)");
    ev->add_option("--config", eval_config, "Run config to check the checkpoint against");
    ev->add_option("--horizons", eval_horizons, "Horizons in seconds")->delimiter(',')->required();
    ev->add_option("--interval", eval_interval, "Add every multiple of this interval");
    ev->add_option("--starts", eval_starts, "Window starts in seconds")->delimiter(',');
    ev->add_option("--lidar-hz", eval_lidar, "Override lidar rate");
    ev->add_option("--camera-hz", eval_camera, "Override camera rate");
    ev->add_option("--out", eval_out, "Run directory")->required();

    // stream
    auto* st = app.add_subcommand("stream", "Replay a stream dump and export predictions");
    fs::path stream_ckpt, stream_dump, stream_out;
    std::string stream_at;
    st->add_option("--ckpt", stream_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    st->add_option("--dump", stream_dump, "Stream dump directory")->required()->check(CLI::ExistingDirectory);
    st->add_option("--at", stream_at, "Offsets after the last observation, step:end or start:end:step")->required();
    st->add_option("--out", stream_out, "Output directory")->required();

    // baseline
    auto* bl = app.add_subcommand("baseline", "Static baseline metrics");
    fs::path bl_suite, bl_out;
    std::vector<double> bl_horizons, bl_starts;
    double bl_interval = 0, bl_past = 1.0, bl_lidar = 0, bl_camera = 0;
    bl->add_option("--suite", bl_suite, "Scenario suite directory")->required()->check(CLI::ExistingDirectory);
    bl->add_option("--horizons", bl_horizons, "Horizons in seconds")->delimiter(',')->required();
    bl->add_option("--interval", bl_interval, "Add every multiple of this interval");
    bl->add_option("--starts", bl_starts, "Window starts in seconds")->delimiter(',');
    bl->add_option("--past", bl_past, "Window length before the present");
    bl->add_option("--lidar-hz", bl_lidar, "Override lidar rate");
    bl->add_option("--camera-hz", bl_camera, "Override camera rate");
    bl->add_option("--out", bl_out, "Run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto all = generate_suite(gen_seed, n_train + n_eval, "scn");
            std::vector<Scenario> train(all.begin(), all.begin() + n_train), eval(all.begin() + n_train, all.end());
            save_suite(train, gen_out / "train");
            save_suite(eval, gen_out / "eval");
            write_manifest(gen_out, "gen-suite", {{"seed", gen_seed}, {"train", n_train}, {"eval", n_eval}});
            std::printf("wrote %u train and %u eval scenarios to %s\n", n_train, n_eval, gen_out.c_str());
        } else if (*sim) {
            Scenario s = load_scenario(sim_scenario);
            if (sim_lidar > 0 || sim_camera > 0)
                s = with_rates(s, sim_lidar > 0 ? sim_lidar : s.sensor(Modality::lidar).rate_hz,
                               sim_camera > 0 ? sim_camera : s.sensor(Modality::camera).rate_hz);
            const auto streams = emit_streams(s);
            write_stream_dump(streams, sim_out / "streams");
            export_labels(s, sim_out / "labels");
            save_scenario(s, sim_out / "scenario.json");
            std::size_t n = 0;
            for (const auto& st_ : streams) n += st_.size();
            write_manifest(sim_out, "simulate", {{"scenario", s.name}, {"observations", n}});
            std::printf("%s: %zu observations\n", s.name.c_str(), n);
        } else if (*tr) {
            const RunConfig config = load_run_config(train_config);
            std::vector<HistoryRow> history;
            const auto t0 = std::chrono::steady_clock::now();
            const Checkpoint ckpt = train(config, &history, [&](const HistoryRow& r) {
                const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                std::printf("epoch %3u  lr %.2e  loss %.5f  seg %.5f  spatial %.5f  kld %.5f  |g| %.3f  (%.0f s)\n",
                            r.epoch, r.lr, r.total, r.seg, r.spatial, r.kld, r.grad_norm, el);
                std::fflush(stdout);
            });
            save_checkpoint(ckpt, train_out);
            write_history_csv(train_out / "history.csv", history);
        } else if (*ev) {
            const RunConfig expected = eval_config.empty() ? RunConfig{} : load_run_config(eval_config);
            const Checkpoint ckpt = load_checkpoint(eval_ckpt, eval_config.empty() ? nullptr : &expected);
            const fs::path suite_dir = eval_suite.empty() ? ckpt.config.eval_suite : eval_suite;
            EvalOptions opts{expand_horizons(eval_horizons, eval_interval), eval_starts, eval_lidar, eval_camera};
            const auto rows = evaluate(ckpt, load_suite(suite_dir), opts);
            write_metrics_csv(eval_out / "metrics.csv", rows);
            write_manifest(eval_out, "eval", {{"ckpt", fs::absolute(eval_ckpt).string()}, {"suite", suite_dir.string()}});
            print_rows(rows);
        } else if (*st) {
            const Checkpoint ckpt = load_checkpoint(stream_ckpt);
            const std::size_t n = stream_replay(ckpt, stream_dump, parse_range(stream_at), stream_out);
            std::printf("exported %zu prediction frames to %s\n", n, stream_out.c_str());
        } else if (*bl) {
            EvalOptions opts{expand_horizons(bl_horizons, bl_interval), bl_starts, bl_lidar, bl_camera};
            const auto rows = static_baseline(load_suite(bl_suite), opts, bl_past);
            write_metrics_csv(bl_out / "metrics.csv", rows);
            write_manifest(bl_out, "baseline", {{"suite", bl_suite.string()}});
            print_rows(rows);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
