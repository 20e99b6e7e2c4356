// Command-line front end: simulate, train, eval, track, bench.

#include <sys/resource.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "evtrack/checkpoint.hpp"
#include "evtrack/danet.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/evaluation.hpp"
#include "evtrack/event_core.hpp"
#include "evtrack/evsim.hpp"
#include "evtrack/learning.hpp"

namespace fs = std::filesystem;
using namespace evtrack;

namespace {

constexpr std::uint64_t kDefaultSeed = 7;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
    if (const char* env = std::getenv("EVTRACK_SEED")) {
        try {
            std::size_t used = 0;
            auto v = std::stoull(env, &used);
            if (used == std::string(env).size()) return v;
        } catch (const std::exception&) {
        }
        throw UsageError(std::string("EVTRACK_SEED is not an unsigned integer: '") + env + "'");
    }
    return kDefaultSeed;
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": invalid JSON: " + e.what());
    }
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

Timestamp window_from_rate(double hz) {
    if (!(hz > 0.0)) throw UsageError("--frame-rate must be positive");
    return static_cast<Timestamp>(std::llround(1e9 / hz));
}

std::vector<SyntheticSequence> retime(std::vector<SyntheticSequence> seqs, Timestamp window) {
    for (auto& s : seqs)
        if (s.window != window) s = with_window(std::move(s), window);
    return seqs;
}

BBoxN parse_box(const std::string& text) {
    std::stringstream ss(text);
    std::string item;
    std::vector<double> v;
    while (std::getline(ss, item, ',')) {
        try {
            v.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw UsageError("--init expects cx,cy,w,h, got '" + text + "'");
        }
    }
    if (v.size() != 4) throw UsageError("--init expects cx,cy,w,h, got '" + text + "'");
    return BBoxN{v[0], v[1], v[2], v[3]};
}

long resident_kib() {
    std::ifstream statm("/proc/self/statm");
    long pages = 0, resident = 0;
    if (!(statm >> pages >> resident)) return -1;
    return resident * (sysconf(_SC_PAGESIZE) / 1024);
}

long peak_resident_kib() {
    rusage usage{};
    getrusage(RUSAGE_SELF, &usage);
    return usage.ru_maxrss;
}

// ---- subcommands ----

struct SimulateArgs {
    std::string scenario = "plain";
    std::size_t train = 8, val = 0, test = 0;
    fs::path out;
};

int cmd_simulate(const SimulateArgs& a, std::uint64_t seed, int workers) {
    const Scenario sc = [&] {
        try {
            return parse_scenario(a.scenario);
        } catch (const DataError& e) {
            throw UsageError(e.what());
        }
    }();
    if (a.train + a.val + a.test == 0) throw UsageError("need at least one sequence (-n, --val, --test)");
    auto ds = make_dataset(sc, a.train, a.val, a.test, seed, workers);
    write_dataset(a.out, ds);
    std::cout << "wrote " << a.train + a.val + a.test << " sequences (" << a.scenario << ", seed " << seed << ") to " << a.out.string()
              << "\n";
    return kOk;
}

struct TrainArgs {
    fs::path data, out, model_config, train_config;
    std::string preset = "desk", representation, split = "train";
    int epochs = 0, pairs = 0, batch = 0;
    double frame_rate = 40.0;
    bool force = false, no_man = false, no_tan = false, no_shortcut = false, no_self_attention = false, quiet = false;
};

std::vector<SyntheticSequence> pick_split(Dataset& ds, const std::string& split) {
    if (split == "train") return std::move(ds.train);
    if (split == "val") return std::move(ds.val);
    if (split == "test") return std::move(ds.test);
    throw UsageError("unknown split '" + split + "' (expected train, val or test)");
}

int cmd_train(const TrainArgs& a, std::uint64_t seed) {
    if (a.preset != "desk" && a.preset != "paper") throw UsageError("--preset must be desk or paper");
    ModelConfig mc = a.preset == "paper" ? ModelConfig::paper() : ModelConfig::desk();
    TrainConfig tc = a.preset == "paper" ? TrainConfig::paper() : TrainConfig::desk();
    if (!a.model_config.empty()) mc = model_config_from_json(read_json(a.model_config));
    if (!a.train_config.empty()) tc = train_config_from_json(read_json(a.train_config));
    if (!a.representation.empty()) {
        if (a.representation == "frame") mc.representation = Representation::frame;
        else if (a.representation == "voxel") mc.representation = Representation::voxel;
        else throw UsageError("--representation must be frame or voxel");
    }
    if (a.no_man) mc.use_man = false;
    if (a.no_tan) mc.use_tan = false;
    if (a.no_shortcut) mc.fusion_shortcut = false;
    if (a.no_self_attention) mc.self_attention = false;
    if (a.epochs > 0) tc.epochs = a.epochs;
    if (a.pairs > 0) tc.pairs_per_epoch = a.pairs;
    if (a.batch > 0) tc.batch_size = a.batch;
    tc.seed = seed;
    mc.validate();
    tc.validate();

    const fs::path model_path = a.out / "model.ckpt";
    if (fs::exists(model_path) && !a.force) {
        throw UsageError(model_path.string() + " already exists; pass --force to overwrite");
    }
    auto ds = read_dataset(a.data);
    auto seqs = retime(pick_split(ds, a.split), window_from_rate(a.frame_rate));
    if (seqs.empty()) throw DataError("split '" + a.split + "' of " + a.data.string() + " is empty");
    ensure_dir(a.out);

    TrainOptions opt;
    opt.log_path = a.out / "train_log.jsonl";
    opt.checkpoint_dir = a.out / "checkpoints";
    const int steps = tc.steps_per_epoch();
    if (!a.quiet) {
        opt.on_step = [steps](const StepLog& s) {
            if ((s.step + 1) % steps == 0) {
                std::fprintf(stderr, "epoch %d step %d lr %.3g loss %.4f\n", s.epoch, s.step, s.lr, s.loss);
            }
        };
    }
    auto result = train(mc, tc, seqs, opt);
    save_checkpoint(model_path, result.model.to_checkpoint({{"seed", seed},
                                                            {"train_config", to_json(tc)},
                                                            {"steps", tc.total_steps()},
                                                            {"window_ns", window_from_rate(a.frame_rate)}}));
    std::cout << "final epoch loss " << result.epoch_loss.back() << "; checkpoint " << model_path.string() << "\n";
    return kOk;
}

struct EvalArgs {
    fs::path checkpoint, data, out, model_config;
    std::string split = "test";
    double frame_rate = 40.0;
    bool oracle = false, static_box = false, heatmaps = false;
};

int cmd_eval(const EvalArgs& a, int workers) {
    if (a.oracle && a.static_box) throw UsageError("--oracle-stub and --static-stub are exclusive");
    const bool stub = a.oracle || a.static_box;
    if (!stub && a.checkpoint.empty()) throw UsageError("eval needs --checkpoint (or a stub tracker flag)");
    auto ds = read_dataset(a.data);
    auto seqs = retime(pick_split(ds, a.split), window_from_rate(a.frame_rate));
    if (seqs.empty()) throw DataError("split '" + a.split + "' of " + a.data.string() + " is empty");
    ensure_dir(a.out);

    std::vector<SequenceResult> results;
    if (stub) {
        results = run_ope(a.oracle ? oracle_tracker() : static_tracker(), seqs, InputSpec{}, workers);
    } else {
        auto model = Danet::from_checkpoint(load_checkpoint(a.checkpoint));
        if (!a.model_config.empty()) {
            auto expected = to_json(model_config_from_json(read_json(a.model_config)));
            if (expected != to_json(model.config())) {
                throw DataError("checkpoint/config mismatch: " + a.checkpoint.string() + " was trained with " +
                                to_json(model.config()).dump() + " but " + a.model_config.string() + " specifies " + expected.dump());
            }
        }
        std::optional<fs::path> heat;
        if (a.heatmaps) heat = a.out / "heatmaps";
        InputSpec input{model.config().representation, model.config().voxel_bins};
        results = run_ope(danet_tracker(model, heat), seqs, input, heat ? 1 : workers);
    }
    auto report = build_report(std::move(results));
    emit_report(report, a.out);
    const auto& m = report.overall;
    std::printf("AUC %.4f  OP50 %.4f  OP75 %.4f  Prec@20 %.4f  NormPrec@0.2 %.4f  frames %zu  excluded %zu\n", m.auc, m.op50, m.op75,
                m.precision20, m.norm_precision20, m.frames, report.excluded_frames);
    return kOk;
}

struct TrackArgs {
    fs::path checkpoint, events, out;
    std::string init, geometry;
    double frame_rate = 40.0;
};

int cmd_track(const TrackArgs& a) {
    auto model = Danet::from_checkpoint(load_checkpoint(a.checkpoint));
    std::optional<Geometry> geo;
    if (!a.geometry.empty()) {
        unsigned w = 0, h = 0;
        if (std::sscanf(a.geometry.c_str(), "%ux%u", &w, &h) != 2 || w == 0 || h == 0) throw UsageError("--geometry expects WxH");
        geo = Geometry{w, h};
    }
    auto stream = read_event_file(a.events, geo);
    const BBoxN init = parse_box(a.init);
    if (!init.has_positive_area()) throw DataError("initial box must have positive width and height");
    const Timestamp dt = window_from_rate(a.frame_rate);
    const std::size_t windows = window_count(stream, dt);
    if (windows < 1) throw DataError(a.events.string() + " holds no events");
    const auto& cfg = model.config();
    auto frame = [&](std::size_t k) { return window_input(stream, k, dt, cfg.representation, cfg.voxel_bins); };

    ensure_dir(a.out);
    const fs::path path = a.out / "track.csv";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "frame,cx,cy,w,h\n";
    DanetTracker tracker(model);
    auto state = track_init(tracker, frame(0), init);
    char line[160];
    for (std::size_t k = 1; k < windows; ++k) {
        auto [box, next] = track_step(tracker, std::move(state), frame(k));
        state = std::move(next);
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", k, box.cx, box.cy, box.w, box.h);
        out << line;
    }
    if (!out) throw DataError("write failed for " + path.string());
    std::cout << "tracked " << windows - 1 << " windows; boxes in " << path.string() << "\n";
    return kOk;
}

struct BenchArgs {
    fs::path out, input;
    std::uint64_t events = 10'000'000;
    double frame_rate = 40.0;
    std::size_t chunk = 1 << 16;
    bool keep = false;
};

// Writes a random sorted stream record by record, without holding it in memory.
void write_bench_stream(const fs::path& path, std::uint64_t count, std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    const std::uint16_t W = 346, H = 260;
    std::string buf = "EVT1";
    auto put = [&buf](std::uint64_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    put(W, 2);
    put(H, 2);
    std::mt19937_64 rng(seed);
    Timestamp t = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t r = rng();
        t += r % 2000;  // mean 1 us between events
        put(t, 8);
        put((r >> 16) % W, 2);
        put((r >> 32) % H, 2);
        buf.push_back(static_cast<char>((r >> 63) ? 1 : -1));
        if (buf.size() >= (1u << 20)) {
            out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
            buf.clear();
        }
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

int cmd_bench(const BenchArgs& a, std::uint64_t seed) {
    ensure_dir(a.out);
    fs::path file = a.input;
    const bool generated = file.empty();
    if (generated) {
        file = a.out / "bench_events.bin";
        write_bench_stream(file, a.events, seed);
    }
    const Timestamp dt = window_from_rate(a.frame_rate);
    const auto total_bytes = fs::file_size(file);
    const std::uint64_t expected = total_bytes > kBinaryHeaderBytes ? (total_bytes - kBinaryHeaderBytes) / kBinaryRecordBytes : 0;

    long rss_early = -1;
    std::uint64_t frames = 0;
    std::int64_t checksum = 0;
    const long rss_before = resident_kib();
    const auto start = std::chrono::steady_clock::now();
    // Resident memory is sampled after the first frames (buffers allocated) and at the end.
    auto sink = [&](const EventFrame& f) {
        ++frames;
        for (auto v : f.grid) checksum += v;
        if (frames == 2) rss_early = resident_kib();
    };
    const std::uint64_t n = stream_binary_file(file, dt, sink, a.chunk);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const long rss_after = resident_kib();
    if (generated && !a.keep) fs::remove(file);

    const long growth = (rss_after >= 0 && rss_early >= 0) ? rss_after - rss_early : -1;
    const bool constant_memory = growth >= 0 && growth < 4096;
    const double rate = seconds > 0 ? static_cast<double>(n) / seconds : 0.0;
    nlohmann::json report{{"events", n},
                          {"expected_events", expected},
                          {"frames", frames},
                          {"polarity_sum", checksum},
                          {"seconds", seconds},
                          {"events_per_second", rate},
                          {"window_ns", dt},
                          {"chunk_records", a.chunk},
                          {"rss_before_kib", rss_before},
                          {"rss_early_kib", rss_early},
                          {"rss_after_kib", rss_after},
                          {"peak_rss_kib", peak_resident_kib()},
                          {"constant_memory", constant_memory}};
    std::ofstream out(a.out / "bench.json", std::ios::trunc);
    if (!out) throw DataError("cannot write " + (a.out / "bench.json").string());
    out << report.dump(2) << "\n";
    std::printf("events %llu  frames %llu  %.3f s  %.0f events/s  peak RSS %ld KiB  constant_memory %s\n",
                static_cast<unsigned long long>(n), static_cast<unsigned long long>(frames), seconds, rate, peak_resident_kib(),
                constant_memory ? "true" : "false");
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Event-camera object tracker: simulation, training, evaluation and tracking."};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");
    app.fallthrough();  // global flags may follow the subcommand

    std::optional<std::uint64_t> seed_flag;
    int workers = 1;
    app.add_option("--seed", seed_flag, "Random seed (default 7, or $EVTRACK_SEED)");
    app.add_option("--workers", workers, "Worker threads for data generation and evaluation")->check(CLI::Range(1, 64));

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Generate a synthetic event dataset");
    s->add_option("--scenario", sim.scenario, "plain, distractor, camera_motion or combined")->capture_default_str();
    s->add_option("-n,--train", sim.train, "Training sequences")->capture_default_str();
    s->add_option("--val", sim.val, "Validation sequences")->capture_default_str();
    s->add_option("--test", sim.test, "Test sequences")->capture_default_str();
    s->add_option("--out", sim.out, "Output dataset directory")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model on a dataset split");
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--out", tr.out, "Output directory (model.ckpt, train_log.jsonl, checkpoints/)")->required();
    t->add_option("--preset", tr.preset, "desk or paper")->capture_default_str();
    t->add_option("--model-config", tr.model_config, "Model config JSON");
    t->add_option("--train-config", tr.train_config, "Training config JSON");
    t->add_option("--representation", tr.representation, "frame or voxel");
    t->add_option("--split", tr.split, "Split to train on")->capture_default_str();
    t->add_option("--epochs", tr.epochs, "Override epochs");
    t->add_option("--pairs", tr.pairs, "Override pairs per epoch");
    t->add_option("--batch", tr.batch, "Override batch size");
    t->add_option("--frame-rate", tr.frame_rate, "Aggregation rate in Hz")->capture_default_str();
    t->add_flag("--no-man", tr.no_man, "Ablate the motion-aware branch");
    t->add_flag("--no-tan", tr.no_tan, "Ablate the target-aware branch");
    t->add_flag("--no-shortcut", tr.no_shortcut, "Drop the fusion shortcut");
    t->add_flag("--no-self-attention", tr.no_self_attention, "Drop encoder self-attention");
    t->add_flag("--force", tr.force, "Overwrite an existing model.ckpt");
    t->add_flag("--quiet", tr.quiet, "No per-epoch progress");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "One-pass evaluation and report");
    e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
    e->add_option("--data", ev.data, "Dataset directory")->required();
    e->add_option("--out", ev.out, "Report directory")->required();
    e->add_option("--split", ev.split, "Split to evaluate")->capture_default_str();
    e->add_option("--model-config", ev.model_config, "Expected model config; mismatch is an error");
    e->add_option("--frame-rate", ev.frame_rate, "Aggregation rate in Hz")->capture_default_str();
    e->add_flag("--oracle-stub", ev.oracle, "Use a tracker that reports the ground truth");
    e->add_flag("--static-stub", ev.static_box, "Use a tracker that never moves");
    e->add_flag("--dump-heatmaps", ev.heatmaps, "Write per-frame center and fused maps as PGM");

    TrackArgs tk;
    auto* k = app.add_subcommand("track", "Track one event file from an initial box");
    k->add_option("--checkpoint", tk.checkpoint, "Model checkpoint")->required();
    k->add_option("--events", tk.events, "Event file (.bin or .csv)")->required();
    k->add_option("--init", tk.init, "Initial box cx,cy,w,h (normalized)")->required();
    k->add_option("--geometry", tk.geometry, "Sensor WxH, required for CSV input");
    k->add_option("--out", tk.out, "Output directory (track.csv)")->required();
    k->add_option("--frame-rate", tk.frame_rate, "Aggregation rate in Hz")->capture_default_str();

    BenchArgs bn;
    auto* b = app.add_subcommand("bench", "Measure streaming aggregation throughput and memory");
    b->add_option("--events", bn.events, "Synthetic stream length")->capture_default_str();
    b->add_option("--input", bn.input, "Existing binary event file instead of a synthetic one");
    b->add_option("--out", bn.out, "Output directory (bench.json)")->required();
    b->add_option("--frame-rate", bn.frame_rate, "Aggregation rate in Hz")->capture_default_str();
    b->add_option("--chunk", bn.chunk, "Records per read")->capture_default_str();
    b->add_flag("--keep", bn.keep, "Keep the generated stream file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        const std::uint64_t seed = seed_flag ? *seed_flag : default_seed();
        if (*s) return cmd_simulate(sim, seed, workers);
        if (*t) return cmd_train(tr, seed);
        if (*e) return cmd_eval(ev, workers);
        if (*k) return cmd_track(tk);
        if (*b) return cmd_bench(bn, seed);
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n" << app.help();
        return kUsage;
    } catch (const NumericError& err) {
        std::cerr << "numeric error: " << err.what() << "\n";
        return kNumeric;
    } catch (const DataError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kData;
    } catch (const ShapeError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kData;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kData;
    }
    return kUsage;
}
