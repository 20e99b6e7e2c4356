#include "evtrack/evsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "evtrack/errors.hpp"

namespace evtrack {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double reflect(double v, double lo, double hi) {
    if (hi <= lo) return 0.5 * (lo + hi);
    const double span = hi - lo;
    double u = std::fmod(v - lo, 2.0 * span);
    if (u < 0) u += 2.0 * span;
    return lo + (u <= span ? u : 2.0 * span - u);
}

// Integral of a +-1 square wave (period p, +1 on the first half) from 0 to x.
// Full periods integrate to zero.
double square_wave_integral(double x, double p) {
    double u = std::fmod(x, p);
    if (u < 0) u += p;
    return u < 0.5 * p ? u : p - u;
}

double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

const char* to_string(ObjectShape s) { return s == ObjectShape::disk ? "disk" : "square"; }
const char* to_string(TrajectoryKind k) {
    switch (k) {
        case TrajectoryKind::linear: return "linear";
        case TrajectoryKind::sinusoidal: return "sinusoidal";
        case TrajectoryKind::random_walk: return "random_walk";
    }
    return "linear";
}

}  // namespace

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::plain: return "plain";
        case Scenario::distractor: return "distractor";
        case Scenario::camera_motion: return "camera_motion";
        case Scenario::combined: return "combined";
    }
    return "plain";
}

Scenario parse_scenario(std::string_view name) {
    if (name == "plain") return Scenario::plain;
    if (name == "distractor") return Scenario::distractor;
    if (name == "camera_motion") return Scenario::camera_motion;
    if (name == "combined") return Scenario::combined;
    throw DataError("unknown scenario '" + std::string(name) + "' (expected plain, distractor, camera_motion or combined)");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

void SceneSpec::validate() const {
    auto fail = [](const std::string& msg) { throw DataError("invalid scene: " + msg); };
    if (geometry.width == 0 || geometry.height == 0 || geometry.width > 0xFFFF || geometry.height > 0xFFFF) {
        fail("geometry must be within 1..65535");
    }
    if (duration == 0) fail("duration must be positive");
    if (!(contrast_threshold > 0.0)) fail("contrast threshold must be positive");
    if (!(render_rate > 0.0)) fail("render rate must be positive");
    if (noise_rate < 0.0) fail("noise rate must be >= 0");
    double max_freq = std::max(jitter_frequency, flicker_frequency);
    auto check_object = [&](const ObjectSpec& o) {
        if (!(o.size > 0.0)) fail("object size must be positive");
        if (o.size >= std::min(geometry.width, geometry.height)) fail("object does not fit in the frame");
        if (o.trajectory.kind == TrajectoryKind::sinusoidal) max_freq = std::max(max_freq, o.trajectory.freq);
        if (o.trajectory.kind == TrajectoryKind::random_walk && !(o.trajectory.walk_interval > 0.0)) {
            fail("random-walk interval must be positive");
        }
    };
    check_object(target);
    for (const auto& d : distractors) check_object(d);
    if (render_rate < 2.0 * max_freq) fail("render rate must be at least twice the highest scene frequency");
}

nlohmann::json to_json(const SceneSpec& s) {
    auto obj = [](const ObjectSpec& o) {
        const auto& t = o.trajectory;
        return nlohmann::json{{"shape", to_string(o.shape)},
                              {"size", o.size},
                              {"offset", o.offset},
                              {"trajectory",
                               {{"kind", to_string(t.kind)},
                                {"x0", t.x0},
                                {"y0", t.y0},
                                {"vx", t.vx},
                                {"vy", t.vy},
                                {"amp_x", t.amp_x},
                                {"amp_y", t.amp_y},
                                {"freq", t.freq},
                                {"phase", t.phase},
                                {"walk_seed", t.walk_seed},
                                {"walk_step", t.walk_step},
                                {"walk_interval", t.walk_interval}}}};
    };
    nlohmann::json distractors = nlohmann::json::array();
    for (const auto& d : s.distractors) distractors.push_back(obj(d));
    return nlohmann::json{{"width", s.geometry.width},
                          {"height", s.geometry.height},
                          {"duration_ns", s.duration},
                          {"render_rate", s.render_rate},
                          {"contrast_threshold", s.contrast_threshold},
                          {"target", obj(s.target)},
                          {"distractors", distractors},
                          {"jitter_amplitude", s.jitter_amplitude},
                          {"jitter_frequency", s.jitter_frequency},
                          {"checker_period", s.checker_period},
                          {"checker_contrast", s.checker_contrast},
                          {"flicker_amplitude", s.flicker_amplitude},
                          {"flicker_frequency", s.flicker_frequency},
                          {"background_level", s.background_level},
                          {"noise_rate", s.noise_rate},
                          {"seed", s.seed}};
}

SceneSpec scene_spec_from_json(const nlohmann::json& j) {
    auto obj = [](const nlohmann::json& o) {
        ObjectSpec out;
        const auto shape = o.at("shape").get<std::string>();
        if (shape == "disk") out.shape = ObjectShape::disk;
        else if (shape == "square") out.shape = ObjectShape::square;
        else throw DataError("unknown object shape '" + shape + "'");
        out.size = o.at("size").get<double>();
        out.offset = o.at("offset").get<double>();
        const auto& t = o.at("trajectory");
        const auto kind = t.at("kind").get<std::string>();
        if (kind == "linear") out.trajectory.kind = TrajectoryKind::linear;
        else if (kind == "sinusoidal") out.trajectory.kind = TrajectoryKind::sinusoidal;
        else if (kind == "random_walk") out.trajectory.kind = TrajectoryKind::random_walk;
        else throw DataError("unknown trajectory kind '" + kind + "'");
        t.at("x0").get_to(out.trajectory.x0);
        t.at("y0").get_to(out.trajectory.y0);
        t.at("vx").get_to(out.trajectory.vx);
        t.at("vy").get_to(out.trajectory.vy);
        t.at("amp_x").get_to(out.trajectory.amp_x);
        t.at("amp_y").get_to(out.trajectory.amp_y);
        t.at("freq").get_to(out.trajectory.freq);
        t.at("phase").get_to(out.trajectory.phase);
        t.at("walk_seed").get_to(out.trajectory.walk_seed);
        t.at("walk_step").get_to(out.trajectory.walk_step);
        t.at("walk_interval").get_to(out.trajectory.walk_interval);
        return out;
    };
    SceneSpec s;
    try {
        s.geometry = Geometry{j.at("width").get<std::uint32_t>(), j.at("height").get<std::uint32_t>()};
        j.at("duration_ns").get_to(s.duration);
        j.at("render_rate").get_to(s.render_rate);
        j.at("contrast_threshold").get_to(s.contrast_threshold);
        s.target = obj(j.at("target"));
        for (const auto& d : j.at("distractors")) s.distractors.push_back(obj(d));
        j.at("jitter_amplitude").get_to(s.jitter_amplitude);
        j.at("jitter_frequency").get_to(s.jitter_frequency);
        j.at("checker_period").get_to(s.checker_period);
        j.at("checker_contrast").get_to(s.checker_contrast);
        j.at("flicker_amplitude").get_to(s.flicker_amplitude);
        j.at("flicker_frequency").get_to(s.flicker_frequency);
        j.at("background_level").get_to(s.background_level);
        j.at("noise_rate").get_to(s.noise_rate);
        j.at("seed").get_to(s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid scene JSON: ") + e.what());
    }
    s.validate();
    return s;
}

std::pair<double, double> object_center(const ObjectSpec& obj, Geometry geometry, double t) {
    const auto& tr = obj.trajectory;
    const double half = 0.5 * obj.size;
    const double lo_x = half, hi_x = geometry.width - half;
    const double lo_y = half, hi_y = geometry.height - half;
    double x = tr.x0, y = tr.y0;
    switch (tr.kind) {
        case TrajectoryKind::linear:
            x = tr.x0 + tr.vx * t;
            y = tr.y0 + tr.vy * t;
            break;
        case TrajectoryKind::sinusoidal:
            x = tr.x0 + tr.amp_x * std::sin(kTwoPi * tr.freq * t + tr.phase);
            y = tr.y0 + tr.amp_y * std::sin(kTwoPi * tr.freq * t + tr.phase + 0.5 * std::numbers::pi);
            break;
        case TrajectoryKind::random_walk: {
            std::mt19937_64 rng(tr.walk_seed);
            std::uniform_real_distribution<double> step(-tr.walk_step, tr.walk_step);
            const auto k = static_cast<std::size_t>(std::floor(t / tr.walk_interval));
            double px = reflect(tr.x0, lo_x, hi_x), py = reflect(tr.y0, lo_y, hi_y);
            for (std::size_t i = 0; i < k; ++i) {
                px = reflect(px + step(rng), lo_x, hi_x);
                py = reflect(py + step(rng), lo_y, hi_y);
            }
            const double nx = reflect(px + step(rng), lo_x, hi_x);
            const double ny = reflect(py + step(rng), lo_y, hi_y);
            const double a = t / tr.walk_interval - static_cast<double>(k);
            x = px + a * (nx - px);
            y = py + a * (ny - py);
            break;
        }
    }
    return {reflect(x, lo_x, hi_x), reflect(y, lo_y, hi_y)};
}

BBoxN object_box(const ObjectSpec& obj, Geometry geometry, double t) {
    auto [x, y] = object_center(obj, geometry, t);
    return BBoxN{x / geometry.width, y / geometry.height, obj.size / geometry.width, obj.size / geometry.height};
}

Grid render_scene(const SceneSpec& spec, Timestamp t) {
    if (t > spec.duration) {
        throw DataError("render time " + std::to_string(t) + " ns outside [0, " + std::to_string(spec.duration) + "]");
    }
    const double ts = static_cast<double>(t) * 1e-9;
    const int W = static_cast<int>(spec.geometry.width), H = static_cast<int>(spec.geometry.height);
    Grid g(W, H, spec.background_level);

    if (spec.checker_contrast != 0.0 && spec.checker_period > 0.0) {
        const double jx = spec.jitter_amplitude * std::sin(kTwoPi * spec.jitter_frequency * ts);
        const double jy = spec.jitter_amplitude * std::sin(kTwoPi * spec.jitter_frequency * ts * 0.7 + 1.0);
        const double contrast =
            spec.checker_contrast * (1.0 + spec.flicker_amplitude * std::sin(kTwoPi * spec.flicker_frequency * ts));
        const double p = spec.checker_period;
        // Box-averaged checker: separable product of two box-averaged square waves.
        std::vector<double> ax(W), ay(H);
        for (int x = 0; x < W; ++x) ax[x] = square_wave_integral(x + 1 + jx, p) - square_wave_integral(x + jx, p);
        for (int y = 0; y < H; ++y) ay[y] = square_wave_integral(y + 1 + jy, p) - square_wave_integral(y + jy, p);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) g.at(x, y) += 0.5 * contrast * ax[x] * ay[y];
    }

    auto paint = [&](const ObjectSpec& o) {
        auto [cx, cy] = object_center(o, spec.geometry, ts);
        const double half = 0.5 * o.size;
        const double level = spec.background_level + o.offset;
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - half - 1)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + half + 1)));
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - half - 1)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + half + 1)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double alpha;
                if (o.shape == ObjectShape::disk) {
                    const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
                    alpha = std::clamp(half + 0.5 - d, 0.0, 1.0);
                } else {
                    alpha = overlap(x, x + 1.0, cx - half, cx + half) * overlap(y, y + 1.0, cy - half, cy + half);
                }
                if (alpha > 0.0) g.at(x, y) = (1.0 - alpha) * g.at(x, y) + alpha * level;
            }
    };
    for (const auto& d : spec.distractors) paint(d);
    paint(spec.target);
    return g;
}

EventStream simulate_events(const std::function<Grid(Timestamp)>& render, Geometry geometry, Timestamp duration,
                            double render_rate, double contrast_threshold, double noise_rate, std::uint64_t seed) {
    if (!(contrast_threshold > 0.0)) throw DataError("contrast threshold must be positive");
    EventStream stream;
    stream.geometry = geometry;
    const auto steps = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(duration * 1e-9 * render_rate)));
    const double step_ns = static_cast<double>(duration) / static_cast<double>(steps);
    const double step_s = step_ns * 1e-9;
    const std::size_t n = geometry.pixels();
    const Timestamp last = duration - 1;

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> pick_x(0, geometry.width - 1), pick_y(0, geometry.height - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::poisson_distribution<long long> noise(std::max(0.0, noise_rate * static_cast<double>(n) * step_s));

    auto clamp_t = [&](double t) { return std::min<Timestamp>(last, static_cast<Timestamp>(std::max(0.0, t))); };

    Grid prev = render(0);
    if (prev.values.size() != n) throw ShapeError("render produced a grid that does not match the geometry");
    std::vector<double> ref = prev.values;
    std::vector<Event> batch;
    for (std::uint64_t k = 1; k <= steps; ++k) {
        const double t_prev = step_ns * static_cast<double>(k - 1);
        const auto t_now = k == steps ? duration : static_cast<Timestamp>(std::llround(step_ns * static_cast<double>(k)));
        Grid cur = render(t_now);
        if (cur.values.size() != n) throw ShapeError("render produced a grid that does not match the geometry");
        batch.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = cur.values[i] - ref[i];
            const auto crossings = static_cast<long long>(std::floor(std::fabs(diff) / contrast_threshold + 1e-9));
            if (crossings == 0) continue;
            const double sign = diff > 0 ? 1.0 : -1.0;
            const double delta = cur.values[i] - prev.values[i];
            for (long long c = 1; c <= crossings; ++c) {
                const double level = ref[i] + sign * contrast_threshold * static_cast<double>(c);
                double frac = delta != 0.0 ? (level - prev.values[i]) / delta : 1.0;
                frac = std::clamp(frac, 0.0, 1.0);
                batch.push_back(Event{clamp_t(t_prev + frac * step_ns), static_cast<std::uint16_t>(i % geometry.width),
                                      static_cast<std::uint16_t>(i / geometry.width), static_cast<std::int8_t>(sign)});
            }
            ref[i] += sign * contrast_threshold * static_cast<double>(crossings);
        }
        if (noise_rate > 0.0) {
            const long long count = noise(rng);
            for (long long c = 0; c < count; ++c) {
                const auto x = pick_x(rng), y = pick_y(rng);
                const double t = t_prev + unit(rng) * step_ns;
                const std::int8_t p = unit(rng) < 0.5 ? -1 : 1;
                batch.push_back(Event{clamp_t(t), static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), p});
            }
        }
        std::stable_sort(batch.begin(), batch.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
        stream.events.insert(stream.events.end(), batch.begin(), batch.end());
        prev = std::move(cur);
    }
    return stream;
}

SyntheticSequence with_window(SyntheticSequence seq, Timestamp window) {
    if (window == 0) throw DataError("window must be positive");
    const auto& spec = seq.spec;
    seq.window = window;
    seq.boxes.clear();
    const std::size_t windows = (spec.duration + window - 1) / window;
    for (std::size_t k = 0; k < windows; ++k) {
        // Midpoint of the window, capped at the end of the scene for a partial last window.
        const double mid = std::min((static_cast<double>(k) + 0.5) * static_cast<double>(window), static_cast<double>(spec.duration));
        seq.boxes.push_back(object_box(spec.target, spec.geometry, mid * 1e-9));
    }
    return seq;
}

SyntheticSequence emit_events(const SceneSpec& spec, Scenario scenario, Timestamp window) {
    spec.validate();
    if (window == 0) throw DataError("window must be positive");
    SyntheticSequence seq;
    seq.scenario = scenario;
    seq.spec = spec;
    seq.events = simulate_events([&](Timestamp t) { return render_scene(spec, t); }, spec.geometry, spec.duration, spec.render_rate,
                                 spec.contrast_threshold, spec.noise_rate, splitmix(spec.seed));
    return with_window(std::move(seq), window);
}

SceneSpec sample_scene(Scenario scenario, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    SceneSpec s;
    const double W = s.geometry.width, H = s.geometry.height;

    auto sample_object = [&](ObjectShape shape) {
        ObjectSpec o;
        o.shape = shape;
        o.size = uni(12.0, 20.0);
        o.offset = (uni(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uni(0.6, 1.0);
        auto& t = o.trajectory;
        const double kind = uni(0.0, 1.0);
        if (kind < 0.5) {
            t.kind = TrajectoryKind::linear;
            t.x0 = uni(o.size, W - o.size);
            t.y0 = uni(o.size, H - o.size);
            const double speed = uni(40.0, 100.0), angle = uni(0.0, kTwoPi);
            t.vx = speed * std::cos(angle);
            t.vy = speed * std::sin(angle);
        } else if (kind < 0.75) {
            t.kind = TrajectoryKind::sinusoidal;
            t.x0 = uni(0.35 * W, 0.65 * W);
            t.y0 = uni(0.35 * H, 0.65 * H);
            t.amp_x = uni(15.0, 35.0);
            t.amp_y = uni(15.0, 35.0);
            t.freq = uni(0.3, 0.8);
            t.phase = uni(0.0, kTwoPi);
        } else {
            t.kind = TrajectoryKind::random_walk;
            t.x0 = uni(o.size, W - o.size);
            t.y0 = uni(o.size, H - o.size);
            t.walk_seed = rng();
            t.walk_step = uni(10.0, 25.0);
            t.walk_interval = 0.25;
        }
        return o;
    };

    const ObjectShape shape = uni(0.0, 1.0) < 0.5 ? ObjectShape::disk : ObjectShape::square;
    s.target = sample_object(shape);
    s.checker_period = std::floor(uni(12.0, 25.0));
    s.checker_contrast = uni(0.2, 0.4);
    if (scenario == Scenario::distractor || scenario == Scenario::combined) {
        const int count = uni(0.0, 1.0) < 0.5 ? 2 : 3;
        for (int i = 0; i < count; ++i) s.distractors.push_back(sample_object(shape));
    }
    if (scenario == Scenario::camera_motion || scenario == Scenario::combined) {
        s.jitter_amplitude = uni(2.0, 4.0);
        s.jitter_frequency = uni(1.0, 3.0);
    }
    s.seed = rng();
    return s;
}

std::uint64_t sequence_seed(std::uint64_t seed, Split split, std::size_t index) {
    return splitmix(splitmix(splitmix(seed) ^ (static_cast<std::uint64_t>(split) + 1)) ^ index);
}

std::vector<SyntheticSequence> make_sequences(Scenario scenario, std::size_t n, std::uint64_t seed, Split split, int workers) {
    std::vector<SyntheticSequence> out(n);
    auto build = [&](std::size_t i) {
        auto spec = sample_scene(scenario, sequence_seed(seed, split, i));
        out[i] = emit_events(spec, scenario);
        char name[32];
        std::snprintf(name, sizeof name, "seq_%04zu", i);
        out[i].name = name;
    };
    const auto threads = static_cast<std::size_t>(std::clamp(workers, 1, 64));
    if (threads == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) build(i);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) build(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

Dataset make_dataset(Scenario scenario, std::size_t n_train, std::size_t n_val, std::size_t n_test, std::uint64_t seed,
                     int workers) {
    if (n_train + n_val + n_test == 0) throw DataError("dataset needs at least one sequence");
    Dataset d;
    d.scenario = scenario;
    d.seed = seed;
    d.train = make_sequences(scenario, n_train, seed, Split::train, workers);
    d.val = make_sequences(scenario, n_val, seed, Split::val, workers);
    d.test = make_sequences(scenario, n_test, seed, Split::test, workers);
    return d;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json manifest{{"scenario", to_string(dataset.scenario)},
                            {"seed", dataset.seed},
                            {"window_ns", kDefaultWindowNs},
                            {"splits", nlohmann::json::object()}};
    auto emit = [&](Split split, const std::vector<SyntheticSequence>& seqs) {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& s : seqs) {
            const auto rel = std::filesystem::path(to_string(split)) / s.name;
            std::filesystem::create_directories(dir / rel, ec);
            if (ec) throw DataError("cannot create " + (dir / rel).string() + ": " + ec.message());
            write_event_file(dir / rel / "events.bin", s.events, EventFormat::binary);
            write_text(dir / rel / "gt.csv", serialize_boxes_csv(s.boxes));
            write_text(dir / rel / "scene.json", to_json(s.spec).dump(2) + "\n");
            list.push_back({{"name", s.name},
                            {"path", rel.generic_string()},
                            {"scenario", to_string(s.scenario)},
                            {"seed", s.spec.seed},
                            {"window_ns", s.window},
                            {"events", s.events.events.size()},
                            {"windows", s.boxes.size()}});
        }
        manifest["splits"][to_string(split)] = list;
    };
    emit(Split::train, dataset.train);
    emit(Split::val, dataset.val);
    emit(Split::test, dataset.test);
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "manifest.json").string() + ": invalid JSON: " + e.what());
    }
    Dataset d;
    try {
        d.scenario = parse_scenario(manifest.at("scenario").get<std::string>());
        d.seed = manifest.at("seed").get<std::uint64_t>();
        auto load = [&](Split split) {
            std::vector<SyntheticSequence> out;
            const auto key = to_string(split);
            if (!manifest.at("splits").contains(key)) return out;
            for (const auto& entry : manifest.at("splits").at(key)) {
                SyntheticSequence s;
                s.name = entry.at("name").get<std::string>();
                s.scenario = parse_scenario(entry.at("scenario").get<std::string>());
                s.window = entry.at("window_ns").get<Timestamp>();
                const auto base = dir / entry.at("path").get<std::string>();
                s.events = read_event_file(base / "events.bin");
                s.boxes = read_boxes_file(base / "gt.csv");
                try {
                    s.spec = scene_spec_from_json(nlohmann::json::parse(read_text(base / "scene.json")));
                } catch (const nlohmann::json::exception& e) {
                    throw DataError((base / "scene.json").string() + ": invalid JSON: " + e.what());
                }
                if (s.boxes.empty()) throw DataError((base / "gt.csv").string() + ": no ground-truth boxes");
                out.push_back(std::move(s));
            }
            return out;
        };
        d.train = load(Split::train);
        d.val = load(Split::val);
        d.test = load(Split::test);
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "manifest.json").string() + ": " + e.what());
    }
    return d;
}

}  // namespace evtrack
