#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evtrack/bbox.hpp"
#include "evtrack/event_core.hpp"

namespace evtrack {

enum class ObjectShape { disk, square };
enum class TrajectoryKind { linear, sinusoidal, random_walk };
enum class Scenario { plain, distractor, camera_motion, combined };

std::string to_string(Scenario s);
Scenario parse_scenario(std::string_view name);  // throws DataError

/// Center path in pixels. Linear paths reflect off the borders; sinusoidal
/// paths oscillate around (x0, y0); random walks interpolate seeded waypoints.
struct Trajectory {
    TrajectoryKind kind = TrajectoryKind::linear;
    double x0 = 64.0;
    double y0 = 64.0;
    double vx = 0.0;  // px/s
    double vy = 0.0;
    double amp_x = 0.0;  // px
    double amp_y = 0.0;
    double freq = 0.0;  // Hz
    double phase = 0.0;
    std::uint64_t walk_seed = 0;
    double walk_step = 0.0;      // px per waypoint, per axis
    double walk_interval = 0.2;  // s between waypoints
};

struct ObjectSpec {
    ObjectShape shape = ObjectShape::disk;
    double size = 16.0;    // diameter or side, px
    double offset = 0.8;   // log-intensity offset from the background level
    Trajectory trajectory;
};

struct SceneSpec {
    Geometry geometry{128, 128};
    Timestamp duration = 2'000'000'000;
    double render_rate = 1000.0;        // Hz
    double contrast_threshold = 0.15;   // log units
    ObjectSpec target;
    std::vector<ObjectSpec> distractors;
    double jitter_amplitude = 0.0;  // px
    double jitter_frequency = 0.0;  // Hz
    double checker_period = 16.0;   // px
    double checker_contrast = 0.3;  // log units, peak to peak
    double flicker_amplitude = 0.0;  // relative modulation of the checker contrast
    double flicker_frequency = 0.0;
    double background_level = 0.0;  // mean log intensity
    double noise_rate = 0.1;        // events / px / s
    std::uint64_t seed = 0;

    void validate() const;  // throws DataError
};

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

/// Object center in pixels at time t (seconds). Keeps the whole object inside
/// the frame.
std::pair<double, double> object_center(const ObjectSpec& obj, Geometry geometry, double t);
/// Image-normalized box of an object at time t (seconds).
BBoxN object_box(const ObjectSpec& obj, Geometry geometry, double t);

/// Natural-log intensity of the scene at time t (ns), row-major [y][x].
Grid render_scene(const SceneSpec& spec, Timestamp t);

/// Reference-crossing event generator over an arbitrary log-intensity source,
/// sampled at `render_rate` Hz on [0, duration]. Timestamps are clamped to
/// [0, duration).
EventStream simulate_events(const std::function<Grid(Timestamp)>& render, Geometry geometry, Timestamp duration,
                            double render_rate, double contrast_threshold, double noise_rate, std::uint64_t seed);

struct SyntheticSequence {
    std::string name;
    Scenario scenario = Scenario::plain;
    SceneSpec spec;
    EventStream events;
    Timestamp window = kDefaultWindowNs;
    std::vector<BBoxN> boxes;  // one per window, at the window midpoint
};

SyntheticSequence emit_events(const SceneSpec& spec, Scenario scenario = Scenario::plain, Timestamp window = kDefaultWindowNs);

/// Same events, ground truth recomputed for another aggregation window.
SyntheticSequence with_window(SyntheticSequence seq, Timestamp window);

/// Draws a scene for one sequence of a scenario.
SceneSpec sample_scene(Scenario scenario, std::uint64_t seed);

enum class Split { train, val, test };
std::string to_string(Split s);

/// Sequence seeds are derived from (seed, split, index), so splits never share
/// a seed.
std::uint64_t sequence_seed(std::uint64_t seed, Split split, std::size_t index);
std::vector<SyntheticSequence> make_sequences(Scenario scenario, std::size_t n, std::uint64_t seed, Split split,
                                              int workers = 1);

struct Dataset {
    Scenario scenario = Scenario::plain;
    std::uint64_t seed = 0;
    std::vector<SyntheticSequence> train;
    std::vector<SyntheticSequence> val;
    std::vector<SyntheticSequence> test;
};

Dataset make_dataset(Scenario scenario, std::size_t n_train, std::size_t n_val, std::size_t n_test, std::uint64_t seed,
                     int workers = 1);

/// Layout: manifest.json plus <split>/<name>/{events.bin, gt.csv, scene.json}.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace evtrack
