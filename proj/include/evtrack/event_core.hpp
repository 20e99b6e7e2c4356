#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evtrack/bbox.hpp"

namespace evtrack {

using Timestamp = std::uint64_t;  // nanoseconds

constexpr Timestamp kDefaultWindowNs = 25'000'000;  // 40 Hz
constexpr int kDefaultClip = 10;

struct Geometry {
    std::uint32_t width = 0;
    std::uint32_t height = 0;

    std::size_t pixels() const { return std::size_t{width} * height; }
    bool contains(std::uint32_t x, std::uint32_t y) const { return x < width && y < height; }
    friend bool operator==(const Geometry&, const Geometry&) = default;
};

struct Event {
    Timestamp t = 0;
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::int8_t p = 1;  // -1 or +1

    friend bool operator==(const Event&, const Event&) = default;
};

struct EventStream {
    Geometry geometry;
    std::vector<Event> events;  // sorted by t, non-decreasing
};

/// Half-open time window [t0, t0 + dt) over a stream. Views into the parent
/// stream's storage, so the stream must outlive the slice.
struct EventSlice {
    Geometry geometry;
    Timestamp t0 = 0;
    Timestamp dt = 0;
    std::span<const Event> events;
};

/// Signed per-pixel polarity sum over one window, row-major [y][x].
struct EventFrame {
    Geometry geometry;
    Timestamp t0 = 0;
    Timestamp dt = 0;
    std::vector<std::int32_t> grid;

    std::int32_t at(std::uint32_t x, std::uint32_t y) const { return grid[std::size_t{y} * geometry.width + x]; }
};

/// Dense real-valued image, row-major [y][x].
struct Grid {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    Grid() = default;
    Grid(int w, int h, double fill = 0.0) : width(w), height(h), values(std::size_t(w) * h, fill) {}

    double& at(int x, int y) { return values[std::size_t(y) * width + x]; }
    double at(int x, int y) const { return values[std::size_t(y) * width + x]; }
};

/// Real volume bins x H x W, row-major [bin][y][x].
struct Voxel {
    int bins = 0;
    int width = 0;
    int height = 0;
    std::vector<double> values;

    double at(int b, int x, int y) const { return values[(std::size_t(b) * height + y) * width + x]; }
};

enum class EventFormat { csv, binary };

EventFormat format_from_path(const std::filesystem::path& path);

// ---- parsing / serialization ----

/// CSV rows `t_ns,x,y,p`; optional header line; p in {1,-1} or {1,0} (0 -> -1).
EventStream parse_events_csv(std::string_view text, Geometry geometry);
/// "EVT1" magic, u16 width, u16 height, then 13-byte little-endian records.
EventStream parse_events_binary(std::string_view bytes);
EventStream read_event_file(const std::filesystem::path& path, std::optional<Geometry> csv_geometry = std::nullopt);

std::string serialize_events_csv(const EventStream& stream);
std::string serialize_events_binary(const EventStream& stream);
void write_event_file(const std::filesystem::path& path, const EventStream& stream, EventFormat format);

std::vector<BBoxN> parse_boxes_csv(std::string_view text);
std::vector<BBoxN> read_boxes_file(const std::filesystem::path& path);
std::string serialize_boxes_csv(std::span<const BBoxN> boxes);

constexpr std::size_t kBinaryHeaderBytes = 8;
constexpr std::size_t kBinaryRecordBytes = 13;

// ---- windowing and aggregation ----

EventSlice window_events(const EventStream& stream, Timestamp t0, Timestamp dt);
/// Number of full-or-partial windows needed to cover the stream from t = 0.
std::size_t window_count(const EventStream& stream, Timestamp dt);

EventFrame aggregate_frame(const EventSlice& slice);
Grid normalize_frame(const EventFrame& frame, int clip = kDefaultClip);
Voxel voxel_grid(const EventSlice& slice, int bins);

/// Maps between crop-normalized coordinates ([0,1] across the crop) and image
/// pixel coordinates (continuous, pixel k spans [k, k+1)).
struct CropTransform {
    double x0 = 0.0;
    double y0 = 0.0;
    double side = 1.0;

    double to_image_x(double u) const { return x0 + u * side; }
    double to_image_y(double v) const { return y0 + v * side; }
    double to_crop_x(double x) const { return (x - x0) / side; }
    double to_crop_y(double y) const { return (y - y0) / side; }

    /// Crop-frame box -> image-normalized box for an image of the given size.
    BBoxN box_to_image(const BBoxN& crop_box, int image_w, int image_h) const;
    /// Image-normalized box -> crop-frame box.
    BBoxN box_to_crop(const BBoxN& image_box, int image_w, int image_h) const;
};

struct CropResult {
    Grid grid;
    CropTransform transform;
};

/// Square crop centered on `box` (image-normalized) with side
/// context * max(box w, box h) in pixels, bilinearly resampled to out_w x out_h.
/// Samples outside the image read as zero.
CropResult crop_resize(const Grid& image, const BBoxN& box, double context, int out_w, int out_h);
CropTransform crop_transform(const BBoxN& box, double context, int image_w, int image_h);

// ---- streaming ingestion ----

/// Aggregates events into consecutive windows without retaining the stream.
/// Memory is one frame regardless of stream length.
class StreamingAggregator {
public:
    using FrameSink = std::function<void(const EventFrame&)>;

    StreamingAggregator(Geometry geometry, Timestamp dt, FrameSink sink);

    void push(const Event& e);
    void push(std::span<const Event> events);
    /// Emits the partially filled last window, if any events landed in it.
    void finish();

    std::uint64_t events_seen() const { return seen_; }
    std::uint64_t frames_emitted() const { return emitted_; }

private:
    void emit_until(Timestamp t);

    Geometry geometry_;
    Timestamp dt_;
    FrameSink sink_;
    EventFrame current_;
    bool dirty_ = false;
    std::uint64_t seen_ = 0;
    std::uint64_t emitted_ = 0;
};

/// Reads a binary event file in fixed-size chunks and feeds an aggregator.
/// Returns the number of events read.
std::uint64_t stream_binary_file(const std::filesystem::path& path, Timestamp dt,
                                 const StreamingAggregator::FrameSink& sink,
                                 std::size_t chunk_records = 1 << 16);

}  // namespace evtrack
