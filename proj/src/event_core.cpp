#include "evtrack/event_core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <limits>
#include <fstream>
#include <sstream>

#include "evtrack/errors.hpp"

namespace evtrack {

namespace {

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_all(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

bool looks_like_header(std::string_view line) {
    for (char c : line) {
        if (std::isalpha(static_cast<unsigned char>(c))) return true;
    }
    return false;
}

// Calls fn(line_number, line) for each non-empty line.
template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        auto line = trim(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
        ++line_no;
        if (!line.empty()) fn(line_no, line);
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
}

template <typename T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(static_cast<unsigned char>(p[i])) << (8 * i);
    return static_cast<T>(v);
}

Event decode_record(const char* rec, std::size_t offset, const Geometry& g) {
    Event e;
    e.t = get_le<std::uint64_t>(rec);
    e.x = get_le<std::uint16_t>(rec + 8);
    e.y = get_le<std::uint16_t>(rec + 10);
    e.p = static_cast<std::int8_t>(rec[12]);
    if (e.p != 1 && e.p != -1) throw DataError("unknown polarity " + std::to_string(int(e.p)) + " at byte offset " + std::to_string(offset));
    if (!g.contains(e.x, e.y)) {
        throw DataError("coordinate out of range (" + std::to_string(e.x) + "," + std::to_string(e.y) + ") at byte offset " +
                        std::to_string(offset));
    }
    return e;
}

Geometry decode_header(const char* p) {
    if (std::memcmp(p, "EVT1", 4) != 0) throw DataError("bad magic: expected EVT1");
    return Geometry{get_le<std::uint16_t>(p + 4), get_le<std::uint16_t>(p + 6)};
}

void sort_stable(std::vector<Event>& events) {
    if (!std::is_sorted(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; })) {
        std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
    }
}

}  // namespace

EventFormat format_from_path(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    if (ext == ".csv" || ext == ".txt") return EventFormat::csv;
    return EventFormat::binary;
}

EventStream parse_events_csv(std::string_view text, Geometry geometry) {
    EventStream stream;
    stream.geometry = geometry;
    bool first = true;
    for_each_line(text, [&](std::size_t line_no, std::string_view line) {
        if (first && looks_like_header(line)) {
            first = false;
            return;
        }
        first = false;
        auto fields = split_fields(line);
        auto where = " on line " + std::to_string(line_no);
        if (fields.size() != 4) throw DataError("malformed record (expected 4 fields)" + where);
        Event e;
        std::uint64_t x = 0, y = 0;
        int p = 0;
        if (!parse_number(fields[0], e.t) || !parse_number(fields[1], x) || !parse_number(fields[2], y)) {
            throw DataError("malformed record" + where);
        }
        if (!parse_number(fields[3], p) || (p != 1 && p != -1 && p != 0)) {
            throw DataError("unknown polarity token '" + std::string(fields[3]) + "'" + where);
        }
        if (x >= geometry.width || y >= geometry.height) throw DataError("coordinate out of range" + where);
        e.x = static_cast<std::uint16_t>(x);
        e.y = static_cast<std::uint16_t>(y);
        e.p = static_cast<std::int8_t>(p == 0 ? -1 : p);
        stream.events.push_back(e);
    });
    sort_stable(stream.events);
    return stream;
}

EventStream parse_events_binary(std::string_view bytes) {
    if (bytes.size() < kBinaryHeaderBytes) throw DataError("truncated header (" + std::to_string(bytes.size()) + " bytes)");
    EventStream stream;
    stream.geometry = decode_header(bytes.data());
    auto body = bytes.size() - kBinaryHeaderBytes;
    if (body % kBinaryRecordBytes != 0) {
        throw DataError("malformed record: trailing partial record at byte offset " +
                        std::to_string(kBinaryHeaderBytes + body / kBinaryRecordBytes * kBinaryRecordBytes));
    }
    auto n = body / kBinaryRecordBytes;
    stream.events.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto offset = kBinaryHeaderBytes + i * kBinaryRecordBytes;
        stream.events.push_back(decode_record(bytes.data() + offset, offset, stream.geometry));
    }
    sort_stable(stream.events);
    return stream;
}

EventStream read_event_file(const std::filesystem::path& path, std::optional<Geometry> csv_geometry) {
    auto bytes = read_all(path);
    try {
        if (format_from_path(path) == EventFormat::csv) {
            if (!csv_geometry) throw DataError("CSV event files need an explicit sensor geometry");
            return parse_events_csv(bytes, *csv_geometry);
        }
        return parse_events_binary(bytes);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

std::string serialize_events_csv(const EventStream& stream) {
    std::string out = "t_ns,x,y,p\n";
    out.reserve(out.size() + stream.events.size() * 24);
    for (const auto& e : stream.events) {
        out += std::to_string(e.t);
        out += ',';
        out += std::to_string(e.x);
        out += ',';
        out += std::to_string(e.y);
        out += ',';
        out += e.p > 0 ? "1" : "-1";
        out += '\n';
    }
    return out;
}

std::string serialize_events_binary(const EventStream& stream) {
    if (stream.geometry.width > 0xFFFF || stream.geometry.height > 0xFFFF) throw DataError("geometry exceeds u16 range");
    std::string out;
    out.reserve(kBinaryHeaderBytes + stream.events.size() * kBinaryRecordBytes);
    out += "EVT1";
    put_le(out, static_cast<std::uint16_t>(stream.geometry.width));
    put_le(out, static_cast<std::uint16_t>(stream.geometry.height));
    for (const auto& e : stream.events) {
        put_le(out, e.t);
        put_le(out, e.x);
        put_le(out, e.y);
        out.push_back(static_cast<char>(e.p));
    }
    return out;
}

void write_event_file(const std::filesystem::path& path, const EventStream& stream, EventFormat format) {
    write_all(path, format == EventFormat::csv ? serialize_events_csv(stream) : serialize_events_binary(stream));
}

std::vector<BBoxN> parse_boxes_csv(std::string_view text) {
    std::vector<BBoxN> boxes;
    bool first = true;
    for_each_line(text, [&](std::size_t line_no, std::string_view line) {
        if (first && looks_like_header(line)) {
            first = false;
            return;
        }
        first = false;
        auto fields = split_fields(line);
        auto where = " on line " + std::to_string(line_no);
        if (fields.size() != 5) throw DataError("malformed box record (expected 5 fields)" + where);
        std::size_t index = 0;
        BBoxN b;
        if (!parse_number(fields[0], index) || !parse_number(fields[1], b.cx) || !parse_number(fields[2], b.cy) ||
            !parse_number(fields[3], b.w) || !parse_number(fields[4], b.h)) {
            throw DataError("malformed box record" + where);
        }
        if (index != boxes.size()) throw DataError("box frame indices must be consecutive from 0" + where);
        boxes.push_back(b);
    });
    return boxes;
}

std::vector<BBoxN> read_boxes_file(const std::filesystem::path& path) {
    try {
        return parse_boxes_csv(read_all(path));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

std::string serialize_boxes_csv(std::span<const BBoxN> boxes) {
    std::string out = "frame_index,cx,cy,w,h\n";
    char buf[256];
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", i, b.cx, b.cy, b.w, b.h);
        out += buf;
    }
    return out;
}

EventSlice window_events(const EventStream& stream, Timestamp t0, Timestamp dt) {
    if (dt == 0) throw DataError("window length must be positive");
    const auto& ev = stream.events;
    auto by_t = [](const Event& e, Timestamp t) { return e.t < t; };
    auto lo = std::lower_bound(ev.begin(), ev.end(), t0, by_t);
    auto t1 = t0 + dt < t0 ? std::numeric_limits<Timestamp>::max() : t0 + dt;
    auto hi = std::lower_bound(lo, ev.end(), t1, by_t);
    return EventSlice{stream.geometry, t0, dt, std::span<const Event>(ev.data() + (lo - ev.begin()), std::size_t(hi - lo))};
}

std::size_t window_count(const EventStream& stream, Timestamp dt) {
    if (stream.events.empty()) return 0;
    return static_cast<std::size_t>(stream.events.back().t / dt) + 1;
}

EventFrame aggregate_frame(const EventSlice& slice) {
    EventFrame frame;
    frame.geometry = slice.geometry;
    frame.t0 = slice.t0;
    frame.dt = slice.dt;
    frame.grid.assign(slice.geometry.pixels(), 0);
    const auto w = slice.geometry.width;
    for (const auto& e : slice.events) frame.grid[std::size_t{e.y} * w + e.x] += e.p;
    return frame;
}

Grid normalize_frame(const EventFrame& frame, int clip) {
    if (clip < 1) throw DataError("clip must be >= 1");
    Grid g(static_cast<int>(frame.geometry.width), static_cast<int>(frame.geometry.height));
    const double inv = 1.0 / clip;
    for (std::size_t i = 0; i < frame.grid.size(); ++i) {
        g.values[i] = std::clamp(frame.grid[i], -clip, clip) * inv;
    }
    return g;
}

Voxel voxel_grid(const EventSlice& slice, int bins) {
    if (bins < 1) throw DataError("voxel grid needs at least one bin");
    Voxel v;
    v.bins = bins;
    v.width = static_cast<int>(slice.geometry.width);
    v.height = static_cast<int>(slice.geometry.height);
    v.values.assign(std::size_t(bins) * slice.geometry.pixels(), 0.0);
    const std::size_t plane = slice.geometry.pixels();
    for (const auto& e : slice.events) {
        // Bin b is centered at t0 + (b + 0.5) * dt / bins.
        double pos = (static_cast<double>(e.t - slice.t0) / static_cast<double>(slice.dt)) * bins - 0.5;
        pos = std::clamp(pos, 0.0, double(bins - 1));
        int lo = static_cast<int>(std::floor(pos));
        double frac = pos - lo;
        std::size_t px = std::size_t{e.y} * slice.geometry.width + e.x;
        v.values[std::size_t(lo) * plane + px] += e.p * (1.0 - frac);
        if (frac > 0.0) v.values[std::size_t(lo + 1) * plane + px] += e.p * frac;
    }
    return v;
}

BBoxN CropTransform::box_to_image(const BBoxN& b, int image_w, int image_h) const {
    return BBoxN{to_image_x(b.cx) / image_w, to_image_y(b.cy) / image_h, b.w * side / image_w, b.h * side / image_h};
}

BBoxN CropTransform::box_to_crop(const BBoxN& b, int image_w, int image_h) const {
    return BBoxN{to_crop_x(b.cx * image_w), to_crop_y(b.cy * image_h), b.w * image_w / side, b.h * image_h / side};
}

CropTransform crop_transform(const BBoxN& box, double context, int image_w, int image_h) {
    if (!(box.w > 0.0) || !(box.h > 0.0)) throw DataError("degenerate box: width and height must be positive");
    if (!(context > 0.0)) throw DataError("crop context must be positive");
    double side = context * std::max(box.w * image_w, box.h * image_h);
    return CropTransform{box.cx * image_w - 0.5 * side, box.cy * image_h - 0.5 * side, side};
}

CropResult crop_resize(const Grid& image, const BBoxN& box, double context, int out_w, int out_h) {
    auto tf = crop_transform(box, context, image.width, image.height);
    Grid out(out_w, out_h);
    auto sample = [&](int x, int y) -> double {
        if (x < 0 || y < 0 || x >= image.width || y >= image.height) return 0.0;
        return image.at(x, y);
    };
    for (int v = 0; v < out_h; ++v) {
        // Pixel centers: output (u + 0.5) maps to image continuous coordinate; image pixel k is centered at k + 0.5.
        double fy = tf.y0 + ((v + 0.5) * tf.side) / out_h - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double ay = fy - y0;
        for (int u = 0; u < out_w; ++u) {
            double fx = tf.x0 + ((u + 0.5) * tf.side) / out_w - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double ax = fx - x0;
            double top = (1.0 - ax) * sample(x0, y0) + (ax > 0.0 ? ax * sample(x0 + 1, y0) : 0.0);
            double val = (1.0 - ay) * top;
            if (ay > 0.0) val += ay * ((1.0 - ax) * sample(x0, y0 + 1) + (ax > 0.0 ? ax * sample(x0 + 1, y0 + 1) : 0.0));
            out.at(u, v) = val;
        }
    }
    return CropResult{std::move(out), tf};
}

StreamingAggregator::StreamingAggregator(Geometry geometry, Timestamp dt, FrameSink sink)
    : geometry_(geometry), dt_(dt), sink_(std::move(sink)) {
    if (dt == 0) throw DataError("window length must be positive");
    current_.geometry = geometry;
    current_.dt = dt;
    current_.t0 = 0;
    current_.grid.assign(geometry.pixels(), 0);
}

void StreamingAggregator::emit_until(Timestamp t) {
    // Emits every window that ends at or before t, including empty ones.
    while (t >= current_.t0 + dt_) {
        sink_(current_);
        ++emitted_;
        if (dirty_) std::fill(current_.grid.begin(), current_.grid.end(), 0);
        dirty_ = false;
        current_.t0 += dt_;
    }
}

void StreamingAggregator::push(const Event& e) {
    if (e.t < current_.t0) throw DataError("streaming aggregation requires time-sorted events");
    if (e.t >= current_.t0 + dt_) emit_until(e.t);
    current_.grid[std::size_t{e.y} * geometry_.width + e.x] += e.p;
    dirty_ = true;
    ++seen_;
}

void StreamingAggregator::push(std::span<const Event> events) {
    for (const auto& e : events) push(e);
}

void StreamingAggregator::finish() {
    if (dirty_) {
        sink_(current_);
        ++emitted_;
        std::fill(current_.grid.begin(), current_.grid.end(), 0);
        dirty_ = false;
        current_.t0 += dt_;
    }
}

std::uint64_t stream_binary_file(const std::filesystem::path& path, Timestamp dt, const StreamingAggregator::FrameSink& sink,
                                 std::size_t chunk_records) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    char header[kBinaryHeaderBytes];
    if (!in.read(header, kBinaryHeaderBytes)) throw DataError(path.string() + ": truncated header");
    auto geometry = decode_header(header);
    StreamingAggregator agg(geometry, dt, sink);
    std::vector<char> buf(chunk_records * kBinaryRecordBytes);
    std::size_t offset = kBinaryHeaderBytes;
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        auto got = static_cast<std::size_t>(in.gcount());
        if (got == 0) break;
        if (got % kBinaryRecordBytes != 0) {
            throw DataError(path.string() + ": malformed record: trailing partial record at byte offset " +
                            std::to_string(offset + got / kBinaryRecordBytes * kBinaryRecordBytes));
        }
        for (std::size_t i = 0; i < got; i += kBinaryRecordBytes) agg.push(decode_record(buf.data() + i, offset + i, geometry));
        offset += got;
    }
    agg.finish();
    return agg.events_seen();
}

}  // namespace evtrack
