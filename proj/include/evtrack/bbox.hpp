#pragma once

#include <algorithm>

namespace evtrack {

/// Center-size box with all four components normalized to [0, 1] of some
/// reference frame (a search crop or the full image).
struct BBoxN {
    double cx = 0.5;
    double cy = 0.5;
    double w = 0.0;
    double h = 0.0;

    double left() const { return cx - 0.5 * w; }
    double right() const { return cx + 0.5 * w; }
    double top() const { return cy - 0.5 * h; }
    double bottom() const { return cy + 0.5 * h; }
    double area() const { return std::max(0.0, w) * std::max(0.0, h); }
    bool has_positive_area() const { return w > 0.0 && h > 0.0; }

    friend bool operator==(const BBoxN&, const BBoxN&) = default;
};

/// Clamps a box into the unit frame: center to [0,1], size to (0,1].
inline BBoxN clip_unit(BBoxN b, double min_size = 1e-4) {
    b.cx = std::clamp(b.cx, 0.0, 1.0);
    b.cy = std::clamp(b.cy, 0.0, 1.0);
    b.w = std::clamp(b.w, min_size, 1.0);
    b.h = std::clamp(b.h, min_size, 1.0);
    return b;
}

}  // namespace evtrack
