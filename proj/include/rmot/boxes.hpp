// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "rmot/tensor.hpp"

namespace rmot {

/// Axis-aligned box in center format, normalized to the canvas.
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x0() const { return cx - 0.5 * w; }
    double y0() const { return cy - 0.5 * h; }
    double x1() const { return cx + 0.5 * w; }
    double y1() const { return cy + 0.5 * h; }
    // from corners, consistent with intersection_area
    double area() const { return (x1() - x0()) * (y1() - y0()); }
    std::array<double, 4> to_array() const { return {cx, cy, w, h}; }

    static Box from_corners(double x0, double y0, double x1, double y1) {
        return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
    }

    friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    return iw > 0.0 && ih > 0.0 ? iw * ih : 0.0;
}

/// IoU; degenerate boxes score 0 instead of failing.
inline double iou(const Box& a, const Box& b) {
    if (a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0) return 0.0;
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

/// Generalized IoU: IoU - (hull - union) / hull, in (-1, 1].
inline double giou(const Box& a, const Box& b) {
    if (a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0) {
        throw ContractError("giou: degenerate box");
    }
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    const double hull = (std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0())) *
                        (std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0()));
    return inter / uni - (hull - uni) / hull;
}

inline double l1_distance(const Box& a, const Box& b) {
    return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) + std::fabs(a.h - b.h);
}

inline Box box_row(const Tensor& t, std::size_t r) {
    return {t.at(r, 0), t.at(r, 1), t.at(r, 2), t.at(r, 3)};
}

/// Differentiable per-row GIoU for n x 4 center-format boxes; returns n x 1.
inline Tensor giou_rows(const Tensor& pred, const Tensor& target) {
    if (pred.cols() != 4 || target.shape() != pred.shape()) throw DimensionError("giou_rows: expected matching n x 4");
    auto corners = [](const Tensor& b) {
        const Tensor c = slice_cols(b, 0, 2);
        const Tensor half = scale(slice_cols(b, 2, 4), 0.5);
        return std::pair{sub(c, half), add(c, half)};
    };
    const auto [p0, p1] = corners(pred);
    const auto [t0, t1] = corners(target);
    const Tensor zero = Tensor::scalar(0.0);
    const Tensor lo = maximum(p0, t0);
    const Tensor hi = minimum(p1, t1);
    const Tensor wh = maximum(sub(hi, lo), zero);
    const Tensor inter = mul(slice_cols(wh, 0, 1), slice_cols(wh, 1, 2));
    const Tensor area_p = mul(slice_cols(pred, 2, 3), slice_cols(pred, 3, 4));
    const Tensor area_t = mul(slice_cols(target, 2, 3), slice_cols(target, 3, 4));
    const Tensor uni = sub(add(area_p, area_t), inter);
    const Tensor hull_wh = sub(maximum(p1, t1), minimum(p0, t0));
    const Tensor hull = mul(slice_cols(hull_wh, 0, 1), slice_cols(hull_wh, 1, 2));
    return sub(div(inter, uni), div(sub(hull, uni), hull));
}

/// Per-row L1 distance for n x 4 boxes; returns n x 1.
inline Tensor l1_rows(const Tensor& pred, const Tensor& target) {
    const Tensor d = abs(sub(pred, target));
    return matmul(d, Tensor::ones({4, 1}));
}

}  // namespace rmot
