#pragma once

#include <array>

namespace mvcd {

/// Axis-aligned box in continuous image coordinates (no +1 pixel convention).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; throws std::invalid_argument on a degenerate box.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

/// Regression offsets (dx, dy, dw, dh) taking `from` onto `to`.
std::array<double, 4> box_deltas(const Box& from, const Box& to);

/// Inverse of box_deltas; dw/dh are clamped to keep exp() bounded.
Box apply_deltas(const Box& from, const std::array<double, 4>& deltas);

}  // namespace mvcd
