#include "mvcd/box.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvcd {

namespace {
constexpr double kMaxLogScale = 4.0;
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: degenerate box");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

Box clip_box(const Box& b, double width, double height) {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
             std::clamp(b.y2, 0.0, height)};
}

std::array<double, 4> box_deltas(const Box& from, const Box& to) {
  const double fw = from.width();
  const double fh = from.height();
  return {((to.x1 + to.x2) - (from.x1 + from.x2)) * 0.5 / fw, ((to.y1 + to.y2) - (from.y1 + from.y2)) * 0.5 / fh,
          std::log(to.width() / fw), std::log(to.height() / fh)};
}

Box apply_deltas(const Box& from, const std::array<double, 4>& d) {
  const double fw = from.width();
  const double fh = from.height();
  const double cx = (from.x1 + from.x2) * 0.5 + d[0] * fw;
  const double cy = (from.y1 + from.y2) * 0.5 + d[1] * fh;
  const double w = fw * std::exp(std::clamp(d[2], -kMaxLogScale, kMaxLogScale));
  const double h = fh * std::exp(std::clamp(d[3], -kMaxLogScale, kMaxLogScale));
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace mvcd
