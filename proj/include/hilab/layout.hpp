#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "hilab/common.hpp"

namespace hilab::layout {

enum class Preset { small = 2, medium = 3, large = 4, very_large = 5 };
enum class CellScale { same, half };
enum class Quadrant { nw, ne, se, sw, none };

inline const char* to_string(Preset p) {
  switch (p) {
    case Preset::small: return "small";
    case Preset::medium: return "medium";
    case Preset::large: return "large";
    case Preset::very_large: return "very_large";
  }
  return "small";
}

inline Preset parse_preset(std::string_view s) {
  if (s == "small") return Preset::small;
  if (s == "medium") return Preset::medium;
  if (s == "large") return Preset::large;
  if (s == "very_large" || s == "very-large") return Preset::very_large;
  throw Error(ErrorCode::invalid_argument, "unknown layout preset '" + std::string(s) + "'");
}

inline const char* to_string(Quadrant q) {
  switch (q) {
    case Quadrant::nw: return "NW";
    case Quadrant::ne: return "NE";
    case Quadrant::se: return "SE";
    case Quadrant::sw: return "SW";
    case Quadrant::none: return "none";
  }
  return "none";
}

struct Rect {
  double x = 0, y = 0, w = 0, h = 0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// One thumbnail slot on the unit-square canvas (y grows downward).
struct LayoutBox {
  std::string image_id;
  Rect rect;
  std::size_t ring = 0;
  Quadrant quadrant = Quadrant::none;
  bool subdivided = false;

  friend bool operator==(const LayoutBox&, const LayoutBox&) = default;
};

struct LayoutResult {
  std::vector<LayoutBox> boxes;  // center first when present
  std::vector<std::string> notices;
};

struct RingPlan {
  std::size_t ring_index = 1;
  CellScale cell_scale = CellScale::same;
  std::size_t capacity = 0;
  std::size_t edge_cells = 0;  // cells along each side, corners excluded
};

/// Scale schedule per preset. Ring 1 always matches the center's size.
inline std::vector<CellScale> scale_schedule(Preset preset) {
  const std::array<CellScale, 5> full = {CellScale::same, CellScale::half, CellScale::same, CellScale::half,
                                         CellScale::same};
  return {full.begin(), full.begin() + static_cast<int>(preset)};
}

/// Ring capacities: ring 1 holds 8; a same-scale ring holds previous + 4;
/// a half-scale ring holds 2 * previous + 4.
inline std::vector<RingPlan> ring_capacities(Preset preset) {
  std::vector<RingPlan> out;
  std::size_t prev = 0;
  for (auto scale : scale_schedule(preset)) {
    RingPlan r;
    r.ring_index = out.size() + 1;
    r.cell_scale = scale;
    if (out.empty()) r.capacity = 8;
    else r.capacity = scale == CellScale::same ? prev + 4 : 2 * prev + 4;
    r.edge_cells = (r.capacity - 4) / 4;
    prev = r.capacity;
    out.push_back(r);
  }
  return out;
}

inline std::size_t total_capacity(Preset preset) {
  std::size_t t = 0;
  for (const auto& r : ring_capacities(preset)) t += r.capacity;
  return t;
}

inline constexpr std::array<std::size_t, 4> kPresetTotals = {28, 52, 104, 160};

struct RingGeometry {
  Rect center;
  std::vector<std::vector<Rect>> rings;  // per ring, clockwise from the top-left corner
};

/// Cell rectangles for every ring. Ring thickness halves on half-scale rings;
/// edge cells split each inner side evenly. The whole figure fills the unit square.
inline RingGeometry ring_geometry(Preset preset) {
  const auto plans = ring_capacities(preset);
  std::vector<double> thickness;  // in units of the center size
  double t = 1.0, extent = 1.0;
  for (const auto& p : plans) {
    if (p.cell_scale == CellScale::half && !thickness.empty()) t *= 0.5;
    thickness.push_back(t);
    extent += 2.0 * t;
  }
  const double a0 = 1.0 / extent;
  RingGeometry g;
  g.center = {0.5 - a0 / 2, 0.5 - a0 / 2, a0, a0};
  double lo = g.center.x, side = a0;
  for (std::size_t r = 0; r < plans.size(); ++r) {
    const double th = thickness[r] * a0;
    const std::size_t e = plans[r].edge_cells;
    const double step = side / static_cast<double>(e);
    const double hi = lo + side;
    std::vector<Rect> cells;
    cells.reserve(plans[r].capacity);
    cells.push_back({lo - th, lo - th, th, th});
    for (std::size_t i = 0; i < e; ++i) cells.push_back({lo + i * step, lo - th, step, th});
    cells.push_back({hi, lo - th, th, th});
    for (std::size_t i = 0; i < e; ++i) cells.push_back({hi, lo + i * step, th, step});
    cells.push_back({hi, hi, th, th});
    for (std::size_t i = 0; i < e; ++i) cells.push_back({lo + (e - 1 - i) * step, hi, step, th});
    cells.push_back({lo - th, hi, th, th});
    for (std::size_t i = 0; i < e; ++i) cells.push_back({lo - th, lo + (e - 1 - i) * step, th, step});
    g.rings.push_back(std::move(cells));
    lo -= th;
    side += 2 * th;
  }
  return g;
}

/// Four quarter-cells in clockwise order from the top-left.
inline std::array<Rect, 4> subdivide(const Rect& r) {
  const double hw = r.w / 2, hh = r.h / 2;
  return {Rect{r.x, r.y, hw, hh}, Rect{r.x + hw, r.y, hw, hh}, Rect{r.x + hw, r.y + hh, hw, hh},
          Rect{r.x, r.y + hh, hw, hh}};
}

/// Places neighbors (already sorted by ascending distance) clockwise from
/// each ring's top-left corner, innermost ring first.
inline LayoutResult spiral_layout(const std::string& center, const std::vector<std::string>& neighbors,
                                  Preset preset) {
  const auto g = ring_geometry(preset);
  LayoutResult out;
  out.boxes.push_back({center, g.center, 0, Quadrant::none, false});
  std::size_t next = 0;
  for (std::size_t r = 0; r < g.rings.size() && next < neighbors.size(); ++r) {
    for (const auto& cell : g.rings[r]) {
      if (next == neighbors.size()) break;
      out.boxes.push_back({neighbors[next++], cell, r + 1, Quadrant::none, false});
    }
  }
  if (next < neighbors.size()) {
    out.notices.push_back(std::to_string(neighbors.size() - next) + " neighbor(s) beyond the " +
                          to_string(preset) + " preset capacity were dropped");
  }
  return out;
}

struct SpatialItem {
  std::string id;
  double x = 0;
  double y = 0;
};

/// Screen convention: Δy < 0 is north. Points on an axis go to the quadrant
/// clockwise-next from it; a coincident point counts as SE.
inline Quadrant quadrant_of(double dx, double dy) {
  const bool east = dx > 0 || (dx == 0 && dy <= 0);
  const bool north = dy < 0 || (dy == 0 && dx < 0);
  if (north) return east ? Quadrant::ne : Quadrant::nw;
  return east ? Quadrant::se : Quadrant::sw;
}

/// Spiral variant that keeps every neighbor in the ring arc of its
/// data-space quadrant. Each ring's clockwise cell sequence, starting on the
/// upper half of its left edge, is cut into NW, NE, SE, SW arcs sized by largest-remainder allocation of the
/// remaining per-quadrant counts. A quadrant that still overflows gets its
/// cells split into four, outermost and last-placed first, one level deep.
inline LayoutResult spatial_spiral_layout(const SpatialItem& center, const std::vector<SpatialItem>& neighbors,
                                          Preset preset) {
  if (!std::isfinite(center.x) || !std::isfinite(center.y)) {
    throw Error(ErrorCode::invalid_argument, "non-finite center coordinates");
  }
  struct Placed {
    const SpatialItem* item;
    double dist2;
  };
  std::array<std::vector<Placed>, 4> by_quadrant;
  for (const auto& n : neighbors) {
    if (!std::isfinite(n.x) || !std::isfinite(n.y)) {
      throw Error(ErrorCode::invalid_argument, "non-finite coordinates for '" + n.id + "'");
    }
    const double dx = n.x - center.x, dy = n.y - center.y;
    by_quadrant[static_cast<int>(quadrant_of(dx, dy))].push_back({&n, dx * dx + dy * dy});
  }
  for (auto& q : by_quadrant) {
    std::sort(q.begin(), q.end(), [](const Placed& a, const Placed& b) {
      if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
      return a.item->id < b.item->id;
    });
  }

  const auto g = ring_geometry(preset);
  const auto ring_plans = ring_capacities(preset);
  struct Slot {
    Rect rect;
    std::size_t ring;
  };
  std::array<std::vector<Slot>, 4> slots;  // per quadrant, placement order
  std::array<std::size_t, 4> remaining{};
  for (int q = 0; q < 4; ++q) remaining[q] = by_quadrant[q].size();

  for (std::size_t r = 0; r < g.rings.size(); ++r) {
    std::size_t left = remaining[0] + remaining[1] + remaining[2] + remaining[3];
    if (left == 0) break;
    const auto& cells = g.rings[r];
    // Start on the upper half of the left edge.
    const std::size_t n = cells.size();
    const std::size_t rotation = n - ring_plans[r].edge_cells / 2;
    auto arcs = largest_remainder(n, {double(remaining[0]), double(remaining[1]),
                                      double(remaining[2]), double(remaining[3])});
    std::size_t start = 0;
    for (int q = 0; q < 4; ++q) {
      const std::size_t take = std::min(arcs[q], remaining[q]);
      for (std::size_t i = 0; i < take; ++i) slots[q].push_back({cells[(rotation + start + i) % n], r + 1});
      remaining[q] -= take;
      start += arcs[q];
    }
  }

  LayoutResult out;
  out.boxes.push_back({center.id, g.center, 0, Quadrant::none, false});
  for (int q = 0; q < 4; ++q) {
    const auto quad = static_cast<Quadrant>(q);
    const auto& items = by_quadrant[q];
    std::vector<bool> split(slots[q].size(), false);
    std::size_t capacity = slots[q].size();
    for (std::size_t k = slots[q].size(); k-- > 0 && capacity < items.size();) {
      split[k] = true;
      capacity += 3;
    }
    if (capacity > slots[q].size()) {
      out.notices.push_back(std::string(to_string(quad)) + ": subdivided " +
                            std::to_string((capacity - slots[q].size()) / 3) + " cell(s)");
    }
    std::size_t next = 0;
    for (std::size_t k = 0; k < slots[q].size() && next < items.size(); ++k) {
      if (!split[k]) {
        out.boxes.push_back({items[next++].item->id, slots[q][k].rect, slots[q][k].ring, quad, false});
        continue;
      }
      for (const auto& sub : subdivide(slots[q][k].rect)) {
        if (next == items.size()) break;
        out.boxes.push_back({items[next++].item->id, sub, slots[q][k].ring, quad, true});
      }
    }
    if (next < items.size()) {
      out.notices.push_back(std::string(to_string(quad)) + ": " + std::to_string(items.size() - next) +
                            " farthest neighbor(s) dropped");
    }
  }
  return out;
}

/// Row-major square cells from the top-left corner.
inline LayoutResult grid_layout(const std::vector<std::string>& ids, std::size_t columns) {
  if (columns < 1) throw Error(ErrorCode::invalid_argument, "grid needs at least one column");
  LayoutResult out;
  if (ids.empty()) return out;
  const std::size_t rows = (ids.size() + columns - 1) / columns;
  const double side = 1.0 / static_cast<double>(std::max(columns, rows));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double x = static_cast<double>(i % columns) * side;
    const double y = static_cast<double>(i / columns) * side;
    out.boxes.push_back({ids[i], {x, y, side, side}, 0, Quadrant::none, false});
  }
  return out;
}

inline const char* quadrant_color(Quadrant q) {
  switch (q) {
    case Quadrant::nw: return "#e41a1c";
    case Quadrant::ne: return "#377eb8";
    case Quadrant::se: return "#4daf4a";
    case Quadrant::sw: return "#984ea3";
    case Quadrant::none: return "#9e9e9e";
  }
  return "#9e9e9e";
}

/// Deterministic SVG rendering: fixed three-decimal coordinates, one rect
/// per box in box order. The first box (the image of interest) is white.
inline std::string to_svg(const LayoutResult& layout, double size = 512.0) {
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "viewBox=\"0 0 %.0f %.0f\">\n",
                size, size, size, size);
  out += buf;
  std::snprintf(buf, sizeof buf, "<rect x=\"0\" y=\"0\" width=\"%.0f\" height=\"%.0f\" fill=\"#000000\"/>\n",
                size, size);
  out += buf;
  for (const auto& b : layout.boxes) {
    const char* fill = &b == &layout.boxes.front() ? "#ffffff" : quadrant_color(b.quadrant);
    std::snprintf(buf, sizeof buf,
                  "<rect data-id=\"%s\" data-ring=\"%zu\" data-quadrant=\"%s\" x=\"%.3f\" y=\"%.3f\" "
                  "width=\"%.3f\" height=\"%.3f\" fill=\"%s\" stroke=\"#ffffff\" stroke-width=\"0.5\"%s/>\n",
                  b.image_id.c_str(), b.ring, to_string(b.quadrant), b.rect.x * size, b.rect.y * size,
                  b.rect.w * size, b.rect.h * size, fill, b.subdivided ? " data-subdivided=\"true\"" : "");
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace hilab::layout
