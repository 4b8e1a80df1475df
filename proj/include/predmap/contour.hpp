#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "predmap/model.hpp"

namespace predmap {

struct BoundingBox {
  double x_min = -1.0;
  double x_max = 1.0;
  double y_min = -1.0;
  double y_max = 1.0;

  bool contains(Vec2 p) const { return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max; }
};

// Iso-curves of the student marginal density. Closed curves repeat their first point.
struct ContourSet {
  double level = 0.0;
  std::vector<std::vector<Vec2>> polylines;
  std::string warning;
};

// Box around the class means, padded by `margin` scale units on each side.
inline BoundingBox bbox_around_means(const StudentParams& params, double margin) {
  BoundingBox b{params.means[0].x, params.means[0].x, params.means[0].y, params.means[0].y};
  double pad = 0.0;
  for (std::size_t c = 0; c < params.n_classes(); ++c) {
    const Vec2 m = params.means[c];
    b.x_min = std::min(b.x_min, m.x);
    b.x_max = std::max(b.x_max, m.x);
    b.y_min = std::min(b.y_min, m.y);
    b.y_max = std::max(b.y_max, m.y);
    pad = std::max(pad, std::sqrt(params.scales[c].eigenvalues().second));
  }
  pad *= margin;
  return {b.x_min - pad, b.x_max + pad, b.y_min - pad, b.y_max + pad};
}

inline double polyline_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) a += poly[i].x * poly[i + 1].y - poly[i + 1].x * poly[i].y;
  return 0.5 * std::abs(a);
}

// Marching squares on a resolution x resolution lattice of marginal density values.
inline ContourSet trace_contour(const StudentParams& params, double level, const BoundingBox& box,
                                std::size_t resolution) {
  if (!(level > 0.0)) throw ParameterError("contour level must be positive");
  if (resolution < 2) throw ParameterError("contour resolution must be at least 2");
  if (!(box.x_max > box.x_min) || !(box.y_max > box.y_min)) throw ParameterError("contour box is empty");
  for (const Vec2& m : params.means) {
    if (!box.contains(m)) throw ParameterError("contour box must contain every class mean");
  }

  const StudentCache cache(params);
  const std::size_t r = resolution;
  const double dx = (box.x_max - box.x_min) / static_cast<double>(r - 1);
  const double dy = (box.y_max - box.y_min) / static_cast<double>(r - 1);
  auto node = [&](std::size_t i, std::size_t j) {
    return Vec2{box.x_min + dx * static_cast<double>(i), box.y_min + dy * static_cast<double>(j)};
  };

  std::vector<double> field(r * r);
  std::vector<double> scratch(params.n_classes());
  double peak = 0.0;
  for (std::size_t j = 0; j < r; ++j) {
    for (std::size_t i = 0; i < r; ++i) {
      cache.log_joint(node(i, j), scratch);
      field[j * r + i] = std::exp(log_sum_exp(scratch));
      peak = std::max(peak, field[j * r + i]);
    }
  }
  auto value = [&](std::size_t i, std::size_t j) { return field[j * r + i]; };

  ContourSet out;
  out.level = level;
  if (level >= peak) {
    out.warning = "contour level is above the peak density on the grid";
    return out;
  }

  // Edge keys: horizontal edge (i,j)-(i+1,j) or vertical edge (i,j)-(i,j+1).
  auto edge_key = [&](std::size_t i, std::size_t j, bool vertical) {
    return (static_cast<std::uint64_t>(j) * r + i) * 2 + (vertical ? 1 : 0);
  };
  std::unordered_map<std::uint64_t, Vec2> edge_point;
  auto edge_crossing = [&](std::size_t i, std::size_t j, bool vertical) {
    const std::uint64_t key = edge_key(i, j, vertical);
    if (!edge_point.contains(key)) {
      const std::size_t i2 = vertical ? i : i + 1;
      const std::size_t j2 = vertical ? j + 1 : j;
      const double fa = value(i, j);
      const double fb = value(i2, j2);
      const double t = (level - fa) / (fb - fa);
      const Vec2 a = node(i, j);
      const Vec2 b = node(i2, j2);
      edge_point.emplace(key, a + t * (b - a));
    }
    return key;
  };

  // Cell edges: 0 bottom, 1 right, 2 top, 3 left. Corners: 0 (i,j), 1 (i+1,j), 2 (i+1,j+1), 3 (i,j+1).
  using Seg = std::array<int, 2>;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> segments;
  for (std::size_t j = 0; j + 1 < r; ++j) {
    for (std::size_t i = 0; i + 1 < r; ++i) {
      const std::array<double, 4> c = {value(i, j), value(i + 1, j), value(i + 1, j + 1), value(i, j + 1)};
      int code = 0;
      for (int b = 0; b < 4; ++b) code |= (c[b] > level ? 1 : 0) << b;
      if (code == 0 || code == 15) continue;
      const bool centre_above = 0.25 * (c[0] + c[1] + c[2] + c[3]) > level;
      std::vector<Seg> segs;
      switch (code) {
        case 1: case 14: segs = {{3, 0}}; break;
        case 2: case 13: segs = {{0, 1}}; break;
        case 3: case 12: segs = {{3, 1}}; break;
        case 4: case 11: segs = {{1, 2}}; break;
        case 6: case 9: segs = {{0, 2}}; break;
        case 7: case 8: segs = {{3, 2}}; break;
        case 5:
          segs = centre_above ? std::vector<Seg>{{0, 1}, {2, 3}} : std::vector<Seg>{{3, 0}, {1, 2}};
          break;
        case 10:
          segs = centre_above ? std::vector<Seg>{{3, 0}, {1, 2}} : std::vector<Seg>{{0, 1}, {2, 3}};
          break;
        default: break;
      }
      auto key_of = [&](int e) {
        switch (e) {
          case 0: return edge_crossing(i, j, false);
          case 1: return edge_crossing(i + 1, j, true);
          case 2: return edge_crossing(i, j + 1, false);
          default: return edge_crossing(i, j, true);
        }
      };
      for (const Seg& s : segs) segments.emplace_back(key_of(s[0]), key_of(s[1]));
    }
  }

  // Chain segments that share an edge crossing.
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> by_key;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    by_key[segments[s].first].push_back(s);
    by_key[segments[s].second].push_back(s);
  }
  std::vector<bool> used(segments.size(), false);
  auto next_segment = [&](std::uint64_t key) -> std::ptrdiff_t {
    for (std::size_t s : by_key[key]) {
      if (!used[s]) return static_cast<std::ptrdiff_t>(s);
    }
    return -1;
  };
  for (std::size_t start = 0; start < segments.size(); ++start) {
    if (used[start]) continue;
    used[start] = true;
    std::deque<std::uint64_t> chain = {segments[start].first, segments[start].second};
    for (std::ptrdiff_t s = next_segment(chain.back()); s >= 0; s = next_segment(chain.back())) {
      used[static_cast<std::size_t>(s)] = true;
      const auto& seg = segments[static_cast<std::size_t>(s)];
      chain.push_back(seg.first == chain.back() ? seg.second : seg.first);
    }
    if (chain.front() != chain.back()) {
      for (std::ptrdiff_t s = next_segment(chain.front()); s >= 0; s = next_segment(chain.front())) {
        used[static_cast<std::size_t>(s)] = true;
        const auto& seg = segments[static_cast<std::size_t>(s)];
        chain.push_front(seg.first == chain.front() ? seg.second : seg.first);
      }
    }
    std::vector<Vec2> poly;
    poly.reserve(chain.size());
    for (std::uint64_t key : chain) poly.push_back(edge_point.at(key));
    out.polylines.push_back(std::move(poly));
  }
  return out;
}

}  // namespace predmap
