#include "onh/criticals.hpp"

#include "onh/csv.hpp"
#include "onh/parallel.hpp"
#include "onh/surfaces.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <unordered_map>

namespace onh {

namespace {

[[noreturn]] void fail(const std::string& code, const std::string& msg) { throw Error("criticals", code, msg); }

std::uint64_t cell_key(std::int64_t i, std::int64_t j) {
  return (std::uint64_t(std::uint32_t(std::int32_t(i))) << 32) | std::uint32_t(std::int32_t(j));
}

}  // namespace

CriticalPointSet critical_points(const std::vector<tensor::Index>& argmax, const PointCloud& cloud) {
  if (cloud.points.empty()) fail("EMPTY_CLOUD", "no points to extract critical points from");
  std::map<std::size_t, std::vector<int>> won;
  for (std::size_t d = 0; d < argmax.size(); ++d) {
    const auto r = std::size_t(argmax[d]);
    if (r >= cloud.size()) fail("EMPTY_CLOUD", "argmax row outside the cloud");
    won[r].push_back(int(d));
  }
  CriticalPointSet set;
  set.eye_id = cloud.eye_id;
  set.label = cloud.label;
  for (auto& [r, dims] : won) {
    const CloudPoint& p = cloud.points[r];
    set.entries.push_back({r, std::move(dims), p.tissue, p.x, p.y, p.z});
  }
  return set;
}

CriticalPointSet extract_critical_points(const PointNetModel& model, const PointCloud& cloud) {
  if (cloud.points.empty()) fail("EMPTY_CLOUD", "no points to extract critical points from");
  return critical_points(model.infer(features(cloud)).argmax, cloud);
}

PointCloud critical_subset(const PointCloud& cloud, const CriticalPointSet& set) {
  PointCloud out;
  out.eye_id = cloud.eye_id;
  out.label = cloud.label;
  for (const CriticalEntry& e : set.entries) out.points.push_back(cloud.points.at(e.index));
  return out;
}

const std::vector<GridVertex>& AverageGeometry::surface(TissueLabel t) const {
  auto it = surfaces.find(t);
  if (it == surfaces.end() || it->second.empty())
    fail("TISSUE_NOT_IN_GEOMETRY", std::string("no average surface for ") + std::string(tissue_name(t)));
  return it->second;
}

EyeSurfaces eye_surfaces(const LabelVolume& volume) {
  const OnhFrame frame = build_frame(volume);
  EyeSurfaces out;
  for (TissueLabel t : kAllTissues) {
    const TissueSurface s = extract_boundaries(volume, t);
    auto& pts = out[t];
    pts.reserve(s.size());
    for (const SurfaceColumn& c : s.columns()) pts.push_back(to_normalized(c.anterior, frame));
  }
  return out;
}

CellMeans cell_means(const EyeSurfaces& eye, double pitch_um) {
  if (!(pitch_um > 0)) fail("BAD_PITCH", "grid pitch must be positive");
  CellMeans out;
  for (const auto& [t, pts] : eye) {
    std::map<std::pair<int, int>, std::pair<double, int>> cells;
    for (const Vec3& p : pts) {
      const int i = int(std::llround(p.x() / pitch_um));
      const int j = int(std::llround(p.y() / pitch_um));
      auto& c = cells[{j, i}];
      c.first += p.z();
      ++c.second;
    }
    if (cells.empty()) continue;
    auto& m = out[t];
    for (const auto& [key, c] : cells) m[key] = c.first / c.second;
  }
  return out;
}

AverageGeometry average_geometry(const std::vector<CellMeans>& eyes, double pitch_um) {
  if (!(pitch_um > 0)) fail("BAD_PITCH", "grid pitch must be positive");
  AverageGeometry geo;
  geo.pitch_um = pitch_um;
  for (TissueLabel t : kAllTissues) {
    std::map<std::pair<int, int>, std::pair<double, int>> acc;  // (j, i) -> sum of eye means, eyes
    for (const CellMeans& eye : eyes) {
      auto it = eye.find(t);
      if (it == eye.end()) continue;
      for (const auto& [key, z] : it->second) {
        auto& a = acc[key];
        a.first += z;
        ++a.second;
      }
    }
    if (acc.empty()) continue;
    auto& verts = geo.surfaces[t];
    for (const auto& [key, a] : acc) verts.push_back({key.second, key.first, a.first / a.second, a.second});
  }
  if (geo.surfaces.empty()) fail("NO_COVERAGE", "no eye contributes any boundary point");
  return geo;
}

AverageGeometry average_geometry(const std::vector<EyeSurfaces>& eyes, double pitch_um) {
  std::vector<CellMeans> means;
  for (const EyeSurfaces& e : eyes) means.push_back(cell_means(e, pitch_um));
  return average_geometry(means, pitch_um);
}

AverageGeometry average_geometry(const std::vector<const LabelVolume*>& volumes, double pitch_um, unsigned threads) {
  if (volumes.empty()) fail("NO_COVERAGE", "average geometry needs at least one volume");
  std::vector<CellMeans> eyes(volumes.size());
  parallel_for(volumes.size(), threads,
               [&](std::size_t i) { eyes[i] = cell_means(eye_surfaces(*volumes[i]), pitch_um); });
  return average_geometry(eyes, pitch_um);
}

namespace {

struct VertexIndex {
  const std::vector<GridVertex>* surface = nullptr;
  double pitch = 0;
  std::unordered_map<std::uint64_t, std::size_t> cells;
  int i0 = 0, i1 = 0, j0 = 0, j1 = 0;

  VertexIndex(const std::vector<GridVertex>& s, double p) : surface(&s), pitch(p) {
    if (s.empty()) fail("TISSUE_NOT_IN_GEOMETRY", "empty surface");
    i0 = i1 = s.front().i;
    j0 = j1 = s.front().j;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const GridVertex& v = s[k];
      cells.emplace(cell_key(v.i, v.j), k);
      i0 = std::min(i0, v.i), i1 = std::max(i1, v.i), j0 = std::min(j0, v.j), j1 = std::max(j1, v.j);
    }
  }

  const GridVertex& nearest(const Vec3& p) const {
    const auto ci = std::llround(p.x() / pitch), cj = std::llround(p.y() / pitch);
    const std::int64_t max_ring =
        std::max({std::abs(ci - i0), std::abs(ci - i1), std::abs(cj - j0), std::abs(cj - j1)});
    const GridVertex* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    auto consider = [&](std::int64_t i, std::int64_t j) {
      auto it = cells.find(cell_key(i, j));
      if (it == cells.end()) return;
      const GridVertex& v = (*surface)[it->second];
      const double dx = v.i * pitch - p.x(), dy = v.j * pitch - p.y(), dz = v.z - p.z();
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best_d || (d == best_d && std::pair(v.j, v.i) < std::pair(best->j, best->i))) {
        best_d = d;
        best = &v;
      }
    };
    for (std::int64_t r = 0; r <= max_ring; ++r) {
      // every vertex on ring r is at least (r - 0.5) pitches away laterally
      if (best && r > 0) {
        const double lateral = (double(r) - 0.5) * pitch;
        if (lateral * lateral > best_d) break;
      }
      for (std::int64_t j = cj - r; j <= cj + r; ++j) {
        if (j == cj - r || j == cj + r)
          for (std::int64_t i = ci - r; i <= ci + r; ++i) consider(i, j);
        else {
          consider(ci - r, j);
          consider(ci + r, j);
        }
      }
    }
    return *best;
  }
};

}  // namespace

const GridVertex& nearest_vertex(const std::vector<GridVertex>& surface, double pitch, const Vec3& p) {
  return VertexIndex(surface, pitch).nearest(p);
}

std::vector<DensityPoint> project_criticals(const std::vector<CriticalPointSet>& sets, const AverageGeometry& geo) {
  std::vector<DensityPoint> out;
  std::map<TissueLabel, VertexIndex> indices;
  for (const CriticalPointSet& s : sets)
    for (const CriticalEntry& e : s.entries) {
      auto it = indices.find(e.tissue);
      if (it == indices.end()) it = indices.emplace(e.tissue, VertexIndex(geo.surface(e.tissue), geo.pitch_um)).first;
      const GridVertex& v = it->second.nearest(Vec3(e.x, e.y, e.z));
      out.push_back({v.i * geo.pitch_um, v.j * geo.pitch_um, v.z, e.tissue, 0});
    }
  return out;
}

void compute_density(std::vector<DensityPoint>& points, double radius, unsigned threads) {
  if (!(radius > 0)) fail("BAD_RADIUS", "density radius must be positive");
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid;
  auto cell = [&](double v) { return std::int64_t(std::floor(v / radius)); };
  for (std::size_t k = 0; k < points.size(); ++k) grid[cell_key(cell(points[k].x), cell(points[k].y))].push_back(k);
  const double r2 = radius * radius;
  parallel_for(points.size(), threads, [&](std::size_t k) {
    const DensityPoint& p = points[k];
    const auto gx = cell(p.x), gy = cell(p.y);
    int n = 0;
    for (std::int64_t a = gx - 1; a <= gx + 1; ++a)
      for (std::int64_t b = gy - 1; b <= gy + 1; ++b) {
        auto it = grid.find(cell_key(a, b));
        if (it == grid.end()) continue;
        for (std::size_t q : it->second) {
          if (q == k) continue;
          const double dx = points[q].x - p.x, dy = points[q].y - p.y, dz = points[q].z - p.z;
          if (dx * dx + dy * dy + dz * dz <= r2) ++n;
        }
      }
    points[k].density = n;
  });
}

TissueBreakdown tissue_breakdown(const std::vector<CriticalPointSet>& sets, const TissueGrouping& grouping) {
  TissueBreakdown b;
  for (TissueLabel t : kAllTissues) b.counts[t] = 0;
  for (const CriticalPointSet& s : sets)
    for (const CriticalEntry& e : s.entries) {
      ++b.counts[e.tissue];
      ++b.total;
    }
  if (b.total == 0) fail("EMPTY_SETS", "no critical points to break down");
  for (const auto& [t, n] : b.counts) b.fractions[t] = double(n) / double(b.total);
  for (TissueLabel t : grouping.neural) b.neural += double(b.counts[t]);
  for (TissueLabel t : grouping.connective) b.connective += double(b.counts[t]);
  b.neural /= double(b.total);
  b.connective /= double(b.total);
  return b;
}

nlohmann::json to_json(const TissueBreakdown& b, const TissueGrouping& grouping) {
  nlohmann::json j;
  j["total"] = b.total;
  for (const auto& [t, n] : b.counts) {
    const std::string name(tissue_name(t));
    j["counts"][name] = n;
    j["fractions"][name] = b.fractions.at(t);
  }
  j["neural"] = b.neural;
  j["connective"] = b.connective;
  for (TissueLabel t : grouping.neural) j["grouping"]["neural"].push_back(std::string(tissue_name(t)));
  for (TissueLabel t : grouping.connective) j["grouping"]["connective"].push_back(std::string(tissue_name(t)));
  return j;
}

void write_density_csv(std::ostream& out, const std::vector<DensityPoint>& points) {
  out << "x_um,y_um,z_um,tissue,density\n";
  for (const DensityPoint& p : points)
    out << csv::number(p.x) << ',' << csv::number(p.y) << ',' << csv::number(p.z) << ',' << tissue_name(p.tissue) << ','
        << p.density << '\n';
}

}  // namespace onh
