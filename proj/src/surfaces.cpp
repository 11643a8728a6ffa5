#include "onh/surfaces.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <ostream>

namespace onh {
namespace {

struct RunState {
  std::int32_t first = -1;
  std::int32_t last = -1;
  bool closed = false;
  bool multi = false;
};

TissueSurface extract_masked(const LabelVolume& volume, std::uint8_t mask, TissueLabel tag) {
  const Dims& d = volume.dims;
  std::vector<RunState> state(d.column_count());
  const std::uint8_t* vox = volume.voxels.data();
  const std::size_t slice = d.column_count();
  for (std::uint32_t iz = 0; iz < d.nz; ++iz) {
    const std::uint8_t* plane = vox + slice * iz;
    for (std::size_t c = 0; c < slice; ++c) {
      if (!((mask >> plane[c]) & 1u)) continue;
      RunState& s = state[c];
      const auto z = static_cast<std::int32_t>(iz);
      if (s.first < 0) {
        s.first = s.last = z;
      } else if (!s.closed && s.last == z - 1) {
        s.last = z;
      } else {
        s.closed = true;
        s.multi = true;
      }
    }
  }

  TissueSurface surface(tag, d);
  for (std::uint32_t iy = 0; iy < d.ny; ++iy) {
    for (std::uint32_t ix = 0; ix < d.nx; ++ix) {
      const RunState& s = state[ix + std::size_t(d.nx) * iy];
      if (s.first < 0) continue;
      SurfaceColumn col;
      col.ix = ix;
      col.iy = iy;
      col.anterior = volume.voxel_center(ix, iy, std::uint32_t(s.first));
      col.posterior = volume.voxel_center(ix, iy, std::uint32_t(s.last));
      col.run_length = s.last - s.first + 1;
      surface.push(col);
      if (s.multi) ++surface.multi_run_columns;
    }
  }
  return surface;
}

void append_number(std::ostream& out, double v) {
  if (std::isnan(v)) return;
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.write(buf, end - buf);
}

}  // namespace

TissueSurface extract_boundaries(const LabelVolume& volume, TissueLabel tissue) {
  return extract_masked(volume, std::uint8_t(1u << static_cast<unsigned>(tissue)), tissue);
}

TissueSurface extract_boundaries(const LabelVolume& volume, std::span<const TissueLabel> tissues) {
  std::uint8_t mask = 0;
  for (TissueLabel t : tissues) mask |= std::uint8_t(1u << static_cast<unsigned>(t));
  return extract_masked(volume, mask, tissues.empty() ? TissueLabel::Background : tissues.front());
}

void local_thickness(TissueSurface& surface, const Spacing& spacing, const ThicknessOptions& options) {
  auto cols = surface.columns();
  const Vec3 face(0.0, 0.0, spacing.dz);
  if (options.exact) {
    for (SurfaceColumn& c : cols) {
      double best = std::numeric_limits<double>::infinity();
      for (const SurfaceColumn& p : std::as_const(surface).columns())
        best = std::min(best, (c.anterior - p.posterior - face).squaredNorm());
      c.thickness = std::sqrt(best);
    }
    surface.mark_thickness_filled();
    return;
  }

  // Expanding Chebyshev rings of columns; a ring can be skipped once its minimum
  // lateral offset exceeds the best distance found so far.
  const double pitch = std::min(spacing.dx, spacing.dy);
  const auto max_rx = static_cast<std::int64_t>(std::floor(options.lateral_window_um / spacing.dx));
  const auto max_ry = static_cast<std::int64_t>(std::floor(options.lateral_window_um / spacing.dy));
  const std::int64_t max_ring = std::max(max_rx, max_ry);
  const double window2 = options.lateral_window_um * options.lateral_window_um;

  for (SurfaceColumn& c : cols) {
    double best2 = std::numeric_limits<double>::infinity();
    const auto cx = std::int64_t(c.ix), cy = std::int64_t(c.iy);
    auto visit = [&](std::int64_t ix, std::int64_t iy) {
      const SurfaceColumn* p = surface.find(ix, iy);
      if (!p) return;
      const double lx = (ix - cx) * spacing.dx, ly = (iy - cy) * spacing.dy;
      if (lx * lx + ly * ly > window2) return;
      best2 = std::min(best2, (c.anterior - p->posterior - face).squaredNorm());
    };
    for (std::int64_t r = 0; r <= max_ring; ++r) {
      const double ring_min = r * pitch;
      if (ring_min * ring_min > best2) break;
      if (r == 0) {
        visit(cx, cy);
        continue;
      }
      for (std::int64_t dx = -r; dx <= r; ++dx) {
        if (std::abs(dx) > max_rx) continue;
        if (r <= max_ry) {
          visit(cx + dx, cy - r);
          visit(cx + dx, cy + r);
        }
      }
      for (std::int64_t dy = -r + 1; dy <= r - 1; ++dy) {
        if (std::abs(dy) > max_ry || r > max_rx) continue;
        visit(cx - r, cy + dy);
        visit(cx + r, cy + dy);
      }
    }
    c.thickness = std::sqrt(best2);
  }
  surface.mark_thickness_filled();
}

double octant_angle_deg(double nasal, double superior) {
  double deg = std::atan2(superior, -nasal) * (180.0 / std::numbers::pi);
  if (deg < 0) deg += 360.0;
  if (deg >= 360.0) deg -= 360.0;
  return deg;
}

Octant octant_of(const Vec3& p) {
  if (p.x() == 0.0 && p.y() == 0.0) throw Error("surfaces", "ORIGIN_POINT", "point lies on the BMO axis");
  double shifted = octant_angle_deg(p.x(), p.y()) + 22.5;
  if (shifted >= 360.0) shifted -= 360.0;
  const int sector = std::min(7, static_cast<int>(std::floor(shifted / 45.0)));
  return static_cast<Octant>(sector);
}

void write_surface_csv(std::ostream& out, const TissueSurface& surface) {
  out << "ix,iy,x_um,y_um,z_um,thickness_um\n";
  for (const SurfaceColumn& c : surface.columns()) {
    out << c.ix << ',' << c.iy << ',';
    append_number(out, c.anterior.x());
    out << ',';
    append_number(out, c.anterior.y());
    out << ',';
    append_number(out, c.anterior.z());
    out << ',';
    append_number(out, c.thickness);
    out << '\n';
  }
}

}  // namespace onh
