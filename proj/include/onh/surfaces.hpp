#pragma once

#include "onh/common.hpp"
#include "onh/volume_io.hpp"

#include <array>
#include <iosfwd>
#include <span>
#include <vector>

namespace onh {

struct SurfaceColumn {
  std::uint32_t ix = 0, iy = 0;
  Vec3 anterior = Vec3::Zero();   // um, volume frame
  Vec3 posterior = Vec3::Zero();  // last voxel of the run containing `anterior`
  int run_length = 0;             // voxels in that run
  double thickness = kNaN;        // filled by local_thickness
};

/// Anterior/posterior boundary of one tissue, one entry per (ix, iy) column that
/// contains it. Columns are stored in (iy, ix) order.
class TissueSurface {
 public:
  TissueSurface() = default;
  TissueSurface(TissueLabel tissue, Dims dims) : tissue_(tissue), dims_(dims), index_(dims.column_count(), -1) {}

  TissueLabel tissue() const { return tissue_; }
  const Dims& dims() const { return dims_; }
  std::span<const SurfaceColumn> columns() const { return columns_; }
  std::span<SurfaceColumn> columns() { return columns_; }
  std::size_t size() const { return columns_.size(); }
  bool empty() const { return columns_.empty(); }

  const SurfaceColumn* find(std::int64_t ix, std::int64_t iy) const {
    if (ix < 0 || iy < 0 || ix >= dims_.nx || iy >= dims_.ny) return nullptr;
    const auto k = index_[std::size_t(ix) + std::size_t(dims_.nx) * std::size_t(iy)];
    return k < 0 ? nullptr : &columns_[std::size_t(k)];
  }

  void push(const SurfaceColumn& c) {
    index_[c.ix + std::size_t(dims_.nx) * c.iy] = static_cast<std::int32_t>(columns_.size());
    columns_.push_back(c);
  }

  bool has_thickness() const { return thickness_filled_; }
  void mark_thickness_filled() { thickness_filled_ = true; }

  /// Columns where the tissue appears in more than one disjoint run.
  std::size_t multi_run_columns = 0;

 private:
  TissueLabel tissue_ = TissueLabel::Background;
  Dims dims_;
  std::vector<SurfaceColumn> columns_;
  std::vector<std::int32_t> index_;
  bool thickness_filled_ = false;
};

/// Columnwise boundary extraction along increasing z (anterior to posterior).
TissueSurface extract_boundaries(const LabelVolume& volume, TissueLabel tissue);

/// Same, treating a set of adjacent tissues as a single layer (e.g. RNFL + GCL/IPL).
/// The result is tagged with the first tissue of the set.
TissueSurface extract_boundaries(const LabelVolume& volume, std::span<const TissueLabel> tissues);

struct ThicknessOptions {
  double lateral_window_um = 300.0;  // search radius limit in the en-face plane
  bool exact = false;                // brute force over every posterior point
};

/// Fills `thickness` for every column: the minimum Euclidean distance from its
/// anterior point to the set of all posterior faces of the surface. A posterior face
/// sits one axial voxel behind the posterior point, so a straight run of n voxels
/// measures n * dz.
void local_thickness(TissueSurface& surface, const Spacing& spacing, const ThicknessOptions& options = {});

enum class Octant : std::uint8_t { T = 0, ST, S, SN, N, IN, I, IT };

inline constexpr std::array<const char*, 8> kOctantNames = {"T", "ST", "S", "SN", "N", "IN", "I", "IT"};

/// Sector of a normalized point (x nasal, y superior), right-eye convention:
/// T centered at 0 degrees, S at 90, counterclockwise; lower edge inclusive.
Octant octant_of(const Vec3& normalized_point);

/// Angle in degrees in [0, 360) measured from the temporal axis toward superior.
double octant_angle_deg(double nasal, double superior);

void write_surface_csv(std::ostream& out, const TissueSurface& surface);

}  // namespace onh
