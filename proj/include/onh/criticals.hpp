#pragma once

#include "onh/cloud.hpp"
#include "onh/pointnet.hpp"

#include <json.hpp>

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace onh {

struct CriticalEntry {
  std::size_t index = 0;  // row in the cloud that was fed to the model
  std::vector<int> dims;  // global-feature dimensions won, ascending
  TissueLabel tissue = TissueLabel::Background;
  double x = 0, y = 0, z = 0;
};

struct CriticalPointSet {
  std::string eye_id;
  SeverityGroup label = SeverityGroup::Normal;
  std::vector<CriticalEntry> entries;  // ascending index
};

/// Groups a pooling argmax (one winning row per dimension) into unique points.
CriticalPointSet critical_points(const std::vector<tensor::Index>& argmax, const PointCloud& cloud);
CriticalPointSet extract_critical_points(const PointNetModel& model, const PointCloud& cloud);

/// The cloud restricted to its critical points, original order kept.
PointCloud critical_subset(const PointCloud& cloud, const CriticalPointSet& set);

struct GridVertex {
  int i = 0, j = 0;  // x = i * pitch, y = j * pitch
  double z = 0;      // mean anterior depth over covering eyes
  int count = 0;     // eyes covering the cell
};

struct AverageGeometry {
  double pitch_um = 50;
  std::map<TissueLabel, std::vector<GridVertex>> surfaces;  // vertices sorted by (j, i)
  const std::vector<GridVertex>& surface(TissueLabel t) const;
};

/// Normalized anterior boundary points of one eye, per tissue.
using EyeSurfaces = std::map<TissueLabel, std::vector<Vec3>>;
EyeSurfaces eye_surfaces(const LabelVolume& volume);

/// Mean anterior z of one eye per grid cell, keyed by (j, i).
using CellMeans = std::map<TissueLabel, std::map<std::pair<int, int>, double>>;
CellMeans cell_means(const EyeSurfaces& eye, double pitch_um = 50);

/// Each eye contributes its own mean z per cell; cells are averaged over the eyes
/// that cover them.
AverageGeometry average_geometry(const std::vector<CellMeans>& eyes, double pitch_um = 50);
AverageGeometry average_geometry(const std::vector<EyeSurfaces>& eyes, double pitch_um = 50);
AverageGeometry average_geometry(const std::vector<const LabelVolume*>& volumes, double pitch_um = 50,
                                 unsigned threads = 1);

struct DensityPoint {
  double x = 0, y = 0, z = 0;
  TissueLabel tissue = TissueLabel::Background;
  int density = 0;
};

/// Nearest grid vertex (3D) of the point's own tissue surface; ties go to the
/// smaller (j, i).
std::vector<DensityPoint> project_criticals(const std::vector<CriticalPointSet>& sets, const AverageGeometry& geo);
const GridVertex& nearest_vertex(const std::vector<GridVertex>& surface, double pitch_um, const Vec3& p);

/// Fills density with the number of other points within `radius_um`.
void compute_density(std::vector<DensityPoint>& points, double radius_um = 75, unsigned threads = 1);

struct TissueGrouping {
  std::vector<TissueLabel> neural{TissueLabel::RnflPlt, TissueLabel::GclIpl, TissueLabel::Orl, TissueLabel::RpeBm};
  std::vector<TissueLabel> connective{TissueLabel::Choroid, TissueLabel::Sclera, TissueLabel::Lc};
};

struct TissueBreakdown {
  std::size_t total = 0;
  std::map<TissueLabel, std::size_t> counts;
  std::map<TissueLabel, double> fractions;
  double neural = 0, connective = 0;
};

TissueBreakdown tissue_breakdown(const std::vector<CriticalPointSet>& sets, const TissueGrouping& grouping = {});

nlohmann::json to_json(const TissueBreakdown& b, const TissueGrouping& grouping = {});
void write_density_csv(std::ostream& out, const std::vector<DensityPoint>& points);

}  // namespace onh
