#pragma once

#include "onh/frame.hpp"
#include "onh/surfaces.hpp"

#include <array>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace onh {

using OctantArray = std::array<double, 8>;  // order T, ST, S, SN, N, IN, I, IT; NaN = absent

struct OctantValues {
  OctantArray values;
  std::array<int, 8> samples{};
  double average() const;  // mean of present octants, NaN if none
};

struct Diagnostic {
  std::string parameter;
  std::string code;
  std::string message;
  bool operator==(const Diagnostic&) const = default;
};

/// The ten structural parameters. Missing values are NaN, with the reason in
/// `diagnostics`.
struct OnhParameters {
  OctantArray rnflt_um, mrw_um, gcct_um, cht_um;
  double pld_um = kNaN;
  double mpt_um = kNaN;
  double lcd_um = kNaN;
  double lc_gsi = kNaN;
  double ppsa_deg = kNaN;
  double bmoa_mm2 = kNaN;
  double rnflt_avg_um = kNaN, mrw_avg_um = kNaN, gcct_avg_um = kNaN, cht_avg_um = kNaN;
  std::vector<Diagnostic> diagnostics;

  OnhParameters();

  /// Flattened (name, value) pairs in the fixed CSV column order.
  std::vector<std::pair<std::string, double>> fields() const;
  static std::vector<std::string> field_names();
};

/// Lazily extracted boundary surfaces of one volume, with local thickness where the
/// parameter needs it.
class SurfaceCache {
 public:
  explicit SurfaceCache(const LabelVolume& volume) : volume_(volume) {}
  const LabelVolume& volume() const { return volume_; }

  const TissueSurface& surface(TissueLabel tissue);
  const TissueSurface& thick_surface(TissueLabel tissue);
  /// RNFL_PLT and GCL_IPL extracted as one layer.
  const TissueSurface& gcc_surface();

 private:
  const LabelVolume& volume_;
  std::map<int, std::unique_ptr<TissueSurface>> plain_, thick_;
  std::unique_ptr<TissueSurface> gcc_;
};

inline constexpr int kRingSamples = 360;
inline constexpr double kRingFactor = 1.5;

/// Ring of sample points at 1.5 BMOR in the BMO plane, 1 degree apart, in normalized
/// coordinates. Sample k sits at octant angle k degrees.
std::vector<Vec3> ring_points(const OnhFrame& frame);

OctantValues rnflt_octants(SurfaceCache& cache, const OnhFrame& frame);
OctantValues mrw_octants(SurfaceCache& cache, const OnhFrame& frame);
OctantValues gcct_octants(SurfaceCache& cache, const OnhFrame& frame);
OctantValues cht_octants(SurfaceCache& cache, const OnhFrame& frame);
double prelaminar_depth(SurfaceCache& cache, const OnhFrame& frame);
double min_prelaminar_thickness(SurfaceCache& cache, const OnhFrame& frame);
double lc_depth(SurfaceCache& cache, const OnhFrame& frame);
double lc_gsi(SurfaceCache& cache, const OnhFrame& frame);
double ppsa(SurfaceCache& cache, const OnhFrame& frame);
inline double bmo_area(const OnhFrame& frame) { return frame.bmo_area; }

/// Octant means of a per-column thickness sampled on the ring. Exposed for tests.
OctantValues sample_ring(const TissueSurface& surface, const LabelVolume& volume, const OnhFrame& frame);

/// Depth (normalized z, positive posterior) where a surface crosses the BMO axis,
/// from a local quadratic fit to points within `radius_um` of the axis.
double axis_depth(std::span<const Vec3> normalized_points, double radius_um);

struct Curvatures {
  double k1 = 0, k2 = 0;  // k1 >= k2, 1/um; a cup deepest at the axis has both negative
};
/// Principal curvatures at the axis (x = y = 0) of the least-squares quadric
/// z = c20 x^2 + c11 xy + c02 y^2 + c10 x + c01 y + c00 through the points.
Curvatures axis_curvatures(std::span<const Vec3> normalized_points);
double shape_index(const Curvatures& k);

OnhParameters extract_all(const LabelVolume& volume);
OnhParameters extract_all(const LabelVolume& volume, const OnhFrame& frame);

void write_parameters_csv_header(std::ostream& out);
void write_parameters_csv_row(std::ostream& out, const std::string& id, const std::string& group,
                              const OnhParameters& p);

}  // namespace onh
