#pragma once

#include "onh/frame.hpp"
#include "onh/volume_io.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace onh {

struct CloudPoint {
  double x = 0, y = 0, z = 0;  // um, normalized frame
  double thickness = kNaN;     // NaN = not applicable (sclera, LC)
  TissueLabel tissue = TissueLabel::Background;
  bool operator==(const CloudPoint& o) const;
};

struct PointCloud {
  std::string eye_id;
  SeverityGroup label = SeverityGroup::Normal;
  std::vector<CloudPoint> points;
  std::size_t size() const { return points.size(); }
  bool operator==(const PointCloud&) const = default;
};

struct CloudOptions {
  /// Columns are kept on a lattice of roughly this pitch, anchored at the column
  /// under the BMO center. Thickness is computed at full resolution first.
  double lateral_pitch_um = 60.0;
};

PointCloud build_cloud(const LabelVolume& volume, const OnhFrame& frame, const CloudOptions& options = {});
PointCloud build_cloud(const LabelVolume& volume, const CloudOptions& options = {});

/// Uniform sample without replacement, original order preserved.
PointCloud sample(const PointCloud& cloud, std::size_t n, std::uint64_t seed);

struct AugmentConfig {
  double crop_fraction_min = 0.85, crop_fraction_max = 1.0;
  double rotation_deg_min = -15, rotation_deg_max = 15;
  double translation_um = 50;  // each in-plane component uniform in [-t, t]
  std::size_t sample_n = 1024;
  double noise_sigma_um = 5;
  bool oversample = true;
  void validate() const;
};

/// Crop, rotate about the axial axis, translate, add noise, then sample. Appends a
/// diagnostic code when the crop is skipped.
PointCloud augment(const PointCloud& cloud, const AugmentConfig& cfg, std::uint64_t seed,
                   std::vector<std::string>* diagnostics = nullptr);

/// Network input: one row per point (x, y, z, thickness) in millimeters, 0 for N/A.
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;
inline constexpr double kFeatureScale = 1e-3;
FeatureMatrix features(const PointCloud& cloud);

void write_cloud(std::ostream& out, const PointCloud& cloud);
PointCloud read_cloud(std::istream& in);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud load_cloud(const std::filesystem::path& path);

/// Deterministic per-eye stream seed from a global seed and an eye id.
std::uint64_t eye_seed(std::uint64_t seed, const std::string& eye_id);

}  // namespace onh
