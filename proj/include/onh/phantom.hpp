#pragma once

#include "onh/frame.hpp"
#include "onh/parameters.hpp"
#include "onh/volume_io.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace onh {

/// Synthetic ONH description. Geometry is given in normalized coordinates
/// (nasal, superior, depth positive posterior) about the BMO center.
struct PhantomConfig {
  Dims dims{384, 97, 496};
  Spacing spacing{11.5, 35.0, 3.87};
  Laterality laterality = Laterality::Right;

  double bmo_depth_um = 760;  // scan depth of the BMO center
  double center_offset_x_um = 0, center_offset_y_um = 0;
  double bmo_a_um = 900, bmo_b_um = 800;
  double bmo_angle_deg = 0;  // major axis direction, from nasal toward superior
  double tilt_deg = 0;       // inclination of the BMO plane against the scan plane
  double tilt_azimuth_deg = 0;

  OctantArray rnfl_um{80, 140, 130, 105, 80, 110, 140, 150};  // at octant centers
  double rnfl_radial_slope = 0;  // um of RNFL change per mm away from the ring
  double gcl_ipl_um = 45;
  double orl_um = 120;
  double rpe_bm_um = 25;
  double choroid_um = 170;  // along the scan axis at the ring
  double sclera_um = 250;

  double pld_um = 150;
  double cup_radius = 0.7;  // cup rim in units of the BMO ellipse

  bool include_lc = true;
  double lcd_um = 420;
  double lc_thickness_um = 150;
  double lc_gsi = -0.4;
  double lc_curvature_per_mm = 0.4;  // largest |principal curvature|

  double ppsa_deg = 6;

  double jitter_voxels = 0;  // per-column boundary noise, standard deviation
  std::uint64_t seed = 0;
};

struct Phantom {
  LabelVolume volume;
  OnhParameters truth;
};

inline constexpr int kPhantomBmoPoints = 48;

/// BMO points on the configured ellipse, in normalized coordinates (depth 0).
std::vector<Vec3> generate_bmo_points_normalized(const PhantomConfig& cfg);

/// Throws Error("phantom", "INCONSISTENT_LAYERS", ...) when layers would invert.
void validate_config(const PhantomConfig& cfg);

OnhFrame phantom_frame(const PhantomConfig& cfg);

/// Principal curvatures (1/um) of the anterior LC surface at the axis.
Curvatures lc_curvatures(const PhantomConfig& cfg);

OnhParameters ground_truth(const PhantomConfig& cfg);
Phantom generate(const PhantomConfig& cfg);

nlohmann::json to_json(const PhantomConfig& cfg);
PhantomConfig config_from_json(const nlohmann::json& j, PhantomConfig base = {});

struct Normal {
  double mean = 0, sd = 0;
};

/// Per-group sampling distributions. Unset distributions (sd = 0, mean = NaN) keep the
/// base value.
struct GroupSpec {
  SeverityGroup group = SeverityGroup::Normal;
  PhantomConfig base;
  std::array<Normal, 8> rnfl_um{};
  Normal gcl_ipl_um{kNaN, 0};
  Normal choroid_um{kNaN, 0};
  Normal pld_um{kNaN, 0};
  Normal lcd_um{kNaN, 0};
  Normal lc_gsi{kNaN, 0};
  Normal ppsa_deg{kNaN, 0};
  Normal bmoa_mm2{kNaN, 0};
  Normal tilt_deg{kNaN, 0};
  Normal md_db{kNaN, 0};
  Normal age{kNaN, 0};          // years, left unset when NaN
  double female_fraction = -1;  // negative: sex not recorded
};

/// Distributions seeded from the reported group means and standard deviations.
GroupSpec reference_group(SeverityGroup group);

/// Two groups differing only in LC depth (410 vs 510 um) and superior RNFL
/// (160 vs 120 um), with modest within-group spread.
std::vector<GroupSpec> lc_rnfl_experiment();

struct CohortEye {
  std::string id;
  SeverityGroup group = SeverityGroup::Normal;
  PhantomConfig config;
  SubjectMeta meta;
};

std::vector<CohortEye> cohort(const std::vector<GroupSpec>& specs, std::size_t n_per_group, std::uint64_t seed);

/// Writes <id>.onhv for every eye plus manifest.json (eye id -> group, config).
void write_cohort(const std::filesystem::path& dir, const std::vector<CohortEye>& eyes, unsigned threads = 1);

LabelVolume generate_eye(const CohortEye& eye);

}  // namespace onh
