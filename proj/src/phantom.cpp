#include "onh/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <thread>

namespace onh {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;
constexpr double kFlatFactor = 2.55;  // sclera flattens beyond this many BMOR

[[noreturn]] void inconsistent(const std::string& msg) { throw Error("phantom", "INCONSISTENT_LAYERS", msg); }

double bmo_radius(const PhantomConfig& c) { return std::sqrt(c.bmo_a_um * c.bmo_b_um); }

/// Cosine interpolation between octant centers.
double rnfl_at(const OctantArray& t, double theta_deg) {
  const double s = theta_deg / 45.0;
  const double fl = std::floor(s);
  const int k0 = ((static_cast<int>(fl) % 8) + 8) % 8;
  const int k1 = (k0 + 1) % 8;
  const double w = 0.5 * (1.0 - std::cos(kPi * (s - fl)));
  return (1.0 - w) * t[k0] + w * t[k1];
}

struct Geometry {
  const PhantomConfig& cfg;
  OnhFrame frame;
  double ca, sa;  // ellipse orientation
  double r_ring, r_flat, tan_alpha;
  double k_nasal, k_superior;
  double below_rnfl;  // gcl + orl + rpe

  explicit Geometry(const PhantomConfig& c) : cfg(c), frame(phantom_frame(c)) {
    ca = std::cos(c.bmo_angle_deg * kDeg);
    sa = std::sin(c.bmo_angle_deg * kDeg);
    r_ring = kRingFactor * bmo_radius(c);
    r_flat = kFlatFactor * bmo_radius(c);
    tan_alpha = std::tan(0.5 * c.ppsa_deg * kDeg);
    const Curvatures k = lc_curvatures(c);
    k_nasal = k.k1;
    k_superior = k.k2;
    below_rnfl = c.gcl_ipl_um + c.orl_um + c.rpe_bm_um;
  }

  double rho(double x, double y) const {
    const double u = x * ca + y * sa, v = -x * sa + y * ca;
    return std::hypot(u / cfg.bmo_a_um, v / cfg.bmo_b_um);
  }
  double rnfl(double x, double y) const {
    const double r = std::hypot(x, y);
    const double t = rnfl_at(cfg.rnfl_um, octant_angle_deg(x, y)) + cfg.rnfl_radial_slope * (r - r_ring) / 1000.0;
    return std::max(0.0, t);
  }
  double retina(double x, double y) const { return rnfl(x, y) + below_rnfl; }
  double ilm(double x, double y) const {
    const double t = retina(x, y);
    const double p = rho(x, y);
    if (p >= cfg.cup_radius) return -t;
    const double c = std::cos(0.5 * kPi * p / cfg.cup_radius);
    return -t + (cfg.pld_um + t) * c * c;
  }
  /// Minimum distance from an in-plane point (depth 0) to the ILM surface, by
  /// successively refined grid search on the analytic surface.
  double ilm_distance(double bx, double by) const {
    double cx = bx, cy = by;
    double half = -ilm(bx, by);
    double best = std::numeric_limits<double>::infinity();
    for (int round = 0; round < 6; ++round) {
      const double step = half / 20.0;
      double nx = cx, ny = cy;
      for (int i = -20; i <= 20; ++i)
        for (int j = -20; j <= 20; ++j) {
          const double x = cx + i * step, y = cy + j * step;
          const double z = ilm(x, y);
          const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by) + z * z;
          if (d2 < best) {
            best = d2;
            nx = x;
            ny = y;
          }
        }
      cx = nx;
      cy = ny;
      half = 2.0 * step;
    }
    return std::sqrt(best);
  }
  double lc_top(double x, double y) const { return cfg.lcd_um + 0.5 * (k_nasal * x * x + k_superior * y * y); }

  /// Minimum distance between the ILM and the anterior LC, both restricted to the
  /// BMO ellipse: exhaustive coarse grid over point pairs, then a shrinking local
  /// search in the four pair coordinates.
  double ilm_lc_distance() const {
    const double reach = std::max(cfg.bmo_a_um, cfg.bmo_b_um);
    std::vector<Vec3> ilm_pts, lc_pts;
    const int n = 30;
    for (int i = -n; i <= n; ++i)
      for (int j = -n; j <= n; ++j) {
        const double x = reach * i / n, y = reach * j / n;
        if (rho(x, y) >= 1.0) continue;
        ilm_pts.emplace_back(x, y, ilm(x, y));
        lc_pts.emplace_back(x, y, lc_top(x, y));
      }
    double best = std::numeric_limits<double>::infinity();
    std::array<double, 4> at{};
    for (const Vec3& a : ilm_pts)
      for (const Vec3& b : lc_pts) {
        const double d2 = (a - b).squaredNorm();
        if (d2 < best) {
          best = d2;
          at = {a.x(), a.y(), b.x(), b.y()};
        }
      }
    auto dist2 = [&](const std::array<double, 4>& p) {
      if (rho(p[0], p[1]) >= 1.0 || rho(p[2], p[3]) >= 1.0) return std::numeric_limits<double>::infinity();
      const Vec3 a(p[0], p[1], ilm(p[0], p[1])), b(p[2], p[3], lc_top(p[2], p[3]));
      return (a - b).squaredNorm();
    };
    for (double step = reach / n; step > 1e-4; step *= 0.5) {
      for (bool moved = true; moved;) {
        moved = false;
        for (int k = 0; k < 4; ++k)
          for (double sgn : {-1.0, 1.0}) {
            std::array<double, 4> q = at;
            q[k] += sgn * step;
            const double d2 = dist2(q);
            if (d2 < best) {
              best = d2;
              at = q;
              moved = true;
            }
          }
      }
    }
    return std::sqrt(best);
  }
  double sclera_top(double x, double y) const {
    const double r = std::min(std::hypot(x, y), r_flat);
    return cfg.choroid_um + tan_alpha * (r_ring - r);
  }
};

enum Boundary { kIlm, kGcl, kOrl, kRpe, kBm, kSclTop, kSclBot, kLcTop, kLcBot, kBoundaryCount };

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

OnhFrame phantom_frame(const PhantomConfig& cfg) {
  const Vec3 ext(cfg.dims.nx * cfg.spacing.dx, cfg.dims.ny * cfg.spacing.dy, cfg.dims.nz * cfg.spacing.dz);
  const Vec3 center(0.5 * ext.x() + cfg.center_offset_x_um, 0.5 * ext.y() + cfg.center_offset_y_um, cfg.bmo_depth_um);
  const double t = cfg.tilt_deg * kDeg, az = cfg.tilt_azimuth_deg * kDeg;
  const Vec3 normal(-std::sin(t) * std::cos(az), -std::sin(t) * std::sin(az), -std::cos(t));
  return frame_from_geometry(center, normal, cfg.bmo_a_um, cfg.bmo_b_um, cfg.bmo_angle_deg * kDeg, cfg.laterality);
}

Curvatures lc_curvatures(const PhantomConfig& cfg) {
  const double c = cfg.lc_curvature_per_mm / 1000.0;
  const double g = cfg.lc_gsi;
  Curvatures k;
  if (g <= 0) {
    k.k2 = -c;
    k.k1 = g <= -1.0 ? -c : [&] {
      const double tau = std::tan(0.5 * kPi * g);
      return -c * (tau + 1.0) / (tau - 1.0);
    }();
  } else {
    k.k1 = c;
    k.k2 = g >= 1.0 ? c : [&] {
      const double tau = std::tan(0.5 * kPi * g);
      return c * (tau - 1.0) / (tau + 1.0);
    }();
  }
  return k;
}

void validate_config(const PhantomConfig& c) {
  if (c.dims.nx == 0 || c.dims.ny == 0 || c.dims.nz == 0) inconsistent("empty scan dimensions");
  if (!(c.spacing.dx > 0 && c.spacing.dy > 0 && c.spacing.dz > 0)) inconsistent("non-positive spacing");
  if (!(c.bmo_a_um > 0 && c.bmo_b_um > 0)) inconsistent("BMO semi-axes must be positive");
  if (kRingFactor * bmo_radius(c) <= std::max(c.bmo_a_um, c.bmo_b_um))
    inconsistent("BMO ellipse too eccentric: ring crosses the canal");
  for (double v : c.rnfl_um)
    if (!(v >= 0)) inconsistent("negative RNFL thickness");
  for (double v : {c.gcl_ipl_um, c.orl_um, c.rpe_bm_um, c.choroid_um, c.sclera_um})
    if (!(v >= 0)) inconsistent("negative layer thickness");
  if (!(c.cup_radius > 0 && c.cup_radius < 1)) inconsistent("cup radius must lie inside the BMO");
  if (!(c.tilt_deg >= 0 && c.tilt_deg < 45)) inconsistent("tilt out of range");
  if (!(c.ppsa_deg >= 0 && c.ppsa_deg < 90)) inconsistent("PPSA out of range");
  if (!(c.lc_gsi >= -1 && c.lc_gsi <= 1)) inconsistent("GSI outside [-1, 1]");
  if (c.include_lc && !(c.lc_thickness_um > 0)) inconsistent("LC thickness must be positive");
  if (!(c.lc_curvature_per_mm >= 0)) inconsistent("negative LC curvature");
  if (!(c.jitter_voxels >= 0)) inconsistent("negative jitter");

  const Geometry g(c);
  const double br = bmo_radius(c);
  const double min_choroid = c.choroid_um - g.tan_alpha * (g.r_flat - g.r_ring);
  if (min_choroid < c.spacing.dz) inconsistent("choroid vanishes under the scleral slope");
  for (int k = 0; k < 72; ++k) {
    const double th = k * 5.0 * kDeg;
    for (double r = 0.0; r <= 3.0 * br; r += 0.05 * br) {
      const double x = -r * std::cos(th), y = r * std::sin(th);
      if (g.rnfl(x, y) <= 0 && c.rnfl_radial_slope != 0) inconsistent("RNFL thins to zero under the radial slope");
      const double p = g.rho(x, y);
      if (p < 1.0) {
        const double ilm = g.ilm(x, y);
        if (ilm < -g.retina(x, y) - 1e-9) inconsistent("ILM dome rises above the retina");
        if (g.lc_top(x, y) <= ilm) inconsistent("LC lies anterior to the ILM");
      }
    }
  }
}

OnhParameters ground_truth(const PhantomConfig& cfg) {
  validate_config(cfg);
  const Geometry g(cfg);
  OnhParameters p;

  std::array<double, 8> sum{};
  std::array<int, 8> n{};
  for (const Vec3& q : ring_points(g.frame)) {
    const int o = static_cast<int>(octant_of(q));
    sum[o] += g.rnfl(q.x(), q.y());
    ++n[o];
  }
  const double cos_alpha = 1.0 / std::sqrt(1.0 + g.tan_alpha * g.tan_alpha);
  for (int k = 0; k < 8; ++k) {
    p.rnflt_um[k] = sum[k] / n[k];
    p.gcct_um[k] = p.rnflt_um[k] + cfg.gcl_ipl_um;
    p.cht_um[k] = cfg.choroid_um * cos_alpha;
  }

  sum.fill(0);
  n.fill(0);
  for (const Vec3& b : generate_bmo_points_normalized(cfg)) {
    const int o = static_cast<int>(octant_of(b));
    sum[o] += g.ilm_distance(b.x(), b.y());
    ++n[o];
  }
  for (int k = 0; k < 8; ++k) p.mrw_um[k] = n[k] ? sum[k] / n[k] : kNaN;

  p.rnflt_avg_um = OctantValues{p.rnflt_um, {}}.average();
  p.mrw_avg_um = OctantValues{p.mrw_um, {}}.average();
  p.gcct_avg_um = OctantValues{p.gcct_um, {}}.average();
  p.cht_avg_um = OctantValues{p.cht_um, {}}.average();

  p.pld_um = cfg.pld_um;
  if (cfg.include_lc) {
    p.lcd_um = cfg.lcd_um;
    p.mpt_um = g.ilm_lc_distance();
    if (cfg.lc_curvature_per_mm > 0) p.lc_gsi = shape_index(lc_curvatures(cfg));
  }
  p.ppsa_deg = cfg.ppsa_deg;
  p.bmoa_mm2 = kPi * cfg.bmo_a_um * cfg.bmo_b_um / 1e6;
  return p;
}

std::vector<Vec3> generate_bmo_points_normalized(const PhantomConfig& cfg) {
  const double ca = std::cos(cfg.bmo_angle_deg * kDeg), sa = std::sin(cfg.bmo_angle_deg * kDeg);
  std::vector<Vec3> pts;
  pts.reserve(kPhantomBmoPoints);
  for (int k = 0; k < kPhantomBmoPoints; ++k) {
    const double t = (k + 0.5) * 2.0 * kPi / kPhantomBmoPoints;
    const double u = cfg.bmo_a_um * std::cos(t), v = cfg.bmo_b_um * std::sin(t);
    pts.emplace_back(u * ca - v * sa, u * sa + v * ca, 0.0);
  }
  return pts;
}

Phantom generate(const PhantomConfig& cfg) {
  Phantom out;
  out.truth = ground_truth(cfg);
  const Geometry g(cfg);
  const Dims& d = cfg.dims;

  LabelVolume& v = out.volume;
  v.dims = d;
  v.spacing = cfg.spacing;
  v.laterality = cfg.laterality;
  v.voxels.assign(d.voxel_count(), 0);
  for (const Vec3& q : generate_bmo_points_normalized(cfg)) v.bmo_points.push_back(from_normalized(q, g.frame));

  const OnhFrame& f = g.frame;
  const Vec3 step(cfg.spacing.dz * f.axis_nasal.z(), cfg.spacing.dz * f.axis_superior.z(),
                  -cfg.spacing.dz * f.bmo_normal.z());
  const bool lateral_static = std::abs(step.x()) < 1e-12 && std::abs(step.y()) < 1e-12;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.jitter_voxels * cfg.spacing.dz);
  std::array<double, kBoundaryCount> jitter{};

  const std::size_t slice = d.column_count();
  std::array<double, kBoundaryCount> b{};
  for (std::uint32_t iy = 0; iy < d.ny; ++iy) {
    for (std::uint32_t ix = 0; ix < d.nx; ++ix) {
      if (cfg.jitter_voxels > 0)
        for (double& j : jitter) j = noise(rng);
      const Vec3 q0 = to_normalized(v.voxel_center(ix, iy, 0), f);
      // The canal wall runs along the scan axis, so every column meets layer tops only.
      const Vec3 at_plane = q0 - (q0.z() / step.z()) * step;
      const bool canal = g.rho(at_plane.x(), at_plane.y()) < 1.0;
      for (std::uint32_t iz = 0; iz < d.nz; ++iz) {
        const Vec3 q = q0 + double(iz) * step;
        if (iz == 0 || !lateral_static) {
          const double x = q.x(), y = q.y();
          b[kIlm] = g.ilm(x, y);
          if (canal) {
            b[kLcTop] = g.lc_top(x, y);
            b[kLcBot] = b[kLcTop] + cfg.lc_thickness_um;
          } else {
            b[kGcl] = -g.below_rnfl;
            b[kOrl] = -(cfg.orl_um + cfg.rpe_bm_um);
            b[kRpe] = -cfg.rpe_bm_um;
            b[kBm] = 0.0;
            b[kSclTop] = g.sclera_top(x, y);
            b[kSclBot] = b[kSclTop] + cfg.sclera_um;
          }
          for (int k = 0; k < kBoundaryCount; ++k) b[k] += jitter[k];
        }
        const double z = q.z();
        TissueLabel label = TissueLabel::Background;
        if (z >= b[kIlm]) {
          if (canal) {
            if (z < b[kLcTop])
              label = TissueLabel::RnflPlt;
            else if (cfg.include_lc && z < b[kLcBot])
              label = TissueLabel::Lc;
          } else if (z < b[kGcl]) {
            label = TissueLabel::RnflPlt;
          } else if (z < b[kOrl]) {
            label = TissueLabel::GclIpl;
          } else if (z < b[kRpe]) {
            label = TissueLabel::Orl;
          } else if (z < b[kBm]) {
            label = TissueLabel::RpeBm;
          } else if (z < b[kSclTop]) {
            label = TissueLabel::Choroid;
          } else if (z < b[kSclBot]) {
            label = TissueLabel::Sclera;
          }
        }
        v.voxels[ix + std::size_t(d.nx) * iy + slice * iz] = static_cast<std::uint8_t>(label);
      }
    }
  }
  validate(v);
  return out;
}

nlohmann::json to_json(const PhantomConfig& c) {
  nlohmann::json j;
  j["dims"] = {c.dims.nx, c.dims.ny, c.dims.nz};
  j["spacing_um"] = {c.spacing.dx, c.spacing.dy, c.spacing.dz};
  j["laterality"] = c.laterality == Laterality::Left ? "left" : "right";
  j["bmo_depth_um"] = c.bmo_depth_um;
  j["center_offset_um"] = {c.center_offset_x_um, c.center_offset_y_um};
  j["bmo_a_um"] = c.bmo_a_um;
  j["bmo_b_um"] = c.bmo_b_um;
  j["bmo_angle_deg"] = c.bmo_angle_deg;
  j["tilt_deg"] = c.tilt_deg;
  j["tilt_azimuth_deg"] = c.tilt_azimuth_deg;
  j["rnfl_um"] = c.rnfl_um;
  j["rnfl_radial_slope"] = c.rnfl_radial_slope;
  j["gcl_ipl_um"] = c.gcl_ipl_um;
  j["orl_um"] = c.orl_um;
  j["rpe_bm_um"] = c.rpe_bm_um;
  j["choroid_um"] = c.choroid_um;
  j["sclera_um"] = c.sclera_um;
  j["pld_um"] = c.pld_um;
  j["cup_radius"] = c.cup_radius;
  j["include_lc"] = c.include_lc;
  j["lcd_um"] = c.lcd_um;
  j["lc_thickness_um"] = c.lc_thickness_um;
  j["lc_gsi"] = c.lc_gsi;
  j["lc_curvature_per_mm"] = c.lc_curvature_per_mm;
  j["ppsa_deg"] = c.ppsa_deg;
  j["jitter_voxels"] = c.jitter_voxels;
  j["seed"] = c.seed;
  return j;
}

PhantomConfig config_from_json(const nlohmann::json& j, PhantomConfig c) {
  if (!j.is_object()) throw Error("phantom", "BAD_CONFIG", "phantom config must be a JSON object");
  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "dims") {
        c.dims = {val.at(0).get<std::uint32_t>(), val.at(1).get<std::uint32_t>(), val.at(2).get<std::uint32_t>()};
      } else if (key == "spacing_um") {
        c.spacing = {val.at(0).get<double>(), val.at(1).get<double>(), val.at(2).get<double>()};
      } else if (key == "laterality") {
        const auto s = val.get<std::string>();
        if (s != "left" && s != "right") throw Error("phantom", "BAD_CONFIG", "laterality must be left or right");
        c.laterality = s == "left" ? Laterality::Left : Laterality::Right;
      } else if (key == "center_offset_um") {
        c.center_offset_x_um = val.at(0).get<double>();
        c.center_offset_y_um = val.at(1).get<double>();
      } else if (key == "rnfl_um") {
        if (val.size() != 8) throw Error("phantom", "BAD_CONFIG", "rnfl_um needs 8 octant values");
        c.rnfl_um = val.get<OctantArray>();
      } else if (key == "include_lc") {
        c.include_lc = val.get<bool>();
      } else if (key == "seed") {
        c.seed = val.get<std::uint64_t>();
      } else {
        static const std::vector<std::pair<const char*, double PhantomConfig::*>> scalars = {
            {"bmo_depth_um", &PhantomConfig::bmo_depth_um},
            {"bmo_a_um", &PhantomConfig::bmo_a_um},
            {"bmo_b_um", &PhantomConfig::bmo_b_um},
            {"bmo_angle_deg", &PhantomConfig::bmo_angle_deg},
            {"tilt_deg", &PhantomConfig::tilt_deg},
            {"tilt_azimuth_deg", &PhantomConfig::tilt_azimuth_deg},
            {"rnfl_radial_slope", &PhantomConfig::rnfl_radial_slope},
            {"gcl_ipl_um", &PhantomConfig::gcl_ipl_um},
            {"orl_um", &PhantomConfig::orl_um},
            {"rpe_bm_um", &PhantomConfig::rpe_bm_um},
            {"choroid_um", &PhantomConfig::choroid_um},
            {"sclera_um", &PhantomConfig::sclera_um},
            {"pld_um", &PhantomConfig::pld_um},
            {"cup_radius", &PhantomConfig::cup_radius},
            {"lcd_um", &PhantomConfig::lcd_um},
            {"lc_thickness_um", &PhantomConfig::lc_thickness_um},
            {"lc_gsi", &PhantomConfig::lc_gsi},
            {"lc_curvature_per_mm", &PhantomConfig::lc_curvature_per_mm},
            {"ppsa_deg", &PhantomConfig::ppsa_deg},
            {"jitter_voxels", &PhantomConfig::jitter_voxels},
        };
        auto it = std::find_if(scalars.begin(), scalars.end(), [&](const auto& s) { return key == s.first; });
        if (it == scalars.end()) throw Error("phantom", "BAD_CONFIG", "unknown phantom key: " + key);
        c.*(it->second) = val.get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("phantom", "BAD_CONFIG", e.what());
  }
  return c;
}

GroupSpec reference_group(SeverityGroup group) {
  // Reported group means (sd); later stages reuse the mild values where no change was reported.
  struct Row {
    double rnfl_avg, rnfl_avg_sd, rnfl_s, rnfl_s_sd, gcc_avg, pld, pld_sd, lcd, lcd_sd, gsi, gsi_sd, ppsa, ppsa_sd,
        bmoa, bmoa_sd, md, md_sd, age, age_sd, female;
  };
  static constexpr Row rows[4] = {
      {112, 26, 163, 31, 154, 136, 195, 410, 109, -0.37, 0.42, 5.4, 4.6, 2.15, 0.5, -1.41, 2.11, 63.36, 6.99, 0.5915},
      {83, 29, 122, 34, 124, 288, 199, 468, 132, -0.61, 0.33, 9.5, 6.2, 2.28, 0.5, -3.35, 1.95, 66.9, 6.42, 0.4461},
      {71, 30, 102, 35, 111, 288, 199, 459, 121, -0.61, 0.33, 9.5, 6.2, 2.30, 0.58, -8.16, 2.35, 68.05, 7.11, 0.4152},
      {50, 25, 61, 31, 88, 288, 199, 502, 147, -0.61, 0.33, 9.5, 6.2, 2.12, 0.42, -18.64, 5.31, 68.52, 7.69, 0.3644},
  };
  const Row& r = rows[static_cast<int>(group)];
  GroupSpec s;
  s.group = group;
  const PhantomConfig& base = s.base;
  double base_avg = 0;
  for (double t : base.rnfl_um) base_avg += t / 8.0;
  for (int k = 0; k < 8; ++k) {
    const double scale = base.rnfl_um[k] / base_avg;
    s.rnfl_um[k] = {r.rnfl_avg * scale, r.rnfl_avg_sd * scale};
  }
  s.rnfl_um[static_cast<int>(Octant::S)] = {r.rnfl_s, r.rnfl_s_sd};
  s.gcl_ipl_um = {r.gcc_avg - r.rnfl_avg, 8};
  s.choroid_um = {170, 40};
  s.pld_um = {r.pld, r.pld_sd};
  s.lcd_um = {r.lcd, r.lcd_sd};
  s.lc_gsi = {r.gsi, r.gsi_sd};
  s.ppsa_deg = {r.ppsa, r.ppsa_sd};
  s.bmoa_mm2 = {r.bmoa, r.bmoa_sd};
  s.tilt_deg = {0, 3};
  s.md_db = {r.md, r.md_sd};
  s.age = {r.age, r.age_sd};
  s.female_fraction = r.female;
  return s;
}

std::vector<GroupSpec> lc_rnfl_experiment() {
  std::vector<GroupSpec> specs(2);
  const double lcd[2] = {410, 510};
  const double sup[2] = {160, 120};
  for (int i = 0; i < 2; ++i) {
    GroupSpec& s = specs[i];
    s.group = i == 0 ? SeverityGroup::Normal : SeverityGroup::Mild;
    s.base.jitter_voxels = 0.5;
    s.base.pld_um = 200;
    s.base.rnfl_um[static_cast<int>(Octant::S)] = sup[i];
    for (int k = 0; k < 8; ++k) s.rnfl_um[k] = {kNaN, 0};
    s.rnfl_um[static_cast<int>(Octant::S)] = {sup[i], 12};
    s.lcd_um = {lcd[i], 35};
    s.md_db = i == 0 ? Normal{-1.41, 2.11} : Normal{-3.35, 1.95};
  }
  return specs;
}

std::vector<CohortEye> cohort(const std::vector<GroupSpec>& specs, std::size_t n_per_group, std::uint64_t seed) {
  std::vector<CohortEye> eyes;
  eyes.reserve(specs.size() * n_per_group);
  for (std::size_t gi = 0; gi < specs.size(); ++gi) {
    const GroupSpec& s = specs[gi];
    for (std::size_t i = 0; i < n_per_group; ++i) {
      std::mt19937_64 rng(mix(mix(seed) ^ mix(gi * 0x100000001b3ULL + i)));
      std::normal_distribution<double> z(0.0, 1.0);
      auto draw = [&](const Normal& n, double fallback, double lo, double hi) {
        const double e = z(rng);  // always consumed so the stream layout is fixed
        if (std::isnan(n.mean)) return fallback;
        return std::clamp(n.mean + n.sd * e, lo, hi);
      };

      PhantomConfig c = s.base;
      for (int k = 0; k < 8; ++k) c.rnfl_um[k] = draw(s.rnfl_um[k], c.rnfl_um[k], 20, 300);
      c.gcl_ipl_um = draw(s.gcl_ipl_um, c.gcl_ipl_um, 10, 120);
      c.choroid_um = draw(s.choroid_um, c.choroid_um, 100, 400);
      c.lcd_um = draw(s.lcd_um, c.lcd_um, 200, 800);
      c.pld_um = draw(s.pld_um, c.pld_um, -150, 700);
      c.pld_um = std::min(c.pld_um, c.lcd_um - 40);
      c.lc_gsi = draw(s.lc_gsi, c.lc_gsi, -0.95, 0.9);

      const double bmoa = draw(s.bmoa_mm2, kNaN, 1.2, 3.4);
      if (!std::isnan(bmoa)) {
        const double ratio = c.bmo_b_um / c.bmo_a_um;
        c.bmo_a_um = std::sqrt(bmoa * 1e6 / (kPi * ratio));
        c.bmo_b_um = ratio * c.bmo_a_um;
      }
      const double br = bmo_radius(c);
      const double alpha_max = std::atan((c.choroid_um - 3 * c.spacing.dz) / ((kFlatFactor - kRingFactor) * br));
      c.ppsa_deg = draw(s.ppsa_deg, c.ppsa_deg, 0, 2 * alpha_max / kDeg);

      const double tilt = draw(s.tilt_deg, c.tilt_deg, -10, 10);
      const double azimuth = std::uniform_real_distribution<double>(0, 360)(rng);
      if (!std::isnan(s.tilt_deg.mean)) {
        c.tilt_deg = std::abs(tilt);
        c.tilt_azimuth_deg = azimuth;
      }
      c.laterality = std::bernoulli_distribution(0.5)(rng) ? Laterality::Left : Laterality::Right;
      c.seed = rng();

      CohortEye eye;
      eye.group = s.group;
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s_%04zu", std::string(severity_name(s.group)).c_str(), i);
      eye.id = buf;
      eye.config = c;
      eye.meta.id = eye.id;
      eye.meta.cohort = s.group == SeverityGroup::Normal ? "normal" : "glaucoma";
      double md = draw(s.md_db, kNaN, -35, 5);
      switch (s.group) {
        case SeverityGroup::Normal: break;
        case SeverityGroup::Mild: md = std::max(md, -6.0); break;
        case SeverityGroup::Moderate: md = std::clamp(md, -12.0, -6.01); break;
        case SeverityGroup::Advanced: md = std::min(md, -12.01); break;
      }
      eye.meta.md_db = md;
      eye.meta.age = draw(s.age, kNaN, 18, 100);
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      if (s.female_fraction >= 0) eye.meta.sex = u < s.female_fraction ? "F" : "M";
      eyes.push_back(std::move(eye));
    }
  }
  return eyes;
}

LabelVolume generate_eye(const CohortEye& eye) {
  LabelVolume v = generate(eye.config).volume;
  v.meta = eye.meta;
  return v;
}

void write_cohort(const std::filesystem::path& dir, const std::vector<CohortEye>& eyes, unsigned threads) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("phantom", "IO_FAILURE", "cannot create " + dir.string());

  nlohmann::json manifest = nlohmann::json::object();
  nlohmann::json list = nlohmann::json::array();
  for (const CohortEye& e : eyes) {
    nlohmann::json item;
    item["id"] = e.id;
    item["group"] = severity_name(e.group);
    item["file"] = e.id + ".onhv";
    item["config"] = to_json(e.config);
    item["truth"] = nlohmann::json::object();
    for (const auto& [name, v] : ground_truth(e.config).fields())
      item["truth"][name] = std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
    list.push_back(std::move(item));
  }
  manifest["eyes"] = std::move(list);

  const unsigned n = std::max(1u, threads);
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < eyes.size(); i += n) save_volume(generate_eye(eyes[i]), dir / (eyes[i].id + ".onhv"));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw Error("phantom", "IO_FAILURE", "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

}  // namespace onh
