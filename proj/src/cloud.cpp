#include "onh/cloud.hpp"

#include "onh/csv.hpp"
#include "onh/surfaces.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace onh {
namespace {

[[noreturn]] void fail(const std::string& code, const std::string& msg) { throw Error("cloud", code, msg); }

bool same(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

TissueLabel parse_tissue(std::string_view s) {
  for (TissueLabel t : kAllTissues)
    if (tissue_name(t) == s) return t;
  fail("BAD_CLOUD_FILE", "unknown tissue '" + std::string(s) + "'");
}

}  // namespace

bool CloudPoint::operator==(const CloudPoint& o) const {
  return x == o.x && y == o.y && z == o.z && same(thickness, o.thickness) && tissue == o.tissue;
}

PointCloud build_cloud(const LabelVolume& volume, const OnhFrame& frame, const CloudOptions& options) {
  const Spacing& sp = volume.spacing;
  const auto sx = std::max<std::int64_t>(1, std::llround(options.lateral_pitch_um / sp.dx));
  const auto sy = std::max<std::int64_t>(1, std::llround(options.lateral_pitch_um / sp.dy));
  const auto cx = std::llround(frame.bmo_center.x() / sp.dx - 0.5);
  const auto cy = std::llround(frame.bmo_center.y() / sp.dy - 0.5);
  auto on_lattice = [&](std::int64_t ix, std::int64_t iy) {
    return (ix - cx) % sx == 0 && (iy - cy) % sy == 0;
  };

  PointCloud cloud;
  if (volume.meta) {
    cloud.eye_id = volume.meta->id;
    cloud.label = severity_of(*volume.meta);
  }
  for (TissueLabel t : kAllTissues) {
    TissueSurface s = extract_boundaries(volume, t);
    if (has_thickness(t)) local_thickness(s, sp);
    for (const SurfaceColumn& c : s.columns()) {
      if (!on_lattice(c.ix, c.iy)) continue;
      const Vec3 q = to_normalized(c.anterior, frame);
      cloud.points.push_back({q.x(), q.y(), q.z(), has_thickness(t) ? c.thickness : kNaN, t});
    }
  }
  if (cloud.points.empty()) fail("EMPTY_CLOUD", "no tissue boundary points in the volume");
  return cloud;
}

PointCloud build_cloud(const LabelVolume& volume, const CloudOptions& options) {
  return build_cloud(volume, build_frame(volume), options);
}

PointCloud sample(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  const std::size_t m = cloud.size();
  if (n >= m) return cloud;
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  PointCloud out;
  out.eye_id = cloud.eye_id;
  out.label = cloud.label;
  out.points.reserve(n);
  for (std::size_t i : idx) out.points.push_back(cloud.points[i]);
  return out;
}

void AugmentConfig::validate() const {
  if (!(crop_fraction_min > 0 && crop_fraction_min <= crop_fraction_max && crop_fraction_max <= 1))
    fail("BAD_AUGMENT_CONFIG", "crop fractions must satisfy 0 < min <= max <= 1");
  if (!(rotation_deg_min <= rotation_deg_max)) fail("BAD_AUGMENT_CONFIG", "rotation range is reversed");
  if (!(translation_um >= 0)) fail("BAD_AUGMENT_CONFIG", "translation must be non-negative");
  if (!(noise_sigma_um >= 0)) fail("BAD_AUGMENT_CONFIG", "noise sigma must be non-negative");
  if (sample_n < 64) fail("BAD_AUGMENT_CONFIG", "sample_n must be at least 64");
}

PointCloud augment(const PointCloud& cloud, const AugmentConfig& cfg, std::uint64_t seed,
                   std::vector<std::string>* diagnostics) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  PointCloud out = cloud;
  auto& pts = out.points;

  // crop: keep the fraction of points with the smallest projection on a random direction
  const double keep_frac = uniform(cfg.crop_fraction_min, cfg.crop_fraction_max);
  const double phi = uniform(0.0, 2.0 * std::numbers::pi);
  const auto keep = static_cast<std::size_t>(std::ceil(keep_frac * double(pts.size())));
  if (keep < pts.size()) {
    if (keep < 64) {
      if (diagnostics) diagnostics->push_back("cloud.CROP_EMPTIED");
    } else {
      const double ux = std::cos(phi), uy = std::sin(phi);
      std::vector<std::size_t> order(pts.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return pts[a].x * ux + pts[a].y * uy < pts[b].x * ux + pts[b].y * uy;
      });
      order.resize(keep);
      std::sort(order.begin(), order.end());
      std::vector<CloudPoint> kept;
      kept.reserve(keep);
      for (std::size_t i : order) kept.push_back(pts[i]);
      pts = std::move(kept);
    }
  }

  const double theta = uniform(cfg.rotation_deg_min, cfg.rotation_deg_max) * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double tx = uniform(-cfg.translation_um, cfg.translation_um);
  const double ty = uniform(-cfg.translation_um, cfg.translation_um);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (CloudPoint& p : pts) {
    const double x = c * p.x - s * p.y, y = s * p.x + c * p.y;
    p.x = x + tx;
    p.y = y + ty;
    if (cfg.noise_sigma_um > 0) {
      p.x += cfg.noise_sigma_um * noise(rng);
      p.y += cfg.noise_sigma_um * noise(rng);
      p.z += cfg.noise_sigma_um * noise(rng);
    }
  }
  return sample(out, cfg.sample_n, rng());
}

FeatureMatrix features(const PointCloud& cloud) {
  FeatureMatrix f(Eigen::Index(cloud.size()), 4);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const CloudPoint& p = cloud.points[i];
    const auto r = Eigen::Index(i);
    f(r, 0) = p.x * kFeatureScale;
    f(r, 1) = p.y * kFeatureScale;
    f(r, 2) = p.z * kFeatureScale;
    f(r, 3) = std::isnan(p.thickness) ? 0.0 : p.thickness * kFeatureScale;
  }
  return f;
}

void write_cloud(std::ostream& out, const PointCloud& cloud) {
  out << "x_um,y_um,z_um,thickness_um,tissue,eye_id,label\n";
  const std::string tail = "," + cloud.eye_id + "," + std::string(severity_name(cloud.label)) + "\n";
  for (const CloudPoint& p : cloud.points) {
    out << csv::number(p.x) << ',' << csv::number(p.y) << ',' << csv::number(p.z) << ','
        << csv::number(p.thickness) << ',' << tissue_name(p.tissue) << tail;
  }
}

PointCloud read_cloud(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail("BAD_CLOUD_FILE", "empty point-cloud file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x_um,y_um,z_um,thickness_um,tissue,eye_id,label") fail("BAD_CLOUD_FILE", "unexpected header: " + line);
  PointCloud cloud;
  bool first = true;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = csv::split(line);
    if (f.size() != 7) fail("BAD_CLOUD_FILE", "row " + std::to_string(row) + " has " + std::to_string(f.size()) + " fields");
    CloudPoint p;
    try {
      p.x = csv::parse_number(f[0]);
      p.y = csv::parse_number(f[1]);
      p.z = csv::parse_number(f[2]);
      p.thickness = csv::parse_number(f[3]);
    } catch (const std::invalid_argument&) {
      fail("BAD_CLOUD_FILE", "row " + std::to_string(row) + " has a malformed number");
    }
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      fail("BAD_CLOUD_FILE", "row " + std::to_string(row) + " has a non-finite coordinate");
    p.tissue = parse_tissue(f[4]);
    if (first) {
      cloud.eye_id = std::string(f[5]);
      cloud.label = parse_severity(f[6]);
      first = false;
    } else if (f[5] != cloud.eye_id) {
      fail("BAD_CLOUD_FILE", "row " + std::to_string(row) + " belongs to another eye");
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("IO_FAILURE", "cannot open " + path.string() + " for writing");
  write_cloud(out, cloud);
  if (!out) fail("IO_FAILURE", "write failed for " + path.string());
}

PointCloud load_cloud(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("IO_FAILURE", "cannot open " + path.string());
  return read_cloud(in);
}

std::uint64_t eye_seed(std::uint64_t seed, const std::string& eye_id) {
  // FNV-1a over the id, then a splitmix finalizer with the global seed
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : eye_id) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t x = h ^ (seed + 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace onh
