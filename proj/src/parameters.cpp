#include "onh/parameters.hpp"

#include "onh/csv.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <ostream>

namespace onh {
namespace {

[[noreturn]] void fail(const std::string& code, const std::string& msg) { throw Error("parameters", code, msg); }

std::vector<Vec3> normalized_anterior(const TissueSurface& s, const OnhFrame& frame) {
  std::vector<Vec3> out;
  out.reserve(s.size());
  for (const SurfaceColumn& c : s.columns()) out.push_back(to_normalized(c.anterior, frame));
  return out;
}

bool inside_bmo(const Vec3& q, const OnhFrame& frame) {
  const auto& e = frame.ellipse;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double u = q.x() * c + q.y() * s;
  const double v = -q.x() * s + q.y() * c;
  return (u / e.a) * (u / e.a) + (v / e.b) * (v / e.b) < 1.0;
}

OctantValues finish(const std::array<double, 8>& sum, const std::array<int, 8>& count) {
  OctantValues out;
  for (int k = 0; k < 8; ++k) {
    out.samples[k] = count[k];
    out.values[k] = count[k] > 0 ? sum[k] / count[k] : kNaN;
  }
  return out;
}

double mean_of(std::span<const double> xs) {
  double s = 0;
  int n = 0;
  for (double x : xs)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : kNaN;
}

}  // namespace

double OctantValues::average() const { return mean_of(values); }

OnhParameters::OnhParameters() {
  rnflt_um.fill(kNaN);
  mrw_um.fill(kNaN);
  gcct_um.fill(kNaN);
  cht_um.fill(kNaN);
}

std::vector<std::string> OnhParameters::field_names() {
  std::vector<std::string> names;
  for (const char* prefix : {"rnflt", "mrw", "gcct", "cht"}) {
    for (const char* o : kOctantNames) names.push_back(std::string(prefix) + "_" + o + "_um");
    names.push_back(std::string(prefix) + "_avg_um");
  }
  for (const char* n : {"pld_um", "mpt_um", "lcd_um", "lc_gsi", "ppsa_deg", "bmoa_mm2"}) names.emplace_back(n);
  return names;
}

std::vector<std::pair<std::string, double>> OnhParameters::fields() const {
  std::vector<double> values;
  for (const auto* arr : {&rnflt_um, &mrw_um, &gcct_um, &cht_um}) {
    values.insert(values.end(), arr->begin(), arr->end());
    values.push_back(arr == &rnflt_um ? rnflt_avg_um
                     : arr == &mrw_um ? mrw_avg_um
                     : arr == &gcct_um ? gcct_avg_um
                                       : cht_avg_um);
  }
  for (double v : {pld_um, mpt_um, lcd_um, lc_gsi, ppsa_deg, bmoa_mm2}) values.push_back(v);
  const auto names = field_names();
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace_back(names[i], values[i]);
  return out;
}

const TissueSurface& SurfaceCache::surface(TissueLabel tissue) {
  auto& slot = plain_[int(tissue)];
  if (!slot) slot = std::make_unique<TissueSurface>(extract_boundaries(volume_, tissue));
  return *slot;
}

const TissueSurface& SurfaceCache::thick_surface(TissueLabel tissue) {
  auto& slot = thick_[int(tissue)];
  if (!slot) {
    slot = std::make_unique<TissueSurface>(surface(tissue));
    local_thickness(*slot, volume_.spacing);
  }
  return *slot;
}

const TissueSurface& SurfaceCache::gcc_surface() {
  if (!gcc_) {
    constexpr std::array<TissueLabel, 2> gcc = {TissueLabel::RnflPlt, TissueLabel::GclIpl};
    gcc_ = std::make_unique<TissueSurface>(extract_boundaries(volume_, gcc));
    local_thickness(*gcc_, volume_.spacing);
  }
  return *gcc_;
}

std::vector<Vec3> ring_points(const OnhFrame& frame) {
  std::vector<Vec3> pts;
  pts.reserve(kRingSamples);
  const double radius = kRingFactor * frame.bmo_radius;
  for (int k = 0; k < kRingSamples; ++k) {
    const double theta = k * 2.0 * std::numbers::pi / kRingSamples;
    pts.emplace_back(-radius * std::cos(theta), radius * std::sin(theta), 0.0);
  }
  return pts;
}

OctantValues sample_ring(const TissueSurface& surface, const LabelVolume& volume, const OnhFrame& frame) {
  std::array<double, 8> sum{};
  std::array<int, 8> count{};
  const Spacing& sp = volume.spacing;
  for (const Vec3& q : ring_points(frame)) {
    const Vec3 p = from_normalized(q, frame);
    const auto ix = static_cast<std::int64_t>(std::llround(p.x() / sp.dx - 0.5));
    const auto iy = static_cast<std::int64_t>(std::llround(p.y() / sp.dy - 0.5));
    const SurfaceColumn* c = surface.find(ix, iy);
    if (!c || std::isnan(c->thickness)) continue;
    const int o = static_cast<int>(octant_of(q));
    sum[o] += c->thickness;
    ++count[o];
  }
  return finish(sum, count);
}

OctantValues rnflt_octants(SurfaceCache& cache, const OnhFrame& frame) {
  return sample_ring(cache.thick_surface(TissueLabel::RnflPlt), cache.volume(), frame);
}

OctantValues gcct_octants(SurfaceCache& cache, const OnhFrame& frame) {
  return sample_ring(cache.gcc_surface(), cache.volume(), frame);
}

OctantValues cht_octants(SurfaceCache& cache, const OnhFrame& frame) {
  return sample_ring(cache.thick_surface(TissueLabel::Choroid), cache.volume(), frame);
}

OctantValues mrw_octants(SurfaceCache& cache, const OnhFrame& frame) {
  const TissueSurface& ilm = cache.surface(TissueLabel::RnflPlt);
  if (ilm.empty()) fail("EMPTY_ILM", "no RNFL_PLT voxels, ILM undefined");
  std::array<double, 8> sum{};
  std::array<int, 8> count{};
  for (const Vec3& b : cache.volume().bmo_points) {
    double best = std::numeric_limits<double>::infinity();
    for (const SurfaceColumn& c : ilm.columns()) best = std::min(best, (c.anterior - b).squaredNorm());
    const Vec3 q = to_normalized(b, frame);
    if (q.x() == 0.0 && q.y() == 0.0) continue;
    const int o = static_cast<int>(octant_of(q));
    sum[o] += std::sqrt(best);
    ++count[o];
  }
  return finish(sum, count);
}

double axis_depth(std::span<const Vec3> pts, double radius_um) {
  std::vector<const Vec3*> near;
  for (const Vec3& p : pts)
    if (p.x() * p.x() + p.y() * p.y() <= radius_um * radius_um) near.push_back(&p);
  if (near.empty()) return kNaN;

  // Fit in units of the radius for conditioning.
  const auto n = Eigen::Index(near.size());
  for (int terms : {6, 3}) {
    if (n < terms) continue;
    Eigen::MatrixXd A(n, terms);
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double x = near[i]->x() / radius_um, y = near[i]->y() / radius_um;
      A(i, 0) = 1;
      A(i, 1) = x;
      A(i, 2) = y;
      if (terms == 6) {
        A(i, 3) = x * x;
        A(i, 4) = x * y;
        A(i, 5) = y * y;
      }
      z(i) = near[i]->z();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    if (qr.rank() < terms) continue;
    return qr.solve(z)(0);
  }
  double s = 0;
  for (const Vec3* p : near) s += p->z();
  return s / double(near.size());
}

namespace {

double axis_radius(const LabelVolume& v) { return 2.5 * std::max(v.spacing.dx, v.spacing.dy); }

}  // namespace

double prelaminar_depth(SurfaceCache& cache, const OnhFrame& frame) {
  const auto pts = normalized_anterior(cache.surface(TissueLabel::RnflPlt), frame);
  const double d = axis_depth(pts, axis_radius(cache.volume()));
  if (std::isnan(d)) fail("NO_ILM_INTERSECTION", "no ILM points near the BMO axis");
  return d;
}

double lc_depth(SurfaceCache& cache, const OnhFrame& frame) {
  const auto pts = normalized_anterior(cache.surface(TissueLabel::Lc), frame);
  const double d = axis_depth(pts, axis_radius(cache.volume()));
  if (std::isnan(d)) fail("NO_LC_INTERSECTION", "no anterior LC points near the BMO axis");
  return d;
}

double min_prelaminar_thickness(SurfaceCache& cache, const OnhFrame& frame) {
  const TissueSurface& lc = cache.surface(TissueLabel::Lc);
  if (lc.empty()) fail("NO_LC_VISIBLE", "no LC voxels");
  const TissueSurface& ilm = cache.surface(TissueLabel::RnflPlt);
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (const SurfaceColumn& c : ilm.columns()) {
    if (!inside_bmo(to_normalized(c.anterior, frame), frame)) continue;
    any = true;
    for (const SurfaceColumn& l : lc.columns()) best = std::min(best, (c.anterior - l.anterior).squaredNorm());
  }
  if (!any) fail("NO_ILM_INSIDE_BMO", "no ILM points inside the BMO ellipse");
  return std::sqrt(best);
}

Curvatures axis_curvatures(std::span<const Vec3> pts) {
  if (pts.size() < 6) fail("DEGENERATE_FIT", "need at least 6 points for the quadric fit");
  // Fit in millimeters.
  const auto n = Eigen::Index(pts.size());
  Eigen::MatrixXd A(n, 6);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = pts[i].x() / 1000.0, y = pts[i].y() / 1000.0;
    A.row(i) << x * x, x * y, y * y, x, y, 1.0;
    z(i) = pts[i].z() / 1000.0;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < 6) fail("DEGENERATE_FIT", "quadric fit is rank deficient");
  const Eigen::VectorXd c = qr.solve(z);

  const double p = c(3), q = c(4);
  Eigen::Matrix2d first;
  first << 1 + p * p, p * q, p * q, 1 + q * q;
  Eigen::Matrix2d second;
  second << 2 * c(0), c(1), c(1), 2 * c(2);
  second /= std::sqrt(1 + p * p + q * q);
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::Matrix2d> es(second, first, Eigen::EigenvaluesOnly);
  Curvatures k;
  k.k1 = es.eigenvalues()(1) / 1000.0;
  k.k2 = es.eigenvalues()(0) / 1000.0;
  return k;
}

double shape_index(const Curvatures& k) {
  const double scale = std::max(std::abs(k.k1), std::abs(k.k2));
  if (scale == 0.0) fail("DEGENERATE_FIT", "flat surface has no shape index");
  const double diff = k.k1 - k.k2;
  if (diff <= 1e-12 * scale) return k.k1 + k.k2 > 0 ? 1.0 : -1.0;
  return (2.0 / std::numbers::pi) * std::atan((k.k1 + k.k2) / diff);
}

double lc_gsi(SurfaceCache& cache, const OnhFrame& frame) {
  const auto pts = normalized_anterior(cache.surface(TissueLabel::Lc), frame);
  return shape_index(axis_curvatures(pts));
}

double ppsa(SurfaceCache& cache, const OnhFrame& frame) {
  const TissueSurface& sclera = cache.surface(TissueLabel::Sclera);
  const LabelVolume& v = cache.volume();
  const auto iy = std::llround(frame.bmo_center.y() / v.spacing.dy - 0.5);
  const double lo = 1.0 * frame.bmo_radius, hi = 2.5 * frame.bmo_radius;

  struct Side {
    double sx = 0, sz = 0, sxx = 0, sxz = 0;
    int n = 0;
    void add(double x, double z) {
      sx += x;
      sz += z;
      sxx += x * x;
      sxz += x * z;
      ++n;
    }
    double slope() const { return (n * sxz - sx * sz) / (n * sxx - sx * sx); }
  } nasal, temporal;

  for (const SurfaceColumn& c : sclera.columns()) {
    if (std::int64_t(c.iy) != iy) continue;
    const Vec3 q = to_normalized(c.anterior, frame);
    const double r = std::abs(q.x());
    if (r < lo || r > hi) continue;
    (q.x() > 0 ? nasal : temporal).add(q.x(), q.z());
  }
  if (nasal.n < 3) fail("INSUFFICIENT_SCLERA_POINTS", "nasal side has " + std::to_string(nasal.n) + " points");
  if (temporal.n < 3)
    fail("INSUFFICIENT_SCLERA_POINTS", "temporal side has " + std::to_string(temporal.n) + " points");
  return (std::atan(temporal.slope()) - std::atan(nasal.slope())) * 180.0 / std::numbers::pi;
}

OnhParameters extract_all(const LabelVolume& volume) {
  OnhFrame frame;
  try {
    frame = build_frame(volume);
  } catch (const Error& e) {
    OnhParameters p;
    p.diagnostics.push_back({"frame", e.module() + "." + e.code(), e.detail()});
    return p;
  }
  return extract_all(volume, frame);
}

OnhParameters extract_all(const LabelVolume& volume, const OnhFrame& frame) {
  OnhParameters p;
  SurfaceCache cache(volume);

  auto guarded = [&](const char* name, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      p.diagnostics.push_back({name, e.module() + "." + e.code(), e.detail()});
    }
  };
  auto octants = [&](const char* name, OctantArray& dst, double& avg, auto&& fn) {
    guarded(name, [&] {
      const OctantValues v = fn();
      dst = v.values;
      avg = v.average();
      for (int k = 0; k < 8; ++k)
        if (v.samples[k] == 0)
          p.diagnostics.push_back({name, "parameters.EMPTY_RING_SECTOR", std::string("no samples in octant ") +
                                                                             kOctantNames[k]});
    });
  };

  octants("rnflt", p.rnflt_um, p.rnflt_avg_um, [&] { return rnflt_octants(cache, frame); });
  octants("mrw", p.mrw_um, p.mrw_avg_um, [&] { return mrw_octants(cache, frame); });
  octants("gcct", p.gcct_um, p.gcct_avg_um, [&] { return gcct_octants(cache, frame); });
  octants("cht", p.cht_um, p.cht_avg_um, [&] { return cht_octants(cache, frame); });
  guarded("pld", [&] { p.pld_um = prelaminar_depth(cache, frame); });
  guarded("mpt", [&] { p.mpt_um = min_prelaminar_thickness(cache, frame); });
  guarded("lcd", [&] { p.lcd_um = lc_depth(cache, frame); });
  guarded("lc_gsi", [&] { p.lc_gsi = lc_gsi(cache, frame); });
  guarded("ppsa", [&] { p.ppsa_deg = ppsa(cache, frame); });
  p.bmoa_mm2 = bmo_area(frame);
  return p;
}

void write_parameters_csv_header(std::ostream& out) {
  out << "id,group";
  for (const auto& n : OnhParameters::field_names()) out << ',' << n;
  out << '\n';
}

void write_parameters_csv_row(std::ostream& out, const std::string& id, const std::string& group,
                              const OnhParameters& p) {
  out << id << ',' << group;
  for (const auto& [name, v] : p.fields()) out << ',' << csv::number(v);
  out << '\n';
}

}  // namespace onh
