#include <doctest.h>

#include "onh/parameters.hpp"
#include "onh/phantom.hpp"

#include <numbers>
#include <sstream>

using namespace onh;
using std::numbers::pi;

namespace {

constexpr double kDz = 3.87;

bool has_code(const OnhParameters& p, const std::string& name, const std::string& code) {
  for (const Diagnostic& d : p.diagnostics)
    if (d.parameter == name && d.code == code) return true;
  return false;
}

// Flat ILM over a 10 um grid, BMO ring on column centers `h` um behind it.
LabelVolume flat_ilm_volume(double h, double slope_x = 0) {
  LabelVolume v;
  v.dims = {201, 201, 150};
  v.spacing = {10, 10, 4};
  v.voxels.assign(v.dims.voxel_count(), 0);
  const double ilm0 = 42;
  for (std::uint32_t iz = 0; iz < v.dims.nz; ++iz)
    for (std::uint32_t iy = 0; iy < v.dims.ny; ++iy)
      for (std::uint32_t ix = 0; ix < v.dims.nx; ++ix) {
        const Vec3 c = v.voxel_center(ix, iy, iz);
        const double top = ilm0 + slope_x * std::max(0.0, c.x() - 1005);
        if (c.z() >= top - 1e-9 && c.z() < top + 100) v.voxels[v.index(ix, iy, iz)] = 1;
      }
  for (auto [dx, dy] : {std::pair{800, 0}, {560, 560}, {0, 800}, {-560, 560}, {-800, 0}, {-560, -560}, {0, -800},
                        {560, -560}})
    v.bmo_points.emplace_back(1005 + dx, 1005 + dy, ilm0 + h);
  return v;
}

std::vector<Vec3> quadric_points(double c20, double c11, double c02, double c10, double c01) {
  std::vector<Vec3> pts;
  for (int i = -10; i <= 10; ++i)
    for (int j = -10; j <= 10; ++j) {
      const double x = 20.0 * i, y = 20.0 * j;
      pts.emplace_back(x, y, c20 * x * x + c11 * x * y + c02 * y * y + c10 * x + c01 * y + 300);
    }
  return pts;
}

// Principal curvatures from the Weingarten map, with the unit normal field
// differentiated numerically.
std::pair<double, double> weingarten_oracle(double c20, double c11, double c02, double c10, double c01) {
  auto z_x = [&](double x, double y) { return 2 * c20 * x + c11 * y + c10; };
  auto z_y = [&](double x, double y) { return c11 * x + 2 * c02 * y + c01; };
  auto normal = [&](double x, double y) {
    return Vec3(-z_x(x, y), -z_y(x, y), 1).normalized();
  };
  const double h = 1e-2;
  Eigen::Matrix<double, 3, 2> dN, dX;
  dN.col(0) = (normal(h, 0) - normal(-h, 0)) / (2 * h);
  dN.col(1) = (normal(0, h) - normal(0, -h)) / (2 * h);
  dX.col(0) = Vec3(1, 0, z_x(0, 0));
  dX.col(1) = Vec3(0, 1, z_y(0, 0));
  const Eigen::Matrix2d G = dX.transpose() * dX;
  const Eigen::Matrix2d L = -dX.transpose() * dN;
  const Eigen::Matrix2d S = G.inverse() * L;
  Eigen::EigenSolver<Eigen::Matrix2d> es(S);
  double a = es.eigenvalues()(0).real(), b = es.eigenvalues()(1).real();
  return {std::max(a, b), std::min(a, b)};
}

}  // namespace

TEST_CASE("uniform RNFL reads 100 in every octant") {
  PhantomConfig cfg;
  cfg.rnfl_um.fill(100);
  const Phantom ph = generate(cfg);
  SurfaceCache cache(ph.volume);
  const OctantValues v = rnflt_octants(cache, build_frame(ph.volume));
  for (int k = 0; k < 8; ++k) {
    CHECK(v.samples[k] > 0);
    CHECK(std::abs(v.values[k] - 100) <= kDz);
  }
}

TEST_CASE("superior and inferior halves") {
  PhantomConfig cfg;
  cfg.rnfl_um = {155, 160, 160, 160, 155, 150, 150, 150};
  const Phantom ph = generate(cfg);
  SurfaceCache cache(ph.volume);
  const OctantValues v = rnflt_octants(cache, build_frame(ph.volume));
  CHECK(std::abs(v.values[int(Octant::S)] - 160) <= kDz);
  CHECK(std::abs(v.values[int(Octant::I)] - 150) <= kDz);
}

TEST_CASE("ring samples sit at 1.5 BMOR") {
  PhantomConfig cfg;
  const OnhFrame f = build_frame(generate(cfg).volume);
  const auto ring = ring_points(f);
  REQUIRE(ring.size() == 360);
  for (std::size_t k = 0; k < ring.size(); ++k) {
    CHECK(std::abs(ring[k].head<2>().norm() - 1.5 * f.bmo_radius) <= cfg.spacing.dx);
    CHECK(octant_angle_deg(ring[k].x(), ring[k].y()) == doctest::Approx(double(k)).epsilon(1e-9));
  }
}

TEST_CASE("minimum rim width to a flat ILM") {
  const LabelVolume v = flat_ilm_volume(200);
  SurfaceCache cache(v);
  const OctantValues m = mrw_octants(cache, build_frame(v));
  for (int k = 0; k < 8; ++k) CHECK(m.values[k] == doctest::Approx(200).epsilon(1e-12));

  const LabelVolume sloped = flat_ilm_volume(200, -0.03);
  SurfaceCache sc(sloped);
  const OctantValues ms = mrw_octants(sc, build_frame(sloped));
  const Vec3& b = sloped.bmo_points[0];
  const auto* col = sc.surface(TissueLabel::RnflPlt).find(std::int64_t(b.x() / 10), std::int64_t(b.y() / 10));
  REQUIRE(col);
  CHECK(ms.values[int(Octant::N)] <= b.z() - col->anterior.z() + 1e-9);
}

TEST_CASE("MRW on the phantom dome") {
  PhantomConfig cfg;
  const Phantom ph = generate(cfg);
  const OnhParameters p = extract_all(ph.volume);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(p.mrw_um[k] - ph.truth.mrw_um[k]) <= kDz);
}

TEST_CASE("GCC thickness") {
  PhantomConfig cfg;
  cfg.rnfl_um.fill(100);
  cfg.gcl_ipl_um = 50;
  const Phantom ph = generate(cfg);
  const OnhParameters p = extract_all(ph.volume);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(p.gcct_um[k] - 150) <= kDz);

  PhantomConfig grad;
  grad.rnfl_radial_slope = -20;
  const Phantom pg = generate(grad);
  const OnhParameters q = extract_all(pg.volume);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(q.gcct_um[k] - pg.truth.gcct_um[k]) <= 2 * kDz);
}

TEST_CASE("GCC without GCL_IPL equals RNFL") {
  LabelVolume v = flat_ilm_volume(200);
  SurfaceCache cache(v);
  const TissueSurface& gcc = cache.gcc_surface();
  const TissueSurface& rnfl = cache.thick_surface(TissueLabel::RnflPlt);
  REQUIRE(gcc.size() == rnfl.size());
  for (std::size_t k = 0; k < gcc.size(); k += 97) CHECK(gcc.columns()[k].thickness == rnfl.columns()[k].thickness);
}

TEST_CASE("choroid thickness") {
  PhantomConfig cfg;
  cfg.choroid_um = 150;
  cfg.ppsa_deg = 0;
  Phantom ph = generate(cfg);
  OnhParameters p = extract_all(ph.volume);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(p.cht_um[k] - 150) <= kDz);

  PhantomConfig sloped;
  const Phantom ps = generate(sloped);
  const OnhParameters q = extract_all(ps.volume);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(q.cht_um[k] - ps.truth.cht_um[k]) <= 2 * kDz);

  for (auto& x : ph.volume.voxels)
    if (x == std::uint8_t(TissueLabel::Choroid)) x = 0;
  p = extract_all(ph.volume);
  CHECK(has_code(p, "cht", "parameters.EMPTY_RING_SECTOR"));
  CHECK(std::isnan(p.cht_avg_um));
  CHECK(!std::isnan(p.rnflt_avg_um));
}

TEST_CASE("prelaminar depth") {
  PhantomConfig cfg;
  cfg.pld_um = 288;
  cfg.lcd_um = 450;
  CHECK(std::abs(extract_all(generate(cfg).volume).pld_um - 288) <= kDz);

  std::vector<Vec3> flat;
  for (int i = -5; i <= 5; ++i)
    for (int j = -5; j <= 5; ++j) flat.emplace_back(10.0 * i, 10.0 * j, 0.0);
  CHECK(std::abs(axis_depth(flat, 30)) < 1e-12);

  cfg.tilt_deg = 25;
  cfg.rnfl_um.fill(100);
  const Phantom ph = generate(cfg);
  const OnhFrame f = phantom_frame(cfg);
  const double pld = extract_all(ph.volume).pld_um;
  CHECK(std::abs(pld - 288) <= 2 * kDz);

  // analytic depth of the ILM straight down the scan axis from the BMO center
  const double retina = 100 + cfg.gcl_ipl_um + cfg.orl_um + cfg.rpe_bm_um;
  auto ilm = [&](double x, double y) {
    const double rho = std::hypot(x / cfg.bmo_a_um, y / cfg.bmo_b_um);
    if (rho >= cfg.cup_radius) return -retina;
    const double w = std::cos(0.5 * pi * rho / cfg.cup_radius);
    return -retina + (cfg.pld_um + retina) * w * w;
  };
  double lo = 0, hi = 1000;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const Vec3 q = to_normalized(f.bmo_center + Vec3(0, 0, mid), f);
    (q.z() < ilm(q.x(), q.y()) ? lo : hi) = mid;
  }
  const TissueSurface surf = extract_boundaries(ph.volume, TissueLabel::RnflPlt);
  const auto* col = surf.find(std::llround(f.bmo_center.x() / cfg.spacing.dx - 0.5),
                              std::llround(f.bmo_center.y() / cfg.spacing.dy - 0.5));
  REQUIRE(col);
  const double columnwise = col->anterior.z() - f.bmo_center.z();
  CHECK(std::abs(columnwise - lo) <= 2 * kDz);
  CHECK(std::abs(lo - 288) > 3 * kDz);
}

TEST_CASE("minimum prelaminar thickness") {
  PhantomConfig cfg;
  cfg.pld_um = 347;
  cfg.lcd_um = 410;
  const OnhParameters p = extract_all(generate(cfg).volume);
  CHECK(std::abs(p.mpt_um - 63) <= 2 * kDz);

  cfg.include_lc = false;
  const OnhParameters q = extract_all(generate(cfg).volume);
  CHECK(has_code(q, "mpt", "parameters.NO_LC_VISIBLE"));
  CHECK(std::isnan(q.mpt_um));
  CHECK(std::isnan(q.lcd_um));
  CHECK(std::isnan(q.lc_gsi));
  CHECK(!std::isnan(q.pld_um));
  CHECK(!std::isnan(q.ppsa_deg));
  CHECK(!std::isnan(q.rnflt_avg_um));
}

TEST_CASE("LC depth") {
  PhantomConfig cfg;
  cfg.lcd_um = 410;
  cfg.lc_gsi = -1;
  CHECK(std::abs(extract_all(generate(cfg).volume).lcd_um - 410) <= kDz);
  cfg.tilt_deg = 12;
  cfg.tilt_azimuth_deg = 70;
  CHECK(std::abs(extract_all(generate(cfg).volume).lcd_um - 410) <= 2 * kDz);
}

TEST_CASE("shape index table") {
  CHECK(shape_index({-1e-3, -1e-3}) == -1);
  CHECK(shape_index({2e-3, 2e-3}) == 1);
  CHECK(shape_index({1e-3, -1e-3}) == doctest::Approx(0).epsilon(1e-15));
  CHECK(shape_index({0, -1e-3}) == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(shape_index({1e-3, 0}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(shape_index({0, 0}), Error);

  const double c = 0.5e-3;
  CHECK(shape_index(axis_curvatures(quadric_points(-c / 2, 0, -c / 2, 0, 0))) == doctest::Approx(-1));
  CHECK(std::abs(shape_index(axis_curvatures(quadric_points(c / 2, 0, -c / 2, 0, 0)))) < 1e-9);
  CHECK(shape_index(axis_curvatures(quadric_points(0, 0, -c / 2, 0, 0))) == doctest::Approx(-0.5).epsilon(1e-9));
}

TEST_CASE("quadric curvatures match the Weingarten map") {
  for (auto [c20, c11, c02, c10, c01] : {std::array{-2e-4, 5e-5, -1e-4, 0.05, -0.02},
                                         std::array{-3e-4, 0.0, -1.5e-4, 0.0, 0.0},
                                         std::array{1e-4, -8e-5, -2.5e-4, -0.1, 0.07}}) {
    const Curvatures k = axis_curvatures(quadric_points(c20, c11, c02, c10, c01));
    const auto [k1, k2] = weingarten_oracle(c20, c11, c02, c10, c01);
    CHECK(std::abs(k.k1 - k1) <= 1e-6 * std::abs(k1));
    CHECK(std::abs(k.k2 - k2) <= 1e-6 * std::abs(k2));
  }
}

TEST_CASE("LC shape index on the phantom") {
  for (double g : {-0.8, -0.4, 0.0, 0.3}) {
    PhantomConfig cfg;
    cfg.lc_gsi = g;
    CHECK(std::abs(extract_all(generate(cfg).volume).lc_gsi - g) <= 0.05);
  }
}

TEST_CASE("scleral angle") {
  PhantomConfig cfg;
  cfg.ppsa_deg = 0;
  CHECK(std::abs(extract_all(generate(cfg).volume).ppsa_deg) < 0.5);
  cfg.ppsa_deg = 10;
  CHECK(extract_all(generate(cfg).volume).ppsa_deg == doctest::Approx(10).epsilon(0.05));
  cfg.ppsa_deg = 9.5;
  cfg.jitter_voxels = 0.5;
  cfg.seed = 4;
  CHECK(std::abs(extract_all(generate(cfg).volume).ppsa_deg - 9.5) <= 0.5);
}

TEST_CASE("BMO area") {
  PhantomConfig cfg;
  cfg.bmo_a_um = 900;
  cfg.bmo_b_um = 760;
  CHECK(extract_all(generate(cfg).volume).bmoa_mm2 == doctest::Approx(pi * 0.9 * 0.76).epsilon(1e-9));
}

TEST_CASE("full phantom within tolerance") {
  PhantomConfig cfg;
  const Phantom ph = generate(cfg);
  const OnhParameters p = extract_all(ph.volume);
  CHECK(p.diagnostics.empty());
  const auto got = p.fields(), want = ph.truth.fields();
  REQUIRE(got.size() == want.size());
  for (std::size_t k = 0; k < got.size(); ++k) {
    const std::string& name = got[k].first;
    double tol = 2 * kDz;
    if (name == "lc_gsi") tol = 0.05;
    if (name == "ppsa_deg") tol = 0.5;
    if (name == "bmoa_mm2") tol = 1e-9;
    CHECK_MESSAGE(std::abs(got[k].second - want[k].second) <= tol, name);
  }
}

TEST_CASE("LC depth change stays local") {
  PhantomConfig a, b;
  b.lcd_um = a.lcd_um + 40;
  const OnhParameters pa = extract_all(generate(a).volume), pb = extract_all(generate(b).volume);
  CHECK(pa.rnflt_um == pb.rnflt_um);
  CHECK(pa.mrw_um == pb.mrw_um);
  CHECK(pa.gcct_um == pb.gcct_um);
  CHECK(pa.cht_um == pb.cht_um);
  CHECK(pa.ppsa_deg == pb.ppsa_deg);
  CHECK(pa.bmoa_mm2 == pb.bmoa_mm2);
  CHECK(pa.pld_um == pb.pld_um);
  CHECK(pb.lcd_um - pa.lcd_um == doctest::Approx(40).epsilon(0.1));
}

TEST_CASE("left eye mirrors octants") {
  PhantomConfig r;
  PhantomConfig l = r;
  l.laterality = Laterality::Left;
  const OnhParameters pr = extract_all(generate(r).volume), pl = extract_all(generate(l).volume);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(pr.rnflt_um[k] - pl.rnflt_um[k]) <= kDz);
}

TEST_CASE("CSV row layout") {
  const auto names = OnhParameters::field_names();
  CHECK(names.size() == 42);
  CHECK(names.front() == "rnflt_T_um");
  CHECK(names.back() == "bmoa_mm2");
  OnhParameters p;
  p.pld_um = 12.5;
  std::ostringstream out;
  write_parameters_csv_header(out);
  write_parameters_csv_row(out, "e1", "NORMAL", p);
  const std::string text = out.str();
  CHECK(text.substr(0, 16) == "id,group,rnflt_T");
  CHECK(text.find("\ne1,NORMAL,,,") != std::string::npos);
  CHECK(text.find(",12.5,") != std::string::npos);
}
