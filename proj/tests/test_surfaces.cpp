#include <doctest.h>

#include "onh/phantom.hpp"
#include "onh/surfaces.hpp"

#include <numbers>
#include <random>

using namespace onh;

namespace {

template <class Fn>
LabelVolume volume_from(Dims d, Spacing s, Fn&& label) {
  LabelVolume v;
  v.dims = d;
  v.spacing = s;
  v.voxels.resize(d.voxel_count());
  for (std::uint32_t iz = 0; iz < d.nz; ++iz)
    for (std::uint32_t iy = 0; iy < d.ny; ++iy)
      for (std::uint32_t ix = 0; ix < d.nx; ++ix)
        v.voxels[v.index(ix, iy, iz)] = std::uint8_t(label(v.voxel_center(ix, iy, iz), ix, iy));
  for (int k = 0; k < 5; ++k) v.bmo_points.emplace_back(s.dx * (1 + k), s.dy, s.dz);
  return v;
}

constexpr auto kRnfl = std::uint8_t(TissueLabel::RnflPlt);
constexpr auto kGcl = std::uint8_t(TissueLabel::GclIpl);

}  // namespace

TEST_CASE("slab boundaries") {
  const Spacing sp{10, 10, 3.87};
  auto v = volume_from({8, 6, 80}, sp, [](const Vec3& p, auto ix, auto) {
    return (ix != 3 && p.z() >= 100 && p.z() < 200) ? kRnfl : 0;
  });
  const TissueSurface s = extract_boundaries(v, TissueLabel::RnflPlt);
  CHECK(s.size() == 8 * 6 - 6);
  const int first = int(std::ceil(100 / sp.dz - 0.5));
  for (const SurfaceColumn& c : s.columns()) {
    CHECK(c.anterior.z() == doctest::Approx((first + 0.5) * sp.dz));
    CHECK(c.anterior.z() - sp.dz / 2 >= 100 - 1e-9);
  }
  CHECK(s.find(3, 2) == nullptr);
  CHECK(s.find(4, 2) != nullptr);
  CHECK(s.find(-1, 0) == nullptr);
  CHECK(s.multi_run_columns == 0);
}

TEST_CASE("union of tissues and split runs") {
  auto v = volume_from({4, 4, 40}, {10, 10, 5}, [](const Vec3& p, auto ix, auto) -> std::uint8_t {
    if (p.z() < 50) return 0;
    if (p.z() < 100) return kRnfl;
    if (p.z() < 130) return ix == 0 ? 0 : kGcl;
    if (p.z() < 150 && ix == 0) return kGcl;
    return 0;
  });
  const std::array<TissueLabel, 2> gcc{TissueLabel::RnflPlt, TissueLabel::GclIpl};
  const TissueSurface s = extract_boundaries(v, gcc);
  CHECK(s.tissue() == TissueLabel::RnflPlt);
  CHECK(s.find(1, 1)->run_length == 16);
  CHECK(s.find(0, 1)->run_length == 10);
  CHECK(s.multi_run_columns == 4);
}

TEST_CASE("flat slab thickness") {
  const Spacing sp{10, 10, 4};
  auto v = volume_from({12, 12, 60}, sp, [](const Vec3& p, auto, auto) {
    return (p.z() >= 40 && p.z() < 140) ? kRnfl : 0;
  });
  TissueSurface s = extract_boundaries(v, TissueLabel::RnflPlt);
  local_thickness(s, sp);
  for (const SurfaceColumn& c : s.columns()) CHECK(c.thickness == doctest::Approx(100).epsilon(1e-12));
}

TEST_CASE("thickness is a minimum over the posterior set") {
  TissueSurface s(TissueLabel::Choroid, Dims{10, 1, 1});
  const Spacing sp{10, 10, 4};
  for (std::uint32_t ix = 0; ix < 10; ++ix) {
    SurfaceColumn c;
    c.ix = ix;
    c.anterior = Vec3(ix * 10.0, 0, 0);
    c.posterior = Vec3(ix * 10.0 + 10, 0, 96);  // shifted one column laterally
    s.push(c);
  }
  local_thickness(s, sp);
  for (const SurfaceColumn& c : s.columns())
    if (c.ix > 0) CHECK(c.thickness == doctest::Approx(100).epsilon(1e-12));
  CHECK(s.columns()[0].thickness > 100);
}

TEST_CASE("wedge thickness against all pairs") {
  const Spacing sp{10, 20, 2};
  auto v = volume_from({40, 12, 120}, sp, [](const Vec3& p, auto, auto) {
    const double top = 20 + 0.1 * p.x(), bottom = 100 + 0.35 * p.x() + 0.2 * p.y();
    return (p.z() >= top && p.z() < bottom) ? kRnfl : 0;
  });
  TissueSurface fast = extract_boundaries(v, TissueLabel::RnflPlt);
  TissueSurface slow = fast;
  local_thickness(fast, sp);
  local_thickness(slow, sp, {300, true});
  const Vec3 face(0, 0, sp.dz);
  for (std::size_t k = 0; k < fast.size(); ++k) {
    const SurfaceColumn& c = fast.columns()[k];
    double brute = std::numeric_limits<double>::infinity();
    for (const SurfaceColumn& p : fast.columns()) brute = std::min(brute, (c.anterior - p.posterior - face).norm());
    CHECK(std::abs(c.thickness - brute) < 1e-9);
    CHECK(std::abs(slow.columns()[k].thickness - brute) < 1e-9);
  }
}

TEST_CASE("phantom ILM boundary follows the analytic surface") {
  PhantomConfig cfg;
  cfg.dims = {96, 25, 300};
  cfg.spacing = {46, 135, 3.87};
  cfg.rnfl_um.fill(110);
  cfg.pld_um = 250;
  const Phantom ph = generate(cfg);
  const OnhFrame f = phantom_frame(cfg);
  const double dz = cfg.spacing.dz;
  const double retina = 110 + cfg.gcl_ipl_um + cfg.orl_um + cfg.rpe_bm_um;
  const TissueSurface ilm = extract_boundaries(ph.volume, TissueLabel::RnflPlt);
  REQUIRE(ilm.size() == cfg.dims.column_count());
  const double pi = std::numbers::pi;
  for (const SurfaceColumn& c : ilm.columns()) {
    const Vec3 q = to_normalized(c.anterior, f);
    const double u = q.x() / cfg.bmo_a_um, v = q.y() / cfg.bmo_b_um;
    const double rho = std::hypot(u, v);
    double depth = -retina;
    if (rho < cfg.cup_radius) {
      const double w = std::cos(0.5 * pi * rho / cfg.cup_radius);
      depth += (cfg.pld_um + retina) * w * w;
    }
    // the first voxel whose center lies at or behind the surface
    CHECK(std::abs(q.z() - dz / 2 - depth) <= dz / 2 + 1e-9);
  }
}

TEST_CASE("octant sectors") {
  CHECK(octant_of(Vec3(-1, 0, 0)) == Octant::T);
  CHECK(octant_of(Vec3(0, 1, 0)) == Octant::S);
  CHECK(octant_of(Vec3(1, 0, 0)) == Octant::N);
  CHECK(octant_of(Vec3(0, -1, 0)) == Octant::I);
  const double a = 22.5 * std::numbers::pi / 180;
  CHECK(octant_of(Vec3(-std::cos(a), std::sin(a), 0)) == Octant::ST);
  CHECK(octant_of(Vec3(-std::cos(a), -std::sin(a) * 1.0000001, 0)) == Octant::IT);
  CHECK(octant_angle_deg(-1, 0) == 0);
  CHECK(octant_angle_deg(0, 1) == doctest::Approx(90));
  CHECK(octant_angle_deg(0, -1) == doctest::Approx(270));
  CHECK_THROWS_AS(octant_of(Vec3(0, 0, 5)), Error);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 360);
  for (int k = 0; k < 1000; ++k) {
    const double deg = u(rng);
    const double r = deg * std::numbers::pi / 180;
    const int expect = int(std::floor(std::fmod(deg + 22.5, 360.0) / 45));
    CHECK(int(octant_of(Vec3(-std::cos(r), std::sin(r), 0))) == expect);
  }
}
