#include <doctest.h>

#include "onh/frame.hpp"
#include "onh/phantom.hpp"

#include <Eigen/Dense>

#include <numbers>
#include <random>

using namespace onh;
using std::numbers::pi;

namespace {

std::vector<Vec2> ellipse_points(double a, double b, double angle, Vec2 c, int n, double phase = 0.3) {
  std::vector<Vec2> out;
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int k = 0; k < n; ++k) {
    const double t = phase + 2 * pi * k / n;
    const double u = a * std::cos(t), v = b * std::sin(t);
    out.push_back(c + Vec2(ca * u - sa * v, sa * u + ca * v));
  }
  return out;
}

double angle_between_deg(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b)) * 180 / pi;
}

// Geometric least squares: each point gets its own ellipse parameter t_i, solved by
// Gauss-Newton over (cx, cy, a, b, angle, t_1..t_n).
Eigen::VectorXd geometric_refit(const std::vector<Vec2>& pts, const Ellipse<double>& start) {
  const int n = int(pts.size());
  Eigen::VectorXd p(5 + n);
  p << start.center.x(), start.center.y(), start.a, start.b, start.angle, Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; ++i) {
    const Vec2 d = pts[i] - start.center;
    const double ca = std::cos(start.angle), sa = std::sin(start.angle);
    p(5 + i) = std::atan2((-sa * d.x() + ca * d.y()) / start.b, (ca * d.x() + sa * d.y()) / start.a);
  }
  auto residual = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(2 * n);
    const double ca = std::cos(q(4)), sa = std::sin(q(4));
    for (int i = 0; i < n; ++i) {
      const double u = q(2) * std::cos(q(5 + i)), v = q(3) * std::sin(q(5 + i));
      r(2 * i) = q(0) + ca * u - sa * v - pts[i].x();
      r(2 * i + 1) = q(1) + sa * u + ca * v - pts[i].y();
    }
    return r;
  };
  for (int it = 0; it < 50; ++it) {
    const Eigen::VectorXd r = residual(p);
    Eigen::MatrixXd J(2 * n, 5 + n);
    for (int k = 0; k < 5 + n; ++k) {
      Eigen::VectorXd hp = p, hm = p;
      hp(k) += 1e-6;
      hm(k) -= 1e-6;
      J.col(k) = (residual(hp) - residual(hm)) / 2e-6;
    }
    const Eigen::VectorXd step = J.colPivHouseholderQr().solve(-r);
    p += step;
    if (step.norm() < 1e-10) break;
  }
  return p.head(5);
}

}  // namespace

TEST_CASE("plane through coplanar points") {
  std::vector<Vec3> pts;
  for (int k = 0; k < 6; ++k) pts.emplace_back(100 * std::cos(k), 80 * std::sin(2.0 * k), 100);
  auto fit = fit_plane<double>(pts);
  CHECK(std::abs(std::abs(fit.normal.z()) - 1) < 1e-12);
  CHECK(fit.normal.z() < 0);
  CHECK(fit.centroid.z() == doctest::Approx(100).epsilon(1e-14));

  std::vector<Vec3> sym;
  for (const Vec3& p : {Vec3(-100, 0, 100), Vec3(100, 0, 100), Vec3(0, -100, 100), Vec3(0, 100, 100)})
    sym.push_back(p);
  sym.emplace_back(50, 50, 105);
  sym.emplace_back(-50, -50, 105);
  sym.emplace_back(50, -50, 95);
  sym.emplace_back(-50, 50, 95);
  auto fs = fit_plane<double>(sym);
  CHECK(angle_between_deg(fs.normal, Vec3(0, 0, -1)) < 1e-9);
}

TEST_CASE("plane normal matches a full scatter eigen-decomposition") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0, 2);
  std::uniform_real_distribution<double> u(-800, 800);
  const Vec3 n = Vec3(0.2, -0.1, -1).normalized();
  std::vector<Vec3> pts;
  for (int k = 0; k < 20; ++k) {
    Vec3 p(u(rng), u(rng), 0);
    p.z() = 500 - (n.x() * p.x() + n.y() * p.y()) / n.z() + noise(rng);
    pts.push_back(p);
  }
  Eigen::MatrixXd X(20, 3);
  for (int k = 0; k < 20; ++k) X.row(k) = pts[k].transpose();
  const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeThinV);
  Vec3 oracle = svd.matrixV().col(2);
  if (oracle.z() > 0) oracle = -oracle;
  CHECK(angle_between_deg(fit_plane<double>(pts).normal, oracle) * pi / 180 < 1e-9);
}

TEST_CASE("collinear points are rejected") {
  std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2), Vec3(3, 3, 3)};
  CHECK_THROWS_AS(fit_plane<double>(pts), Error);
}

TEST_CASE("exact circle and ellipse") {
  auto c = fit_ellipse<double>(ellipse_points(800, 800, 0, Vec2(10, -20), 8));
  CHECK(c.a == doctest::Approx(800).epsilon(1e-9));
  CHECK(c.b == doctest::Approx(800).epsilon(1e-9));
  CHECK(c.area() * 1e-6 == doctest::Approx(pi * 0.64).epsilon(1e-9));

  auto e = fit_ellipse<double>(ellipse_points(900, 760, 0, Vec2(0, 0), 8));
  CHECK(e.a == doctest::Approx(900).epsilon(1e-9));
  CHECK(e.b == doctest::Approx(760).epsilon(1e-9));
  CHECK(std::abs(e.area() * 1e-6 - 2.1488494) / 2.1488494 < 1e-6);

  auto r = fit_ellipse<double>(ellipse_points(900, 760, 0.6, Vec2(300, 200), 12));
  CHECK(r.angle == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(r.center.x() == doctest::Approx(300).epsilon(1e-9));
}

TEST_CASE("float instantiation") {
  std::vector<Eigen::Vector2f> pts;
  for (const Vec2& p : ellipse_points(900, 760, 0.2, Vec2(5, 5), 16)) pts.push_back(p.cast<float>());
  auto e = fit_ellipse<float>(pts);
  CHECK(e.a == doctest::Approx(900).epsilon(1e-4));
  CHECK(e.b == doctest::Approx(760).epsilon(1e-4));
}

TEST_CASE("noisy ellipse agrees with a geometric refit") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0, 10);
  for (int trial = 0; trial < 5; ++trial) {
    auto pts = ellipse_points(900, 760, 0.3 * trial, Vec2(40, -30), 48, 0.1 * trial);
    for (Vec2& p : pts) p += Vec2(noise(rng), noise(rng));
    const auto fit = fit_ellipse<double>(pts);
    const Eigen::VectorXd oracle = geometric_refit(pts, fit);
    CHECK(std::abs(fit.a - oracle(2)) / oracle(2) < 0.01);
    CHECK(std::abs(fit.b - oracle(3)) / oracle(3) < 0.01);
    CHECK(std::abs(fit.center.x() - oracle(0)) < 0.01 * oracle(3));
    CHECK(std::abs(fit.center.y() - oracle(1)) < 0.01 * oracle(3));
  }
}

TEST_CASE("too few points for a conic") {
  CHECK_THROWS_AS(fit_ellipse<double>(ellipse_points(900, 760, 0, Vec2(0, 0), 4)), Error);
}

TEST_CASE("phantom frame: center, radius, laterality") {
  PhantomConfig cfg;
  cfg.bmo_a_um = cfg.bmo_b_um = 800;
  std::vector<Vec3> bmo;
  const OnhFrame truth = phantom_frame(cfg);
  for (const Vec3& q : generate_bmo_points_normalized(cfg)) bmo.push_back(from_normalized(q, truth));
  const Vec3 center(cfg.dims.nx * cfg.spacing.dx / 2, cfg.dims.ny * cfg.spacing.dy / 2, cfg.bmo_depth_um);

  const OnhFrame right = build_frame(bmo, Laterality::Right);
  CHECK((right.bmo_center - center).norm() < 1e-6);
  CHECK(right.bmo_radius == doctest::Approx(800).epsilon(1e-9));
  CHECK(right.bmo_area == doctest::Approx(pi * 0.64).epsilon(1e-9));

  const OnhFrame left = build_frame(bmo, Laterality::Left);
  CHECK((left.axis_nasal + right.axis_nasal).norm() < 1e-12);
  CHECK((left.axis_superior - right.axis_superior).norm() < 1e-12);
  CHECK((left.bmo_normal - right.bmo_normal).norm() < 1e-12);
  CHECK((left.bmo_center - right.bmo_center).norm() < 1e-9);
}

TEST_CASE("tilted BMO plane recovers the construction normal") {
  PhantomConfig cfg;
  cfg.tilt_deg = 10;
  cfg.tilt_azimuth_deg = 35;
  cfg.dims = {192, 49, 496};
  cfg.spacing = {23, 70, 3.87};
  const Phantom ph = generate(cfg);
  const OnhFrame built = build_frame(ph.volume);
  CHECK(angle_between_deg(built.bmo_normal, phantom_frame(cfg).bmo_normal) < 0.1);
  CHECK(angle_between_deg(built.bmo_normal, Vec3(0, 0, -1)) == doctest::Approx(10).epsilon(1e-3));
}

TEST_CASE("normalization is a rigid map onto the BMO plane") {
  PhantomConfig cfg;
  cfg.tilt_deg = 7;
  cfg.bmo_angle_deg = 20;
  const OnhFrame truth = phantom_frame(cfg);
  std::vector<Vec3> bmo;
  for (const Vec3& q : generate_bmo_points_normalized(cfg)) bmo.push_back(from_normalized(q, truth));
  const OnhFrame f = build_frame(bmo, Laterality::Right);

  CHECK(to_normalized(f.bmo_center, f).norm() < 1e-12);
  const Vec3 p(1000, 1500, 700), q = p + Vec3(60, -80, 0);
  CHECK((to_normalized(p, f) - to_normalized(q, f)).norm() == doctest::Approx(100).epsilon(1e-12));
  CHECK((from_normalized(to_normalized(p, f), f) - p).norm() < 1e-9);
  for (const Vec3& b : bmo) CHECK(std::abs(to_normalized(b, f).z()) < 1e-9);
}
