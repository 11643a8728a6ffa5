#pragma once

#include "onh/common.hpp"
#include "onh/volume_io.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace onh {

template <typename Scalar>
struct PlaneFit {
  Eigen::Matrix<Scalar, 3, 1> centroid;
  Eigen::Matrix<Scalar, 3, 1> normal;  // unit, negative scan-z component (anterior)
};

/// Total least squares plane: the normal is the scatter-matrix eigenvector of the
/// smallest eigenvalue.
template <typename Scalar>
PlaneFit<Scalar> fit_plane(std::span<const Eigen::Matrix<Scalar, 3, 1>> points) {
  using Vec = Eigen::Matrix<Scalar, 3, 1>;
  using Mat = Eigen::Matrix<Scalar, 3, 3>;
  if (points.size() < 3) throw Error("frame", "DEGENERATE_COLLINEAR", "plane fit needs at least 3 points");

  Vec centroid = Vec::Zero();
  for (const Vec& p : points) centroid += p;
  centroid /= Scalar(points.size());

  Mat scatter = Mat::Zero();
  for (const Vec& p : points) {
    const Vec d = p - centroid;
    scatter.noalias() += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(scatter);
  const auto& ev = es.eigenvalues();  // ascending
  if (!(ev(2) > Scalar(0)) || (ev(1) < Scalar(1e-12) * ev(2)))
    throw Error("frame", "DEGENERATE_COLLINEAR", "BMO points are collinear or coincident");

  Vec normal = es.eigenvectors().col(0).normalized();
  if (normal.z() > Scalar(0) || (normal.z() == Scalar(0) && (normal.x() > 0 || (normal.x() == 0 && normal.y() > 0))))
    normal = -normal;
  return {centroid, normal};
}

/// In-plane right-eye basis for a plane with the given normal: `nasal` is the scan
/// x-axis projected into the plane, `superior` = normal x nasal.
template <typename Scalar>
std::pair<Eigen::Matrix<Scalar, 3, 1>, Eigen::Matrix<Scalar, 3, 1>> inplane_basis(
    const Eigen::Matrix<Scalar, 3, 1>& normal) {
  using Vec = Eigen::Matrix<Scalar, 3, 1>;
  Vec ex = Vec::UnitX();
  Vec nasal = ex - ex.dot(normal) * normal;
  if (nasal.norm() < Scalar(1e-9)) {
    const Vec ey = Vec::UnitY();
    nasal = ey - ey.dot(normal) * normal;
  }
  nasal.normalize();
  Vec superior = normal.cross(nasal).normalized();
  return {nasal, superior};
}

template <typename Scalar>
struct Ellipse {
  Eigen::Matrix<Scalar, 2, 1> center = Eigen::Matrix<Scalar, 2, 1>::Zero();
  Scalar a = 0;      // semi-major
  Scalar b = 0;      // semi-minor
  Scalar angle = 0;  // major-axis direction, radians in (-pi/2, pi/2]

  Scalar area() const { return std::numbers::pi_v<Scalar> * a * b; }
};

namespace detail {

template <typename Scalar>
std::optional<Ellipse<Scalar>> conic_to_ellipse(const Eigen::Matrix<Scalar, 6, 1>& conic) {
  using Vec2s = Eigen::Matrix<Scalar, 2, 1>;
  using Mat2s = Eigen::Matrix<Scalar, 2, 2>;
  const Scalar A = conic(0), B = conic(1), C = conic(2), D = conic(3), E = conic(4), F = conic(5);
  if (!(Scalar(4) * A * C - B * B > Scalar(0))) return std::nullopt;

  Mat2s H;
  H << Scalar(2) * A, B, B, Scalar(2) * C;
  const Vec2s center = H.fullPivLu().solve(Vec2s(-D, -E));
  const Scalar f0 = (D * center.x() + E * center.y()) / Scalar(2) + F;

  Mat2s Q;
  Q << A, B / Scalar(2), B / Scalar(2), C;
  Scalar sign = f0 < Scalar(0) ? Scalar(1) : Scalar(-1);
  Eigen::SelfAdjointEigenSolver<Mat2s> es(sign * Q);
  const Scalar l0 = es.eigenvalues()(0), l1 = es.eigenvalues()(1);
  const Scalar g = -sign * f0;
  if (!(l0 > 0) || !(g > 0)) return std::nullopt;

  Ellipse<Scalar> e;
  e.center = center;
  e.a = std::sqrt(g / l0);
  e.b = std::sqrt(g / l1);
  const Vec2s major = es.eigenvectors().col(0);
  e.angle = std::atan2(major.y(), major.x());
  if (e.angle <= -std::numbers::pi_v<Scalar> / 2) e.angle += std::numbers::pi_v<Scalar>;
  if (e.angle > std::numbers::pi_v<Scalar> / 2) e.angle -= std::numbers::pi_v<Scalar>;
  if (!std::isfinite(e.a) || !std::isfinite(e.b)) return std::nullopt;
  return e;
}

/// Algebraic circle fit x^2 + y^2 + Dx + Ey + F = 0.
template <typename Scalar>
std::optional<std::pair<Ellipse<Scalar>, Scalar>> fit_circle(std::span<const Eigen::Matrix<Scalar, 2, 1>> pts) {
  using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const Eigen::Index n = Eigen::Index(pts.size());
  MatX M(n, 3);
  VecX rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    M(i, 0) = pts[i].x();
    M(i, 1) = pts[i].y();
    M(i, 2) = 1;
    rhs(i) = -pts[i].squaredNorm();
  }
  Eigen::ColPivHouseholderQR<MatX> qr(M);
  if (qr.rank() < 3) return std::nullopt;
  const VecX sol = qr.solve(rhs);
  Ellipse<Scalar> e;
  e.center = {-sol(0) / 2, -sol(1) / 2};
  const Scalar r2 = e.center.squaredNorm() - sol(2);
  if (!(r2 > 0)) return std::nullopt;
  e.a = e.b = std::sqrt(r2);
  Scalar rms = 0;
  for (const auto& p : pts) rms += std::pow((p - e.center).norm() - e.a, 2);
  rms = std::sqrt(rms / Scalar(n));
  return std::pair{e, rms};
}

}  // namespace detail

/// Direct least-squares ellipse fit with the ellipse-specific constraint 4AC - B^2 = 1,
/// in the numerically stable block-decomposed form. Points are centered and scaled
/// before fitting. Falls back to a circle fit when the conic solution degenerates and
/// the points are nearly circular.
template <typename Scalar>
Ellipse<Scalar> fit_ellipse(std::span<const Eigen::Matrix<Scalar, 2, 1>> points) {
  using Vec2s = Eigen::Matrix<Scalar, 2, 1>;
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
  using MatX3 = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;
  if (points.size() < 5) throw Error("frame", "DEGENERATE_CONIC", "ellipse fit needs at least 5 points");

  Vec2s mean = Vec2s::Zero();
  for (const auto& p : points) mean += p;
  mean /= Scalar(points.size());
  Scalar scale = 0;
  for (const auto& p : points) scale += (p - mean).squaredNorm();
  scale = std::sqrt(scale / Scalar(points.size()));
  if (!(scale > 0)) throw Error("frame", "DEGENERATE_CONIC", "BMO points are coincident");

  std::vector<Vec2s> q;
  q.reserve(points.size());
  for (const auto& p : points) q.push_back((p - mean) / scale);

  const Eigen::Index n = Eigen::Index(q.size());
  MatX3 D1(n, 3), D2(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar x = q[i].x(), y = q[i].y();
    D1.row(i) << x * x, x * y, y * y;
    D2.row(i) << x, y, Scalar(1);
  }
  const Mat3 S1 = D1.transpose() * D1;
  const Mat3 S2 = D1.transpose() * D2;
  const Mat3 S3 = D2.transpose() * D2;

  std::optional<Ellipse<Scalar>> best;
  Eigen::FullPivLU<Mat3> s3lu(S3);
  if (s3lu.isInvertible()) {
    const Mat3 T = -s3lu.solve(S2.transpose());
    const Mat3 M = S1 + S2 * T;
    Mat3 R;
    R.row(0) = M.row(2) / Scalar(2);
    R.row(1) = -M.row(1);
    R.row(2) = M.row(0) / Scalar(2);
    Eigen::EigenSolver<Mat3> es(R);
    Scalar best_residual = std::numeric_limits<Scalar>::infinity();
    for (int k = 0; k < 3; ++k) {
      const Eigen::Matrix<Scalar, 3, 1> a1 = es.eigenvectors().col(k).real();
      const Scalar cond = Scalar(4) * a1(0) * a1(2) - a1(1) * a1(1);
      if (!(cond > 0)) continue;
      Eigen::Matrix<Scalar, 6, 1> conic;
      conic << a1, T * a1;
      const Scalar residual = (a1.transpose() * M * a1)(0) / cond;
      if (residual >= best_residual) continue;
      if (auto e = detail::conic_to_ellipse<Scalar>(conic)) {
        best = e;
        best_residual = residual;
      }
    }
  }

  if (!best) {
    auto circle = detail::fit_circle<Scalar>(std::span<const Vec2s>(q));
    if (!circle || circle->second > Scalar(0.05) * circle->first.a)
      throw Error("frame", "DEGENERATE_CONIC", "BMO points admit no elliptical fit");
    best = circle->first;
  }

  Ellipse<Scalar> e = *best;
  e.center = e.center * scale + mean;
  e.a *= scale;
  e.b *= scale;
  return e;
}

/// BMO-derived coordinate frame. Normalized coordinates are
/// (x: along axis_nasal, y: along axis_superior, z: depth, positive posteriorly),
/// origin at the BMO ellipse center. For left eyes axis_nasal is mirrored so every
/// downstream octant computation uses the right-eye convention.
struct OnhFrame {
  Vec3 plane_centroid = Vec3::Zero();
  Vec3 bmo_center = Vec3::Zero();
  Vec3 bmo_normal = Vec3(0, 0, -1);
  Vec3 axis_nasal = Vec3::UnitX();
  Vec3 axis_superior = Vec3(0, -1, 0);
  Laterality laterality = Laterality::Right;
  double bmo_radius = 0;  // sqrt(a b), um
  double bmo_area = 0;    // mm^2
  Ellipse<double> ellipse;  // in (axis_nasal, axis_superior) coordinates about plane_centroid
};

PlaneFit<double> fit_bmo_plane(std::span<const Vec3> bmo_points);

/// Projects the BMO points onto `plane` and fits the ellipse in right-eye in-plane
/// coordinates centered on the plane centroid.
Ellipse<double> fit_bmo_ellipse(std::span<const Vec3> bmo_points, const PlaneFit<double>& plane);

OnhFrame build_frame(const LabelVolume& volume);
OnhFrame build_frame(std::span<const Vec3> bmo_points, Laterality laterality);

inline Vec3 to_normalized(const Vec3& p, const OnhFrame& f) {
  const Vec3 d = p - f.bmo_center;
  return {d.dot(f.axis_nasal), d.dot(f.axis_superior), -d.dot(f.bmo_normal)};
}

inline Vec3 from_normalized(const Vec3& q, const OnhFrame& f) {
  return f.bmo_center + q.x() * f.axis_nasal + q.y() * f.axis_superior - q.z() * f.bmo_normal;
}

/// Frame built directly from a known plane geometry; used by the phantom so its
/// analytic coordinates agree with build_frame's conventions.
OnhFrame frame_from_geometry(const Vec3& bmo_center, const Vec3& normal, double a, double b,
                             double angle, Laterality laterality);

}  // namespace onh
