#include "onh/frame.hpp"

namespace onh {

PlaneFit<double> fit_bmo_plane(std::span<const Vec3> bmo_points) { return fit_plane<double>(bmo_points); }

Ellipse<double> fit_bmo_ellipse(std::span<const Vec3> bmo_points, const PlaneFit<double>& plane) {
  const auto [nasal, superior] = inplane_basis<double>(plane.normal);
  std::vector<Vec2> uv;
  uv.reserve(bmo_points.size());
  for (const Vec3& p : bmo_points) {
    const Vec3 d = p - plane.centroid;
    uv.emplace_back(d.dot(nasal), d.dot(superior));
  }
  return fit_ellipse<double>(std::span<const Vec2>(uv));
}

namespace {

OnhFrame assemble(const Vec3& centroid, const Vec3& normal, Ellipse<double> ellipse, Laterality laterality) {
  const auto [nasal, superior] = inplane_basis<double>(normal);
  OnhFrame f;
  f.plane_centroid = centroid;
  f.bmo_normal = normal;
  f.bmo_center = centroid + ellipse.center.x() * nasal + ellipse.center.y() * superior;
  f.laterality = laterality;
  f.axis_superior = superior;
  f.axis_nasal = laterality == Laterality::Left ? Vec3(-nasal) : nasal;
  if (laterality == Laterality::Left) {
    ellipse.center.x() = -ellipse.center.x();
    ellipse.angle = -ellipse.angle;
    if (ellipse.angle <= -std::numbers::pi / 2) ellipse.angle += std::numbers::pi;
  }
  f.ellipse = ellipse;
  f.bmo_radius = std::sqrt(ellipse.a * ellipse.b);
  f.bmo_area = ellipse.area() / 1e6;
  return f;
}

}  // namespace

OnhFrame build_frame(std::span<const Vec3> bmo_points, Laterality laterality) {
  const PlaneFit<double> plane = fit_bmo_plane(bmo_points);
  const Ellipse<double> ellipse = fit_bmo_ellipse(bmo_points, plane);
  return assemble(plane.centroid, plane.normal, ellipse, laterality);
}

OnhFrame build_frame(const LabelVolume& volume) {
  return build_frame(std::span<const Vec3>(volume.bmo_points), volume.laterality);
}

OnhFrame frame_from_geometry(const Vec3& bmo_center, const Vec3& normal, double a, double b, double angle,
                             Laterality laterality) {
  Ellipse<double> e;
  e.a = a;
  e.b = b;
  e.angle = laterality == Laterality::Left ? -angle : angle;
  // assemble() mirrors for left eyes, so hand it the right-eye orientation
  OnhFrame f = assemble(bmo_center, normal.normalized(), e, laterality);
  return f;
}

}  // namespace onh
