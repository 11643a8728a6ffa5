#include <doctest.h>

#include "onh/cloud.hpp"
#include "onh/phantom.hpp"

#include <numeric>
#include <sstream>

using namespace onh;

namespace {

const LabelVolume& paper_phantom() {
  static const LabelVolume v = [] {
    PhantomConfig cfg;
    LabelVolume out = generate(cfg).volume;
    out.meta = SubjectMeta{"eye_a", 60, "F", -4.5, "glaucoma"};
    return out;
  }();
  return v;
}

const PointCloud& paper_cloud() {
  static const PointCloud c = build_cloud(paper_phantom());
  return c;
}

PointCloud numbered(std::size_t n) {
  PointCloud c;
  c.eye_id = "n";
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({double(i), 2.0 * double(i), -double(i), 1.0, TissueLabel::Orl});
  return c;
}

}  // namespace

TEST_CASE("cloud size at scan geometry") {
  const PointCloud& c = paper_cloud();
  CHECK(c.size() >= 15000);
  CHECK(c.size() <= 25000);
  CHECK(c.eye_id == "eye_a");
  CHECK(c.label == SeverityGroup::Mild);
}

TEST_CASE("BMO centroid at the origin") {
  const OnhFrame f = build_frame(paper_phantom());
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& b : paper_phantom().bmo_points) centroid += b;
  centroid /= double(paper_phantom().bmo_points.size());
  CHECK(to_normalized(centroid, f).norm() < 1e-6);
}

TEST_CASE("thickness sentinel by tissue") {
  std::map<TissueLabel, int> seen;
  for (const CloudPoint& p : paper_cloud().points) {
    ++seen[p.tissue];
    if (p.tissue == TissueLabel::Sclera || p.tissue == TissueLabel::Lc)
      CHECK(std::isnan(p.thickness));
    else
      CHECK(std::isfinite(p.thickness));
  }
  CHECK(seen.size() == 7);
  const FeatureMatrix f = features(paper_cloud());
  CHECK(f.rows() == Eigen::Index(paper_cloud().size()));
  CHECK(f.allFinite());
}

TEST_CASE("sampling") {
  const PointCloud c = numbered(10);
  CHECK(sample(c, 10, 1) == c);
  CHECK(sample(c, 50, 1) == c);
  const PointCloud big = numbered(500);
  CHECK(sample(big, 100, 9) == sample(big, 100, 9));
  CHECK(!(sample(big, 100, 9) == sample(big, 100, 10)));
  const PointCloud s = sample(big, 100, 9);
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s.points[i - 1].x < s.points[i].x);

  std::array<int, 10> hits{};
  for (std::uint64_t seed = 0; seed < 10000; ++seed) ++hits[std::size_t(sample(c, 1, seed).points[0].x)];
  for (int h : hits) {
    CHECK(h >= 850);
    CHECK(h <= 1150);
  }
}

TEST_CASE("augmentation with every range at zero") {
  const PointCloud c = sample(paper_cloud(), 2000, 3);
  AugmentConfig a;
  a.crop_fraction_min = a.crop_fraction_max = 1;
  a.rotation_deg_min = a.rotation_deg_max = 0;
  a.translation_um = 0;
  a.noise_sigma_um = 0;
  a.sample_n = c.size();
  CHECK(augment(c, a, 17) == c);

  a.rotation_deg_min = a.rotation_deg_max = 360;
  const PointCloud r = augment(c, a, 17);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(std::abs(r.points[i].x - c.points[i].x) < 1e-9);
    CHECK(std::abs(r.points[i].y - c.points[i].y) < 1e-9);
    CHECK(r.points[i].z == c.points[i].z);
  }
}

TEST_CASE("rigid augmentation preserves distances") {
  const PointCloud c = sample(paper_cloud(), 300, 4);
  AugmentConfig a;
  a.crop_fraction_min = a.crop_fraction_max = 1;
  a.noise_sigma_um = 0;
  a.sample_n = c.size();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PointCloud r = augment(c, a, seed);
    REQUIRE(r.size() == c.size());
    for (std::size_t i = 0; i < c.size(); i += 7)
      for (std::size_t j = i + 1; j < c.size(); j += 11) {
        const auto& p = c.points;
        const auto& q = r.points;
        const double d0 = std::hypot(p[i].x - p[j].x, p[i].y - p[j].y, p[i].z - p[j].z);
        const double d1 = std::hypot(q[i].x - q[j].x, q[i].y - q[j].y, q[i].z - q[j].z);
        CHECK(std::abs(d0 - d1) < 1e-9);
      }
  }
}

TEST_CASE("augmentation output and config checks") {
  const PointCloud& c = paper_cloud();
  AugmentConfig a;
  const PointCloud r = augment(c, a, 5);
  CHECK(r.size() == a.sample_n);
  CHECK(augment(c, a, 5) == r);

  std::vector<std::string> diag;
  const PointCloud small = numbered(70);
  a.crop_fraction_min = a.crop_fraction_max = 0.5;
  a.sample_n = 64;
  augment(small, a, 1, &diag);
  CHECK(diag == std::vector<std::string>{"cloud.CROP_EMPTIED"});

  AugmentConfig bad;
  bad.crop_fraction_min = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.rotation_deg_min = 20;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.sample_n = 10;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("cloud file round trip") {
  const PointCloud c = sample(paper_cloud(), 500, 8);
  std::ostringstream out;
  write_cloud(out, c);
  std::istringstream in(out.str());
  const PointCloud back = read_cloud(in);
  CHECK(back == c);
  std::ostringstream again;
  write_cloud(again, back);
  CHECK(again.str() == out.str());

  std::istringstream bad("x,y\n1,2\n");
  CHECK_THROWS_AS(read_cloud(bad), Error);
  std::istringstream short_row("x_um,y_um,z_um,thickness_um,tissue,eye_id,label\n1,2,3\n");
  CHECK_THROWS_AS(read_cloud(short_row), Error);
}

TEST_CASE("eye seeds") {
  CHECK(eye_seed(1, "a") == eye_seed(1, "a"));
  CHECK(eye_seed(1, "a") != eye_seed(2, "a"));
  CHECK(eye_seed(1, "a") != eye_seed(1, "b"));
}
