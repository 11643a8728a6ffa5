#include "onh/volume_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace onh {
namespace {

constexpr char kMagic[4] = {'O', 'N', 'H', 'V'};
constexpr std::uint16_t kVersion = 1;

[[noreturn]] void fail(const std::string& code, const std::string& msg) {
  throw Error("volume_io", code, msg);
}

bool same_double(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    bytes(buf, sizeof(T));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  template <typename T>
  T le(const char* field) {
    if (remaining() < sizeof(T)) fail("MALFORMED_HEADER", std::string("truncated at field '") + field + "'");
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, in_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* field) {
    if (remaining() < n) fail("MALFORMED_HEADER", std::string("truncated at field '") + field + "'");
    const auto* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

nlohmann::json meta_to_json(const SubjectMeta& m) {
  nlohmann::json j;
  j["id"] = m.id;
  j["age"] = std::isnan(m.age) ? nlohmann::json(nullptr) : nlohmann::json(m.age);
  j["sex"] = m.sex;
  j["md_db"] = std::isnan(m.md_db) ? nlohmann::json(nullptr) : nlohmann::json(m.md_db);
  j["cohort"] = m.cohort;
  return j;
}

SubjectMeta meta_from_json(const nlohmann::json& j) {
  SubjectMeta m;
  auto num = [&](const char* key) {
    if (!j.contains(key) || j[key].is_null()) return kNaN;
    if (!j[key].is_number()) fail("MALFORMED_HEADER", std::string("meta field '") + key + "' is not a number");
    return j[key].get<double>();
  };
  auto str = [&](const char* key) -> std::string {
    if (!j.contains(key) || j[key].is_null()) return {};
    if (!j[key].is_string()) fail("MALFORMED_HEADER", std::string("meta field '") + key + "' is not a string");
    return j[key].get<std::string>();
  };
  m.id = str("id");
  m.age = num("age");
  m.sex = str("sex");
  m.md_db = num("md_db");
  m.cohort = str("cohort");
  return m;
}

}  // namespace

std::string_view severity_name(SeverityGroup g) {
  switch (g) {
    case SeverityGroup::Normal: return "normal";
    case SeverityGroup::Mild: return "mild";
    case SeverityGroup::Moderate: return "moderate";
    case SeverityGroup::Advanced: return "advanced";
  }
  return "?";
}

SeverityGroup parse_severity(std::string_view name) {
  for (auto g : {SeverityGroup::Normal, SeverityGroup::Mild, SeverityGroup::Moderate, SeverityGroup::Advanced})
    if (severity_name(g) == name) return g;
  throw Error("volume_io", "UNKNOWN_GROUP", "unknown severity group '" + std::string(name) + "'");
}

bool SubjectMeta::operator==(const SubjectMeta& o) const {
  return id == o.id && same_double(age, o.age) && sex == o.sex && same_double(md_db, o.md_db) &&
         cohort == o.cohort;
}

std::size_t header_size(std::size_t bmo_count) {
  // magic, version, dims, spacing, laterality, bmo_count, bmo points, has_meta
  return 4 + 2 + 3 * 4 + 3 * 8 + 1 + 4 + bmo_count * 3 * 8 + 1;
}

void validate(const LabelVolume& v) {
  if (v.dims.nx == 0 || v.dims.ny == 0 || v.dims.nz == 0)
    fail("MALFORMED_HEADER", "dims must be positive");
  for (auto [name, d] : {std::pair{"dx", v.spacing.dx}, {"dy", v.spacing.dy}, {"dz", v.spacing.dz}})
    if (!(d > 0) || !std::isfinite(d)) fail("MALFORMED_HEADER", std::string("spacing.") + name + " must be positive");
  if (v.voxels.size() != v.dims.voxel_count())
    fail("SIZE_MISMATCH", "voxels: expected " + std::to_string(v.dims.voxel_count()) + " bytes, got " +
                              std::to_string(v.voxels.size()));
  if (v.bmo_points.size() < 5)
    fail("TOO_FEW_BMO_POINTS", "bmo_points: need at least 5, got " + std::to_string(v.bmo_points.size()));
  const Vec3 ext = v.extent();
  for (std::size_t i = 0; i < v.bmo_points.size(); ++i) {
    const Vec3& p = v.bmo_points[i];
    if (!p.allFinite() || (p.array() < 0).any() || (p.array() > ext.array()).any())
      fail("MALFORMED_HEADER", "bmo_points[" + std::to_string(i) + "] lies outside the volume bounds");
  }
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    if (v.voxels[i] > 7)
      fail("LABEL_OUT_OF_RANGE", "voxels[" + std::to_string(i) + "] = " + std::to_string(v.voxels[i]));
}

std::vector<std::uint8_t> encode_volume(const LabelVolume& v) {
  validate(v);
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint16_t>(kVersion);
  w.le<std::uint32_t>(v.dims.nx);
  w.le<std::uint32_t>(v.dims.ny);
  w.le<std::uint32_t>(v.dims.nz);
  w.le<double>(v.spacing.dx);
  w.le<double>(v.spacing.dy);
  w.le<double>(v.spacing.dz);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(v.laterality));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(v.bmo_points.size()));
  for (const Vec3& p : v.bmo_points) {
    w.le<double>(p.x());
    w.le<double>(p.y());
    w.le<double>(p.z());
  }
  w.le<std::uint8_t>(v.meta ? 1 : 0);
  if (v.meta) {
    const std::string text = meta_to_json(*v.meta).dump();
    w.le<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());
  }
  w.bytes(v.voxels.data(), v.voxels.size());
  return w.take();
}

LabelVolume decode_volume(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const auto* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) fail("MALFORMED_HEADER", "magic: expected 'ONHV'");
  const auto version = r.le<std::uint16_t>("version");
  if (version != kVersion) fail("MALFORMED_HEADER", "version: unsupported " + std::to_string(version));

  LabelVolume v;
  v.dims.nx = r.le<std::uint32_t>("nx");
  v.dims.ny = r.le<std::uint32_t>("ny");
  v.dims.nz = r.le<std::uint32_t>("nz");
  v.spacing.dx = r.le<double>("dx");
  v.spacing.dy = r.le<double>("dy");
  v.spacing.dz = r.le<double>("dz");
  const auto lat = r.le<std::uint8_t>("laterality");
  if (lat > 1) fail("MALFORMED_HEADER", "laterality: expected 0 or 1");
  v.laterality = static_cast<Laterality>(lat);
  const auto bmo_count = r.le<std::uint32_t>("bmo_count");
  if (std::size_t(bmo_count) * 24 > r.remaining()) fail("MALFORMED_HEADER", "bmo_count exceeds file size");
  v.bmo_points.reserve(bmo_count);
  for (std::uint32_t i = 0; i < bmo_count; ++i) {
    const double x = r.le<double>("bmo_points");
    const double y = r.le<double>("bmo_points");
    const double z = r.le<double>("bmo_points");
    v.bmo_points.emplace_back(x, y, z);
  }
  const auto has_meta = r.le<std::uint8_t>("has_meta");
  if (has_meta > 1) fail("MALFORMED_HEADER", "has_meta: expected 0 or 1");
  if (has_meta) {
    const auto len = r.le<std::uint32_t>("meta_length");
    const auto* text = r.take(len, "meta");
    nlohmann::json j = nlohmann::json::parse(text, text + len, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail("MALFORMED_HEADER", "meta: invalid JSON object");
    v.meta = meta_from_json(j);
  }
  if (v.dims.nx == 0 || v.dims.ny == 0 || v.dims.nz == 0) fail("MALFORMED_HEADER", "dims must be positive");
  const std::size_t expected = v.dims.voxel_count();
  if (r.remaining() != expected)
    fail("SIZE_MISMATCH", "voxels: expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(r.remaining()));
  const auto* payload = r.take(expected, "voxels");
  v.voxels.assign(payload, payload + expected);
  validate(v);
  return v;
}

LabelVolume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("volume_io", "IO_FAILURE", "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_volume(bytes);
}

void save_volume(const LabelVolume& volume, const std::filesystem::path& path) {
  const auto bytes = encode_volume(volume);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("volume_io", "IO_FAILURE", "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("volume_io", "IO_FAILURE", "write failed for '" + path.string() + "'");
}

SeverityGroup classify_severity(double md_db) {
  if (!std::isfinite(md_db)) throw Error("volume_io", "NON_FINITE_MD", "md_db must be finite");
  if (md_db >= -6.0) return SeverityGroup::Mild;
  if (md_db >= -12.0) return SeverityGroup::Moderate;
  return SeverityGroup::Advanced;
}

SeverityGroup severity_of(const SubjectMeta& meta) {
  if (meta.cohort == "normal") return SeverityGroup::Normal;
  return classify_severity(meta.md_db);
}

}  // namespace onh
