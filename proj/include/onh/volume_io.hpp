#pragma once

#include "onh/common.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace onh {

struct Dims {
  std::uint32_t nx = 0;  // A-scans per B-scan
  std::uint32_t ny = 0;  // B-scans
  std::uint32_t nz = 0;  // pixels per A-scan
  std::size_t voxel_count() const { return std::size_t(nx) * ny * nz; }
  std::size_t column_count() const { return std::size_t(nx) * ny; }
  bool operator==(const Dims&) const = default;
};

/// Voxel spacing in micrometers.
struct Spacing {
  double dx = 0, dy = 0, dz = 0;
  bool operator==(const Spacing&) const = default;
};

struct SubjectMeta {
  std::string id;
  double age = kNaN;
  std::string sex;
  double md_db = kNaN;  // NaN when unknown
  std::string cohort;   // "normal" flags a non-glaucomatous control
  bool operator==(const SubjectMeta& o) const;
};

/// Segmented ONH volume. Voxels are x-fastest: index = ix + nx * (iy + ny * iz).
/// Physical position of voxel (ix, iy, iz) is its center ((ix+0.5)dx, (iy+0.5)dy, (iz+0.5)dz);
/// increasing z points posteriorly (away from the vitreous).
struct LabelVolume {
  Dims dims;
  Spacing spacing;
  std::vector<std::uint8_t> voxels;
  std::vector<Vec3> bmo_points;
  Laterality laterality = Laterality::Right;
  std::optional<SubjectMeta> meta;

  std::size_t index(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return ix + std::size_t(dims.nx) * (iy + std::size_t(dims.ny) * iz);
  }
  TissueLabel at(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return static_cast<TissueLabel>(voxels[index(ix, iy, iz)]);
  }
  Vec3 voxel_center(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz) const {
    return {(ix + 0.5) * spacing.dx, (iy + 0.5) * spacing.dy, (iz + 0.5) * spacing.dz};
  }
  Vec3 extent() const { return {dims.nx * spacing.dx, dims.ny * spacing.dy, dims.nz * spacing.dz}; }

  bool operator==(const LabelVolume&) const = default;
};

/// Checks every LabelVolume invariant; throws Error("volume_io", ...) naming the field.
void validate(const LabelVolume& volume);

LabelVolume load_volume(const std::filesystem::path& path);
void save_volume(const LabelVolume& volume, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const LabelVolume& volume);
LabelVolume decode_volume(const std::vector<std::uint8_t>& bytes);

/// Size in bytes of the fixed and BMO parts of the header (everything before the
/// optional meta block).
std::size_t header_size(std::size_t bmo_count);

/// Glaucoma stage from visual-field mean deviation: MILD for md >= -6, MODERATE for
/// -12 <= md < -6, ADVANCED below -12. Never returns NORMAL.
SeverityGroup classify_severity(double md_db);

/// NORMAL when the record carries the "normal" cohort flag, otherwise classify_severity(md_db).
SeverityGroup severity_of(const SubjectMeta& meta);

}  // namespace onh
