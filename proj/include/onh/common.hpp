#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace onh {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Error raised by every module. `module` and `code` together form the
/// machine-readable identity reported by the CLI (e.g. "volume_io.SIZE_MISMATCH").
class Error : public std::runtime_error {
 public:
  Error(std::string module, std::string code, const std::string& message)
      : std::runtime_error(module + "." + code + ": " + message),
        module_(std::move(module)),
        code_(std::move(code)),
        detail_(message) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string module_;
  std::string code_;
  std::string detail_;
};

enum class TissueLabel : std::uint8_t {
  Background = 0,
  RnflPlt = 1,
  GclIpl = 2,
  Orl = 3,
  RpeBm = 4,
  Choroid = 5,
  Sclera = 6,
  Lc = 7,
};

inline constexpr int kTissueCount = 7;

inline constexpr std::array<TissueLabel, kTissueCount> kAllTissues = {
    TissueLabel::RnflPlt, TissueLabel::GclIpl, TissueLabel::Orl,    TissueLabel::RpeBm,
    TissueLabel::Choroid, TissueLabel::Sclera, TissueLabel::Lc};

inline std::string_view tissue_name(TissueLabel t) {
  switch (t) {
    case TissueLabel::Background: return "BACKGROUND";
    case TissueLabel::RnflPlt: return "RNFL_PLT";
    case TissueLabel::GclIpl: return "GCL_IPL";
    case TissueLabel::Orl: return "ORL";
    case TissueLabel::RpeBm: return "RPE_BM";
    case TissueLabel::Choroid: return "CHOROID";
    case TissueLabel::Sclera: return "SCLERA";
    case TissueLabel::Lc: return "LC";
  }
  return "?";
}

/// Thickness is not defined for tissues whose posterior boundary is not visible.
inline constexpr bool has_thickness(TissueLabel t) {
  return t != TissueLabel::Sclera && t != TissueLabel::Lc && t != TissueLabel::Background;
}

enum class Laterality : std::uint8_t { Left = 0, Right = 1 };

enum class SeverityGroup : std::uint8_t { Normal = 0, Mild = 1, Moderate = 2, Advanced = 3 };

std::string_view severity_name(SeverityGroup g);
SeverityGroup parse_severity(std::string_view name);

}  // namespace onh
