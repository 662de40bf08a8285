#pragma once

#include <cstdint>
#include <string>

#include "turbuforge/image.hpp"

namespace turbuforge {

enum class ChartKind { kDigits, kWedges, kCheckerboard, kFaceLike };

/// Synthetic test scene with values in [0.1, 0.9], anti-aliased by 4x4
/// supersampling. The seed only affects kDigits (which digits are drawn).
Image make_chart(ChartKind kind, int size, int channels = 1, std::uint64_t seed = 0);

/// "digits" | "wedges" | "checkerboard" | "face".
ChartKind parse_chart_kind(const std::string& name);
std::string chart_name(ChartKind kind);

}  // namespace turbuforge
